# backend/settings.py
import os
from functools import lru_cache
from pathlib import Path
from typing import Any, Dict, Literal, Optional, Type

import yaml
from dotenv import dotenv_values, load_dotenv
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from errors import ConfigurationError

load_dotenv(Path(__file__).parent / ".env")

CONFIG_PATH = Path(os.environ.get("SV_CONFIG_PATH", "config/experiment.yaml"))
OUTPUT_DIR = Path(os.environ.get("SV_OUTPUT_DIR", "runs"))


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class FeatureConfig(_Section):
    sample_rate: int = Field(16000, gt=0)
    frame_len_ms: float = Field(25.0, gt=0)
    hop_ms: float = Field(10.0, gt=0)
    n_mels: int = Field(40, ge=1)
    mel_low_hz: float = Field(125.0, ge=0)
    mel_high_hz: float = Field(7500.0, gt=0)
    spectral_subtraction: bool = True
    window_frames: int = Field(80, ge=1)

    @model_validator(mode="after")
    def _mel_range(self) -> "FeatureConfig":
        if not self.mel_low_hz < self.mel_high_hz <= self.sample_rate / 2:
            raise ValueError(
                f"mel range {self.mel_low_hz}-{self.mel_high_hz} Hz must be increasing and below Nyquist"
            )
        return self


class NetworkConfig(_Section):
    network: Literal["dnn", "frame_dnn", "lstm"] = "dnn"
    feature_dim: int = Field(40, ge=1)
    window_frames: int = Field(80, ge=1)
    patch_frames: int = Field(10, ge=1)
    patch_dims: int = Field(10, ge=1)
    lc_units: int = Field(16, ge=1)
    hidden_layers: int = Field(4, ge=2)
    hidden_width: int = Field(504, ge=1)
    context_frames: int = Field(2, ge=0)
    lstm_hidden: int = Field(504, ge=1)


class TrainConfig(_Section):
    loss: Literal["e2e", "softmax"] = "e2e"
    network: NetworkConfig = NetworkConfig()
    speaker_model_size: int = Field(5, ge=1)
    batch_size: int = Field(32, ge=1)
    learning_rate: float = Field(0.05, gt=0)
    momentum: float = Field(0.9, ge=0, lt=1)
    steps: int = Field(1000, ge=1)
    seed: int = 0
    target_ratio: float = Field(0.5, ge=0, le=1)
    pool_capacity: int = Field(1024, ge=2)
    pool_refresh_steps: int = Field(64, ge=1)
    group_size: int = Field(8, ge=1)
    dropout: float = Field(0.0, ge=0, lt=1)
    candidate_count: int = Field(0, ge=0)
    e2e_init_w: float = 10.0
    e2e_init_b: float = -5.0
    clip_norm: float = Field(0.0, ge=0)        # global gradient-norm cap; 0 disables
    log_every: int = Field(100, ge=1)


class SynthConfig(_Section):
    train_speakers: int = Field(64, ge=1)
    heldout_speakers: int = Field(16, ge=1)
    utterances_per_speaker: int = Field(20, ge=1)
    frames: int = Field(80, ge=1)
    dims: int = Field(8, ge=1)
    latent_dim: int = Field(4, ge=1)
    noise_level: float = Field(0.3, ge=0)
    channel_gain: float = Field(5.0, ge=0)     # per-utterance channel offset, in units of noise_level
    seed: int = 0
    enroll_per_speaker: int = Field(5, ge=1)
    nontargets_per_test: int = Field(3, ge=0)
    cohort_speakers: int = Field(20, ge=0)


class EvalConfig(_Section):
    max_enroll_utterances: int = Field(9, ge=1)
    cohort_size: int = Field(20, ge=2)
    tnorm: bool = False


class ExperimentConfig(BaseModel):
    """All sections of one run; built from a flat key/value mapping."""
    model_config = ConfigDict(frozen=True)

    features: FeatureConfig = FeatureConfig()
    train: TrainConfig = TrainConfig()
    synth: SynthConfig = SynthConfig()
    evaluation: EvalConfig = EvalConfig()

    @property
    def network(self) -> NetworkConfig:
        return self.train.network

    def with_seed(self, seed: int) -> "ExperimentConfig":
        return self.model_copy(update={
            "train": self.train.model_copy(update={"seed": seed}),
            "synth": self.synth.model_copy(update={"seed": seed}),
        })


_SECTIONS: Dict[str, Type[_Section]] = {
    "features": FeatureConfig,
    "network": NetworkConfig,
    "train": TrainConfig,
    "synth": SynthConfig,
    "evaluation": EvalConfig,
}


def _owners(key: str):
    # TrainConfig.network is the nested section itself, not a flat key
    return [name for name, model in _SECTIONS.items()
            if key in model.model_fields and not (name == "train" and key == "network")]


def from_flat(values: Dict[str, Any]) -> ExperimentConfig:
    """Distribute flat keys over the sections; unknown keys fail fast."""
    buckets: Dict[str, Dict[str, Any]] = {name: {} for name in _SECTIONS}
    for key, value in values.items():
        owners = _owners(str(key))
        if not owners:
            raise ConfigurationError(f"unknown config key: {key!r}")
        for name in owners:
            buckets[name][key] = value
    try:
        network = NetworkConfig(**buckets["network"])
        return ExperimentConfig(
            features=FeatureConfig(**buckets["features"]),
            train=TrainConfig(network=network, **buckets["train"]),
            synth=SynthConfig(**buckets["synth"]),
            evaluation=EvalConfig(**buckets["evaluation"]),
        )
    except ValidationError as e:
        first = e.errors()[0]
        where = ".".join(str(p) for p in first.get("loc", ())) or "config"
        raise ConfigurationError(f"invalid config value for {where}: {first.get('msg')}") from e


YAML_SUFFIXES = (".yaml", ".yml")


def _read_key_values(path: Path) -> Dict[str, Any]:
    """`key=value` lines with `#` comments; values stay strings and pydantic coerces them."""
    values = dotenv_values(path, interpolate=False)
    empty = [k for k, v in values.items() if v is None or v == ""]
    if empty:
        raise ConfigurationError(f"config {path}: key {empty[0]!r} has no value")
    return dict(values)


def load_config(path: Optional[Path] = None) -> ExperimentConfig:
    """Flat YAML (`.yaml`/`.yml`) or `key=value` lines (any other suffix)."""
    path = Path(path) if path is not None else CONFIG_PATH
    if not path.exists():
        raise ConfigurationError(f"config file not found: {path}")
    if path.suffix.lower() not in YAML_SUFFIXES:
        return from_flat(_read_key_values(path))
    try:
        with open(path, "r", encoding="utf-8") as f:
            data = yaml.safe_load(f) or {}
    except yaml.YAMLError as e:
        raise ConfigurationError(f"config {path} is not valid YAML: {e}") from e
    if not isinstance(data, dict):
        raise ConfigurationError(f"config {path} must be a flat key: value mapping")
    nested = [k for k, v in data.items() if isinstance(v, (dict, list))]
    if nested:
        raise ConfigurationError(f"config {path} must be flat; nested value under {nested[0]!r}")
    return from_flat(data)


@lru_cache(maxsize=8)
def cached_config(path: str) -> ExperimentConfig:
    return load_config(Path(path))
