# backend/synthetic_data.py
"""
Deterministic synthetic speakers.

Frame t of an utterance is (A v) * pattern(t) + noise, where v is the
speaker's unit latent vector, A a corpus-wide L -> D mixing map and pattern a
smooth envelope shared by every speaker (the fixed phrase). Identity lives in
v only.

The noise has two parts, both scaled by noise_level: white noise per element,
and a per-utterance channel offset that is constant over the utterance and
lies in the directions A cannot reach (scaled again by channel_gain). The
channel dominates the raw features, so an untrained network scores close to
chance, while a network that learns to project it out sees only v and the
white noise.

Cohort speakers are extra impostors outside both the training and the
evaluation speakers; each contributes `enroll_per_speaker` utterances for
t-norm cohort models.
"""
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Sequence

import numpy as np
import pandas as pd

import manifests
import storage_io
from errors import ContractError
from evaluation import EvalSet, eer_from_scores
from features import FeatureMatrix
from settings import SynthConfig
from training import Utterance


@dataclass(frozen=True)
class SyntheticSpeaker:
    speaker_id: str
    latent: np.ndarray
    seed: int               # index into the per-utterance seed tree


@dataclass
class SyntheticCorpus:
    config: SynthConfig
    speakers: Dict[str, SyntheticSpeaker]
    train: List[Utterance]
    heldout: List[Utterance]
    cohort: List[Utterance] = field(default_factory=list)


def speaker_id(index: int) -> str:
    return f"spk{index:04d}"


def utterance_id(speaker: str, index: int) -> str:
    return f"{speaker}_u{index:03d}"


def mixing_map(config: SynthConfig) -> np.ndarray:
    rng = np.random.default_rng([config.seed, 0])
    return rng.standard_normal((config.dims, config.latent_dim)) / np.sqrt(config.latent_dim)


def channel_basis(config: SynthConfig) -> np.ndarray:
    """(D, D - rank A) orthonormal directions outside the span of the mixing map."""
    A = mixing_map(config)
    U, _, _ = np.linalg.svd(A, full_matrices=True)
    return U[:, min(config.dims, config.latent_dim):]


def temporal_pattern(config: SynthConfig) -> np.ndarray:
    """(T, D) envelope in [0.5, 1.5], one slow sinusoid per dimension."""
    rng = np.random.default_rng([config.seed, 1])
    freq = rng.uniform(0.5, 2.0, size=config.dims)
    phase = rng.uniform(0.0, 2 * np.pi, size=config.dims)
    t = np.arange(config.frames)[:, None] / config.frames
    return 1.0 + 0.5 * np.sin(2 * np.pi * freq[None, :] * t + phase[None, :])


def make_speakers(config: SynthConfig) -> Dict[str, SyntheticSpeaker]:
    rng = np.random.default_rng([config.seed, 2])
    out: Dict[str, SyntheticSpeaker] = {}
    for i in range(config.train_speakers + config.heldout_speakers + config.cohort_speakers):
        v = rng.standard_normal(config.latent_dim)
        while np.linalg.norm(v) == 0:
            v = rng.standard_normal(config.latent_dim)
        out[speaker_id(i)] = SyntheticSpeaker(speaker_id(i), v / np.linalg.norm(v), i)
    return out


def _utterance(config: SynthConfig, signal: np.ndarray, pattern: np.ndarray, channel: np.ndarray,
               speaker: SyntheticSpeaker, j: int) -> Utterance:
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 3, speaker.seed, j]))
    values = pattern * signal[None, :]
    if config.noise_level > 0:
        values = values + config.noise_level * rng.standard_normal(values.shape)
        if config.channel_gain > 0 and channel.shape[1]:
            offset = channel @ rng.standard_normal(channel.shape[1])
            values = values + config.noise_level * config.channel_gain * offset[None, :]
    return Utterance(utterance_id(speaker.speaker_id, j), speaker.speaker_id, FeatureMatrix(values))


def synthesize(config: SynthConfig) -> SyntheticCorpus:
    """The whole corpus in memory; a pure function of the config."""
    A = mixing_map(config)
    pattern = temporal_pattern(config)
    channel = channel_basis(config)
    speakers = make_speakers(config)
    n_eval = config.train_speakers + config.heldout_speakers
    train: List[Utterance] = []
    heldout: List[Utterance] = []
    cohort: List[Utterance] = []
    for i, spk in enumerate(speakers.values()):
        signal = A @ spk.latent
        if i >= n_eval:
            cohort.extend(_utterance(config, signal, pattern, channel, spk, j) for j in range(config.enroll_per_speaker))
            continue
        utts = [_utterance(config, signal, pattern, channel, spk, j) for j in range(config.utterances_per_speaker)]
        (train if i < config.train_speakers else heldout).extend(utts)
    return SyntheticCorpus(config, speakers, train, heldout, cohort)


def _group_by_speaker(utts: Sequence[Utterance]) -> Dict[str, List[str]]:
    out: Dict[str, List[str]] = {}
    for u in utts:
        out.setdefault(u.speaker_id, []).append(u.utterance_id)
    return out


def split_enrollment(config: SynthConfig, heldout: Sequence[Utterance]) -> Dict[str, List[str]]:
    out = _group_by_speaker(heldout)
    if any(len(v) <= config.enroll_per_speaker for v in out.values()):
        raise ContractError(
            f"enroll_per_speaker={config.enroll_per_speaker} leaves no test utterances "
            f"with {config.utterances_per_speaker} utterances per speaker"
        )
    return {s: ids[:config.enroll_per_speaker] for s, ids in out.items()}


def make_trials(config: SynthConfig, heldout: Sequence[Utterance]) -> pd.DataFrame:
    """One target trial plus `nontargets_per_test` impostor claims per test utterance."""
    enrollment = split_enrollment(config, heldout)
    enrolled = {u for ids in enrollment.values() for u in ids}
    speakers = sorted(enrollment)
    rng = np.random.default_rng([config.seed, 4])
    rows = []
    for u in heldout:
        if u.utterance_id in enrolled:
            continue
        rows.append((u.utterance_id, u.speaker_id, "target"))
        others = [s for s in speakers if s != u.speaker_id]
        k = min(config.nontargets_per_test, len(others))
        for i in sorted(rng.choice(len(others), size=k, replace=False)):
            rows.append((u.utterance_id, others[int(i)], "nontarget"))
    df = pd.DataFrame(rows, columns=["test_id", "claimed_speaker", "label"])
    df.insert(0, "trial_id", [f"t{i:06d}" for i in range(len(df))])
    return df


def eval_set(corpus: SyntheticCorpus) -> EvalSet:
    cfg = corpus.config
    return EvalSet(
        features={u.utterance_id: u.features for u in corpus.heldout + corpus.cohort},
        enrollment=split_enrollment(cfg, corpus.heldout),
        trials=make_trials(cfg, corpus.heldout),
        cohort=_group_by_speaker(corpus.cohort),
    )


def oracle_eer(config: SynthConfig, trials: pd.DataFrame) -> float:
    """EER when every utterance is scored by its true latent; a floor for trained systems."""
    speakers = make_speakers(config)
    tar, non = [], []
    for t in trials.itertuples(index=False):
        test_speaker = t.test_id.rsplit("_u", 1)[0]
        if test_speaker not in speakers or t.claimed_speaker not in speakers:
            raise ContractError(f"trial {t.trial_id} references an unknown speaker or utterance")
        score = float(speakers[test_speaker].latent @ speakers[t.claimed_speaker].latent)
        (tar if t.label == "target" else non).append(score)
    return eer_from_scores(tar, non)[0]


def _write_split(utts: Sequence[Utterance], out_dir: Path, name: str) -> Path:
    rows = []
    for u in utts:
        path = storage_io.write_features(out_dir / "features" / u.speaker_id / f"{u.utterance_id}.fbnk", u.features)
        rows.append((u.utterance_id, u.speaker_id, str(path)))
    return manifests.write_manifest(pd.DataFrame(rows, columns=manifests.MANIFEST_COLUMNS), out_dir / name)


def generate_corpus(config: SynthConfig, out_dir: Path) -> Dict[str, Path]:
    out_dir = Path(out_dir)
    corpus = synthesize(config)
    enrollment = split_enrollment(config, corpus.heldout)
    enrolled = {u for ids in enrollment.values() for u in ids}
    paths = {
        "train": _write_split(corpus.train, out_dir, "train.tsv"),
        "heldout": _write_split(corpus.heldout, out_dir, "heldout.tsv"),
    }
    heldout = manifests.read_manifest(paths["heldout"])
    enroll_rows = heldout[heldout["utterance_id"].isin(enrolled)]
    paths["enroll"] = manifests.write_manifest(enroll_rows, out_dir / "enroll.tsv")
    paths["test"] = manifests.write_manifest(heldout[~heldout["utterance_id"].isin(enrolled)], out_dir / "test.tsv")
    paths["trials"] = manifests.write_trials(make_trials(config, corpus.heldout), out_dir / "trials.tsv")
    if corpus.cohort:
        paths["cohort"] = _write_split(corpus.cohort, out_dir, "cohort.tsv")
    n_files = len(corpus.train) + len(corpus.heldout) + len(corpus.cohort)
    print(f"[synthetic_data] {len(corpus.speakers)} speakers, {n_files} feature files -> {out_dir}")
    return paths
