# backend/etl_features.py
"""WAV directory -> FBNK feature files + manifest. Speaker id = parent directory name."""
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Tuple

import numpy as np
import pandas as pd
import soundfile as sf

import manifests
import storage_io
from errors import EmptyInputError, FormatError, VerificationError
from features import FeatureMatrix, pcm_to_features
from settings import FeatureConfig


@dataclass
class ExtractResult:
    manifest: Path
    written: List[Path] = field(default_factory=list)
    errors: List[Tuple[Path, str]] = field(default_factory=list)


def list_wavs(wav_dir: Path) -> List[Path]:
    return sorted(p for p in Path(wav_dir).rglob("*") if p.is_file() and p.suffix.lower() == ".wav")


def read_pcm(path: Path, sample_rate: int) -> np.ndarray:
    """16-bit mono PCM at the configured rate, scaled to [-1, 1)."""
    try:
        info = sf.info(str(path))
    except RuntimeError as e:
        raise FormatError(f"{path}: unreadable WAV: {e}") from e
    if info.subtype != "PCM_16" or info.channels != 1:
        raise FormatError(f"{path}: expected 16-bit mono PCM, got {info.subtype} x{info.channels}")
    if info.samplerate != sample_rate:
        raise FormatError(f"{path}: sample rate {info.samplerate} Hz, expected {sample_rate} Hz")
    try:
        pcm, _ = sf.read(str(path), dtype="float64", always_2d=False)
    except RuntimeError as e:
        raise FormatError(f"{path}: unreadable WAV: {e}") from e
    return np.asarray(pcm, dtype=np.float64)


def wav_to_features(path: Path, config: FeatureConfig) -> FeatureMatrix:
    return pcm_to_features(
        read_pcm(path, config.sample_rate),
        config.sample_rate,
        frame_len_ms=config.frame_len_ms,
        hop_ms=config.hop_ms,
        n_mels=config.n_mels,
        low_hz=config.mel_low_hz,
        high_hz=config.mel_high_hz,
        subtract=config.spectral_subtraction,
    )


def extract_directory(wav_dir: Path, out_dir: Path, config: FeatureConfig) -> ExtractResult:
    """
    One FBNK file per WAV under `out_dir/features`, mirroring the input tree,
    plus `out_dir/manifest.tsv`. Files that fail are collected; if any failed
    the manifest still lists the good ones and FormatError is raised at the end.
    """
    wav_dir, out_dir = Path(wav_dir), Path(out_dir)
    wavs = list_wavs(wav_dir)
    if not wavs:
        raise EmptyInputError(f"no input files under {wav_dir}")

    result = ExtractResult(manifest=out_dir / "manifest.tsv")
    rows = []
    for wav in wavs:
        rel = wav.relative_to(wav_dir).with_suffix("")
        try:
            fbank = wav_to_features(wav, config)
        except VerificationError as e:
            print(f"[etl_features] WARN: {e}")
            result.errors.append((wav, str(e)))
            continue
        dest = storage_io.write_features(out_dir / "features" / rel.with_suffix(".fbnk"), fbank)
        result.written.append(dest)
        speaker = wav.parent.name if wav.parent != wav_dir else wav_dir.name
        rows.append((rel.as_posix(), speaker, str(dest)))

    manifests.write_manifest(pd.DataFrame(rows, columns=manifests.MANIFEST_COLUMNS), result.manifest)
    print(f"[OK] {len(rows)} feature files -> {result.manifest}")
    if result.errors:
        listing = "; ".join(f"{p.name}: {msg}" for p, msg in result.errors)
        raise FormatError(f"{len(result.errors)} of {len(wavs)} files failed: {listing}")
    return result
