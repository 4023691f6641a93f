# backend/features.py
"""
Log-filterbank front end: framing, mel filterbank, spectral subtraction and the
fixed input window the networks consume.
"""
from dataclasses import dataclass
from functools import lru_cache
from typing import Tuple

import numpy as np
from scipy.fft import rfft
from scipy.signal import get_window

from errors import ContractError, DimensionError, EmptyInputError

LOG_FLOOR = 1e-10
LOG_FLOOR_VALUE = float(np.log(LOG_FLOOR))


@dataclass(frozen=True)
class FeatureMatrix:
    """T x D log-filterbank energies of one utterance."""
    values: np.ndarray

    def __post_init__(self) -> None:
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 2 or v.shape[0] < 1 or v.shape[1] < 1:
            raise DimensionError(f"feature matrix must be T x D with T, D >= 1, got {v.shape}")
        if not np.all(np.isfinite(v)):
            raise ContractError("feature matrix contains non-finite values")
        object.__setattr__(self, "values", v)

    @property
    def frames(self) -> int:
        return self.values.shape[0]

    @property
    def dims(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True)
class FixedWindow(FeatureMatrix):
    """A FeatureMatrix with exactly the configured number of frames."""


# ------------------------------ framing ------------------------------
def frame_signal(pcm: np.ndarray, sample_rate: int, frame_len_ms: float = 25.0, hop_ms: float = 10.0) -> np.ndarray:
    """Hann-windowed frames, shape (floor((len - frame) / hop) + 1, frame)."""
    if sample_rate <= 0:
        raise ContractError(f"sample rate must be positive, got {sample_rate}")
    pcm = np.asarray(pcm, dtype=np.float64).reshape(-1)
    frame = int(round(sample_rate * frame_len_ms / 1000.0))
    hop = int(round(sample_rate * hop_ms / 1000.0))
    if frame < 1 or hop < 1:
        raise ContractError(f"frame ({frame}) and hop ({hop}) must be at least one sample")
    if pcm.size < frame:
        raise EmptyInputError(f"signal of {pcm.size} samples is shorter than one {frame}-sample frame")
    count = (pcm.size - frame) // hop + 1
    starts = np.arange(count)[:, None] * hop
    frames = pcm[starts + np.arange(frame)[None, :]]
    return frames * get_window("hann", frame, fftbins=True)


# ------------------------------ mel filterbank ------------------------------
def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def fft_size(frame_len: int) -> int:
    return 1 << max(0, int(frame_len - 1).bit_length())


@lru_cache(maxsize=16)
def _filterbank(n_mels: int, n_fft: int, sample_rate: int, low_hz: float, high_hz: float) -> np.ndarray:
    """Unit-peak triangles on mel-spaced centers, evaluated at the exact bin frequencies."""
    edges = mel_to_hz(np.linspace(hz_to_mel(low_hz), hz_to_mel(high_hz), n_mels + 2))
    freqs = np.arange(n_fft // 2 + 1) * sample_rate / n_fft
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (freqs[None, :] - lo) / (mid - lo)
    falling = (hi - freqs[None, :]) / (hi - mid)
    bank = np.clip(np.minimum(rising, falling), 0.0, None)
    bank.setflags(write=False)
    return bank


def mel_filterbank(n_mels: int, n_fft: int, sample_rate: int, low_hz: float = 125.0, high_hz: float = 7500.0) -> np.ndarray:
    """(n_mels, n_fft // 2 + 1) filter matrix."""
    return _filterbank(int(n_mels), int(n_fft), int(sample_rate), float(low_hz), float(high_hz))


def mel_centers(n_mels: int, low_hz: float = 125.0, high_hz: float = 7500.0) -> np.ndarray:
    return mel_to_hz(np.linspace(hz_to_mel(low_hz), hz_to_mel(high_hz), n_mels + 2))[1:-1]


def log_mel_filterbank(
    frames: np.ndarray,
    n_mels: int = 40,
    sample_rate: int = 16000,
    low_hz: float = 125.0,
    high_hz: float = 7500.0,
) -> FeatureMatrix:
    frames = np.asarray(frames, dtype=np.float64)
    if n_mels < 1:
        raise ContractError(f"n_mels must be >= 1, got {n_mels}")
    if frames.ndim != 2 or frames.shape[0] == 0:
        raise EmptyInputError("no frames to analyse")
    n_fft = fft_size(frames.shape[1])
    power = np.abs(rfft(frames, n=n_fft, axis=1)) ** 2
    energies = power @ mel_filterbank(n_mels, n_fft, sample_rate, low_hz, high_hz).T
    return FeatureMatrix(np.log(energies + LOG_FLOOR))


def spectral_subtraction(fbank: FeatureMatrix, percentile: float = 10.0) -> FeatureMatrix:
    """Subtract each dimension's low-percentile noise floor in the log domain."""
    floor = np.percentile(fbank.values, percentile, axis=0)
    return FeatureMatrix(np.maximum(fbank.values - floor[None, :], LOG_FLOOR_VALUE))


# ------------------------------ fixed window ------------------------------
def extract_last_window(fbank: FeatureMatrix, window_frames: int = 80) -> FixedWindow:
    """Keep the last frames; short utterances are zero-padded at the beginning."""
    if window_frames < 1:
        raise ContractError(f"window must hold at least one frame, got {window_frames}")
    v = fbank.values
    if v.shape[0] >= window_frames:
        return FixedWindow(v[v.shape[0] - window_frames:].copy())
    pad = np.zeros((window_frames - v.shape[0], v.shape[1]))
    return FixedWindow(np.vstack([pad, v]))


def stack_frames(window: FixedWindow) -> np.ndarray:
    return window.values.reshape(-1).copy()


def unstack_frames(vector: np.ndarray, shape: Tuple[int, int]) -> FixedWindow:
    vector = np.asarray(vector, dtype=np.float64)
    if vector.size != shape[0] * shape[1]:
        raise DimensionError(f"vector of length {vector.size} cannot fill a {shape} window")
    return FixedWindow(vector.reshape(shape).copy())


def pcm_to_features(
    pcm: np.ndarray,
    sample_rate: int,
    frame_len_ms: float = 25.0,
    hop_ms: float = 10.0,
    n_mels: int = 40,
    low_hz: float = 125.0,
    high_hz: float = 7500.0,
    subtract: bool = True,
) -> FeatureMatrix:
    frames = frame_signal(pcm, sample_rate, frame_len_ms, hop_ms)
    fbank = log_mel_filterbank(frames, n_mels, sample_rate, low_hz, high_hz)
    return spectral_subtraction(fbank) if subtract else fbank
