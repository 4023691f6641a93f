# backend/losses.py
"""
Training objectives and the cosine scoring function.

softmax:  -log softmax(W y + b)[spk], optionally over a candidate subset.
e2e:      -log p(target) with p(accept) = sigmoid(w * cos(f(X), m_spk) + b).
"""
from dataclasses import dataclass
from enum import Enum
from typing import Iterable, List, Optional, Sequence

import numpy as np

from autodiff import GradTape, Tensor, affine_forward, sigmoid, take_rows
from errors import ContractError, DegenerateInputError, DimensionError

P_CLAMP = 1e-12


class Target(str, Enum):
    ACCEPT = "accept"
    REJECT = "reject"


@dataclass(frozen=True)
class E2eHead:
    w: float
    b: float

    def threshold(self) -> float:
        """Score where p(accept) = 0.5; the accept side depends on the sign of w."""
        if self.w == 0:
            return float("-inf") if self.b >= 0 else float("inf")
        return -self.b / self.w


@dataclass
class SoftmaxHead:
    weights: np.ndarray          # K x d, one row per training speaker
    biases: np.ndarray           # K
    speaker_ids: List[str]

    @property
    def n_speakers(self) -> int:
        return self.weights.shape[0]

    def index_of(self, speaker_id: str) -> int:
        try:
            return self.speaker_ids.index(speaker_id)
        except ValueError:
            raise ContractError(f"speaker {speaker_id!r} is not in the softmax head") from None


# ------------------------------ cosine ------------------------------
def cosine_similarity(f: Sequence[float], m: Sequence[float]) -> float:
    f = np.asarray(f, dtype=np.float64)
    m = np.asarray(m, dtype=np.float64)
    nf, nm = np.linalg.norm(f), np.linalg.norm(m)
    if nf == 0 or nm == 0:
        raise DegenerateInputError("cosine similarity of a zero-norm vector")
    return float(f @ m / (nf * nm))


def cosine_rows(tape: GradTape, F: Tensor, M: Tensor) -> Tensor:
    """Row-wise cosine for (B, d) pairs, or a scalar for two (d,) vectors."""
    if F.shape != M.shape:
        raise DimensionError(f"cosine: {F.shape} vs {M.shape}")
    f, m = F.value, M.value
    nf = np.linalg.norm(f, axis=-1, keepdims=True)
    nm = np.linalg.norm(m, axis=-1, keepdims=True)
    if np.any(nf == 0) or np.any(nm == 0):
        raise DegenerateInputError("cosine similarity of a zero-norm representation")
    s = np.sum(f * m, axis=-1, keepdims=True) / (nf * nm)
    out = Tensor(s[..., 0])

    def vjp(g):
        gk = np.expand_dims(g[0], -1)
        df = gk * (m / (nf * nm) - s * f / (nf * nf))
        dm = gk * (f / (nf * nm) - s * m / (nm * nm))
        return df, dm

    tape.record("cosine", (F, M), (out,), vjp)
    return out


# ------------------------------ softmax ------------------------------
def softmax_xent(tape: GradTape, logits: Tensor, labels: np.ndarray) -> Tensor:
    """Per-row cross-entropy with max-logit subtraction."""
    z = logits.value
    single = z.ndim == 1
    z2 = z[None] if single else z
    lab = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    K = z2.shape[1]
    if lab.shape != (z2.shape[0],) or np.any(lab < 0) or np.any(lab >= K):
        raise ContractError(f"labels {lab.tolist()} out of range for {K} classes")
    shifted = z2 - z2.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(z2.shape[0])
    losses = log_norm - shifted[rows, lab]
    out = Tensor(losses[0] if single else losses)

    def vjp(g):
        probs = np.exp(shifted - log_norm[:, None])
        probs[rows, lab] -= 1.0
        d = probs * np.atleast_1d(g[0])[:, None]
        return (d[0] if single else d,)

    tape.record("softmax_xent", (logits,), (out,), vjp)
    return out


def softmax_loss(tape: GradTape, y: Tensor, spk: int, W: Tensor, b: Tensor) -> Tensor:
    if not 0 <= spk < W.shape[0]:
        raise ContractError(f"speaker index {spk} out of range for {W.shape[0]} speakers")
    return softmax_xent(tape, affine_forward(tape, y, W, b), np.array([spk]))


def sample_candidates(n_speakers: int, true_ids: Iterable[int], count: int, rng: np.random.Generator) -> np.ndarray:
    """Sorted candidate set: the true speakers plus uniform impostors, no replacement."""
    true_ids = np.unique(np.asarray(list(true_ids), dtype=np.int64))
    others = np.setdiff1d(np.arange(n_speakers), true_ids)
    extra = max(0, min(count - true_ids.size, others.size))
    picked = rng.choice(others, size=extra, replace=False) if extra else np.zeros(0, dtype=np.int64)
    return np.sort(np.concatenate([true_ids, picked]))


def sampled_softmax_loss(
    tape: GradTape,
    y: Tensor,
    spk: int,
    W: Tensor,
    b: Tensor,
    candidates: Optional[Sequence[int]] = None,
    rng: Optional[np.random.Generator] = None,
    count: int = 64,
) -> Tensor:
    """Softmax loss restricted to a candidate set that must contain the true speaker."""
    if candidates is None:
        if rng is None:
            raise ContractError("sampled softmax needs either candidates or an rng")
        candidates = sample_candidates(W.shape[0], [spk], count, rng)
    cand = np.asarray(sorted(set(int(c) for c in candidates)), dtype=np.int64)
    if cand.size == 0 or spk not in cand:
        raise ContractError(f"true speaker {spk} missing from candidate set")
    Wc = take_rows(tape, W, cand)
    bc = take_rows(tape, b, cand)
    return softmax_xent(tape, affine_forward(tape, y, Wc, bc), np.array([int(np.searchsorted(cand, spk))]))


# ------------------------------ end-to-end ------------------------------
def e2e_score(s: float, head: E2eHead) -> float:
    return sigmoid(head.w * s + head.b)


def _warn_clamped(n: int) -> None:
    print(f"[losses] WARN: p_accept clamped to [{P_CLAMP}, 1-{P_CLAMP}] for {n} trial(s); "
          f"check the learning rate")


def e2e_loss(p_accept: float, target: Target) -> float:
    target = Target(target)
    p = min(max(float(p_accept), P_CLAMP), 1.0 - P_CLAMP)
    if p != p_accept:
        _warn_clamped(1)
    return -np.log(p) if target is Target.ACCEPT else -np.log(1.0 - p)


def e2e_trial_losses(tape: GradTape, s: Tensor, w: Tensor, b: Tensor, accept: np.ndarray) -> Tensor:
    """Per-trial -log p(target) for cosine scores s (B,), head scalars w, b."""
    accept = np.asarray(accept, dtype=bool).reshape(s.shape)
    p = np.asarray(sigmoid(w.value * s.value + b.value), dtype=np.float64)
    clamped = (p < P_CLAMP) | (p > 1.0 - P_CLAMP)
    if np.any(clamped):
        _warn_clamped(int(np.count_nonzero(clamped)))
    pc = np.clip(p, P_CLAMP, 1.0 - P_CLAMP)
    out = Tensor(np.where(accept, -np.log(pc), -np.log(1.0 - pc)))

    def vjp(g):
        # gradient of the unclamped loss, also for clamped trials
        dz = np.where(accept, p - 1.0, p) * g[0]
        return dz * w.value, np.sum(dz * s.value), np.sum(dz)

    tape.record("e2e_logistic", (s, w, b), (out,), vjp)
    return out
