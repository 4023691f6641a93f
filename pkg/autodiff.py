# backend/autodiff.py
"""
Small tape-based reverse-mode differentiation over numpy arrays.

Every primitive records one entry on a GradTape: its input tensors, its output
tensors and a vector-Jacobian closure. `backward` replays the tape in exact
reverse order and accumulates gradients by tensor identity. Values are always
float64; single precision only appears at the file boundary (storage_io).
"""
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from errors import ContractError, DimensionError

ArrayLike = Union[np.ndarray, float, Sequence[float]]


class Tensor:
    """A float64 array that can sit on a tape. Leaves are parameters or inputs."""
    __slots__ = ("value", "name")

    def __init__(self, value: ArrayLike, name: Optional[str] = None) -> None:
        self.value = np.asarray(value, dtype=np.float64)
        self.name = name

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.value.shape

    def item(self) -> float:
        return float(self.value.reshape(-1)[0])

    def __repr__(self) -> str:
        label = f" {self.name}" if self.name else ""
        return f"Tensor{label}(shape={self.shape})"


Vjp = Callable[[List[np.ndarray]], Sequence[Optional[np.ndarray]]]


@dataclass
class TapeEntry:
    op: str
    inputs: Tuple[Tensor, ...]
    outputs: Tuple[Tensor, ...]
    vjp: Vjp


class GradTape:
    """
    Ordered record of executed primitives.

    A disabled tape records nothing; forward values are unchanged, which makes
    it the cheap path for frozen-network evaluation.
    """

    def __init__(self, enabled: bool = True) -> None:
        self.enabled = enabled
        self.entries: List[TapeEntry] = []

    def record(self, op: str, inputs: Sequence[Tensor], outputs: Sequence[Tensor], vjp: Vjp) -> None:
        if self.enabled:
            self.entries.append(TapeEntry(op, tuple(inputs), tuple(outputs), vjp))

    def produced(self, t: Tensor) -> bool:
        return any(o is t for e in self.entries for o in e.outputs)

    def __len__(self) -> int:
        return len(self.entries)


def backward(tape: GradTape, loss: Tensor, params: Sequence[Tensor]) -> List[np.ndarray]:
    """Gradients of the scalar `loss` wrt `params`; zeros for params the loss does not touch."""
    if loss.value.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not tape.produced(loss):
        raise ContractError("loss tensor was not produced on this tape")

    grads: Dict[int, np.ndarray] = {id(loss): np.ones_like(loss.value)}
    for entry in reversed(tape.entries):
        upstream = [grads.get(id(o)) for o in entry.outputs]
        if all(g is None for g in upstream):
            continue
        upstream = [np.zeros_like(o.value) if g is None else g for g, o in zip(upstream, entry.outputs)]
        for inp, g in zip(entry.inputs, entry.vjp(upstream)):
            if g is None:
                continue
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + g
            else:
                grads[key] = np.array(g, dtype=np.float64, copy=True)

    return [grads.get(id(p), np.zeros_like(p.value)) for p in params]


# ------------------------------ numeric helpers ------------------------------
def sigmoid(x: ArrayLike):
    """Logistic function, branching on sign so neither exp ever overflows."""
    arr = np.asarray(x, dtype=np.float64)
    flat = np.atleast_1d(arr)
    out = np.empty_like(flat)
    pos = flat >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-flat[pos]))
    e = np.exp(flat[~pos])
    out[~pos] = e / (1.0 + e)
    return float(out[0]) if arr.ndim == 0 else out.reshape(arr.shape)


# ------------------------------ primitives ------------------------------
def affine_forward(tape: GradTape, x: Tensor, W: Tensor, b: Tensor) -> Tensor:
    """Wx + b for a vector x[n], or row-wise for a batch x[B, n]."""
    if W.value.ndim != 2 or b.value.shape != (W.shape[0],) or x.value.ndim not in (1, 2) or x.shape[-1] != W.shape[1]:
        raise DimensionError(f"affine: x{x.shape}, W{W.shape}, b{b.shape} do not conform")
    out = Tensor(x.value @ W.value.T + b.value)

    def vjp(g):
        g = g[0]
        if x.value.ndim == 1:
            return g @ W.value, np.outer(g, x.value), g
        return g @ W.value, g.T @ x.value, g.sum(axis=0)

    tape.record("affine", (x, W, b), (out,), vjp)
    return out


def relu(tape: GradTape, x: Tensor) -> Tensor:
    # subgradient at exactly 0 is 0
    mask = x.value > 0
    out = Tensor(np.where(mask, x.value, 0.0))
    tape.record("relu", (x,), (out,), lambda g: (g[0] * mask,))
    return out


def logistic(tape: GradTape, x: Tensor) -> Tensor:
    s = np.asarray(sigmoid(x.value), dtype=np.float64)
    out = Tensor(s)
    tape.record("logistic", (x,), (out,), lambda g: (g[0] * s * (1.0 - s),))
    return out


def tanh(tape: GradTape, x: Tensor) -> Tensor:
    t = np.tanh(x.value)
    out = Tensor(t)
    tape.record("tanh", (x,), (out,), lambda g: (g[0] * (1.0 - t * t),))
    return out


def add(tape: GradTape, a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"add: {a.shape} vs {b.shape}")
    out = Tensor(a.value + b.value)
    tape.record("add", (a, b), (out,), lambda g: (g[0], g[0]))
    return out


def mean(tape: GradTape, x: Tensor, axis: Optional[int] = None) -> Tensor:
    out = Tensor(x.value.mean(axis=axis))
    if axis is None:
        n = x.value.size
        vjp = lambda g: (np.full_like(x.value, g[0] / n),)
    else:
        n = x.shape[axis]
        vjp = lambda g: (np.broadcast_to(np.expand_dims(g[0], axis) / n, x.shape).copy(),)
    tape.record("mean", (x,), (out,), vjp)
    return out


def total(tape: GradTape, x: Tensor) -> Tensor:
    out = Tensor(x.value.sum())
    tape.record("sum", (x,), (out,), lambda g: (np.full_like(x.value, g[0]),))
    return out


def reshape(tape: GradTape, x: Tensor, shape: Tuple[int, ...]) -> Tensor:
    out = Tensor(x.value.reshape(shape))
    tape.record("reshape", (x,), (out,), lambda g: (g[0].reshape(x.shape),))
    return out


def index(tape: GradTape, x: Tensor, key) -> Tensor:
    """Basic slicing, e.g. one time step x[:, t, :]."""
    out = Tensor(np.array(x.value[key], copy=True))

    def vjp(g):
        dx = np.zeros_like(x.value)
        dx[key] += g[0]
        return (dx,)

    tape.record("index", (x,), (out,), vjp)
    return out


def take_rows(tape: GradTape, x: Tensor, rows: np.ndarray) -> Tensor:
    """Gather rows of a matrix; repeated rows accumulate on the way back."""
    rows = np.asarray(rows, dtype=np.int64)
    out = Tensor(x.value[rows])

    def vjp(g):
        dx = np.zeros_like(x.value)
        np.add.at(dx, rows, g[0])
        return (dx,)

    tape.record("take_rows", (x,), (out,), vjp)
    return out


def dropout(tape: GradTape, x: Tensor, rate: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout: kept units are scaled by 1/(1-rate) at train time."""
    if rate <= 0.0:
        return x
    if rate >= 1.0:
        raise ContractError(f"dropout rate must be < 1, got {rate}")
    mask = (rng.random(x.shape) >= rate) / (1.0 - rate)
    out = Tensor(x.value * mask)
    tape.record("dropout", (x,), (out,), lambda g: (g[0] * mask,))
    return out


# ------------------------------ verification harness ------------------------------
def finite_difference_check(
    f: Callable[[GradTape], Tensor],
    params: Sequence[Tensor],
    eps: float = 1e-5,
) -> float:
    """
    Max relative error between tape gradients and central differences.

    `f` builds the scalar loss on the tape it is handed. The error per entry is
    |analytic - numeric| / max(1e-8, |analytic| + |numeric|).
    """
    if eps <= 0:
        raise ContractError(f"eps must be positive, got {eps}")

    def value_of() -> float:
        return f(GradTape(enabled=False)).item()

    base = value_of()
    if value_of() != base:
        raise ContractError("function under check is not deterministic")

    tape = GradTape()
    loss = f(tape)
    analytic = backward(tape, loss, params)

    worst = 0.0
    for p, grad in zip(params, analytic):
        flat = p.value.reshape(-1)
        gflat = grad.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            up = value_of()
            flat[i] = orig - eps
            down = value_of()
            flat[i] = orig
            numeric = (up - down) / (2.0 * eps)
            err = abs(gflat[i] - numeric) / max(1e-8, abs(gflat[i]) + abs(numeric))
            worst = max(worst, err)
    return worst
