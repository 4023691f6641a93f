# backend/networks.py
"""
Representation networks.

  dnn        utterance-level DNN: a locally-connected layer over the stacked
             window, fully-connected ReLU layers, last layer linear.
  frame_dnn  the same topology applied per frame (with context); the d-vector
             is the frame average of the last hidden (linear) layer.
  lstm       single-layer LSTM without projection; only h_T is kept.

Parameters live in one ordered dict of float64 arrays (NetworkParams.arrays),
which is also the checkpoint declaration order. Forward passes work on Tensors
bound to those arrays, so SGD updates and finite-difference checks act on the
same memory.
"""
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Tuple, Union

import numpy as np

from autodiff import GradTape, Tensor, affine_forward, index, mean, relu, reshape, sigmoid
from errors import ConfigurationError, DimensionError
from features import FeatureMatrix
from losses import E2eHead, SoftmaxHead
from settings import NetworkConfig

HEAD_KEYS = ("e2e.w", "e2e.b", "softmax.W", "softmax.b")

Bound = Mapping[str, Tensor]
Batch = Union[np.ndarray, Tensor, FeatureMatrix]


@dataclass
class NetworkParams:
    config: NetworkConfig
    arrays: Dict[str, np.ndarray]
    speaker_ids: List[str] = field(default_factory=list)

    @property
    def rep_dim(self) -> int:
        return representation_dim(self.config)

    def e2e_head(self) -> E2eHead:
        return E2eHead(w=float(self.arrays["e2e.w"]), b=float(self.arrays["e2e.b"]))

    def softmax_head(self) -> Optional[SoftmaxHead]:
        if "softmax.W" not in self.arrays:
            return None
        return SoftmaxHead(self.arrays["softmax.W"], self.arrays["softmax.b"], list(self.speaker_ids))

    def network_keys(self) -> List[str]:
        return [k for k in self.arrays if k not in HEAD_KEYS]

    def copy(self) -> "NetworkParams":
        return NetworkParams(self.config, {k: v.copy() for k, v in self.arrays.items()}, list(self.speaker_ids))


# ------------------------------ geometry ------------------------------
def lc_geometry(config: NetworkConfig) -> Tuple[int, int, int, int]:
    """(grid frames, grid dims, patch frames, patch dims) of the locally-connected layer."""
    if config.network == "frame_dnn":
        span = 2 * config.context_frames + 1
        geo = (span, config.feature_dim, span, config.patch_dims)
    else:
        geo = (config.window_frames, config.feature_dim, config.patch_frames, config.patch_dims)
    gf, gd, p, q = geo
    if gf % p or gd % q:
        raise ConfigurationError(f"{p}x{q} patches do not tile a {gf}x{gd} input grid")
    return geo


def n_patches(config: NetworkConfig) -> int:
    gf, gd, p, q = lc_geometry(config)
    return (gf // p) * (gd // q)


def representation_dim(config: NetworkConfig) -> int:
    return config.lstm_hidden if config.network == "lstm" else config.hidden_width


def _glorot(rng: np.random.Generator, shape: Tuple[int, ...], fan_in: int, fan_out: int) -> np.ndarray:
    s = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-s, s, size=shape)


def init_params(
    config: NetworkConfig,
    rng: np.random.Generator,
    speaker_ids: Optional[List[str]] = None,
    e2e_w: float = 10.0,
    e2e_b: float = -5.0,
) -> NetworkParams:
    arrays: Dict[str, np.ndarray] = {}
    if config.network == "lstm":
        D, H = config.feature_dim, config.lstm_hidden
        arrays["lstm.Wx"] = _glorot(rng, (4 * H, D), D, H)
        arrays["lstm.Wh"] = _glorot(rng, (4 * H, H), H, H)
        b = np.zeros(4 * H)
        b[H:2 * H] = 1.0  # forget gate
        arrays["lstm.b"] = b
    else:
        gf, gd, p, q = lc_geometry(config)
        P, u = n_patches(config), config.lc_units
        arrays["lc.W"] = _glorot(rng, (P, u, p * q), p * q, u)
        arrays["lc.b"] = np.zeros((P, u))
        width = P * u
        for i in range(1, config.hidden_layers):
            arrays[f"fc{i}.W"] = _glorot(rng, (config.hidden_width, width), width, config.hidden_width)
            arrays[f"fc{i}.b"] = np.zeros(config.hidden_width)
            width = config.hidden_width
    arrays["e2e.w"] = np.array(float(e2e_w))
    arrays["e2e.b"] = np.array(float(e2e_b))
    speaker_ids = list(speaker_ids or [])
    if speaker_ids:
        d = representation_dim(config)
        arrays["softmax.W"] = _glorot(rng, (len(speaker_ids), d), d, len(speaker_ids))
        arrays["softmax.b"] = np.zeros(len(speaker_ids))
    return NetworkParams(config, arrays, speaker_ids)


def bind(params: NetworkParams) -> Dict[str, Tensor]:
    return {k: Tensor(v, name=k) for k, v in params.arrays.items()}


def lstm_gates(params: NetworkParams) -> Dict[str, Tuple[np.ndarray, np.ndarray, np.ndarray]]:
    """Per-gate views (input-to-hidden, hidden-to-hidden, bias) of the stacked LSTM weights."""
    H = params.config.lstm_hidden
    out = {}
    for k, gate in enumerate(("input", "forget", "output", "candidate")):
        rows = slice(k * H, (k + 1) * H)
        out[gate] = (params.arrays["lstm.Wx"][rows], params.arrays["lstm.Wh"][rows], params.arrays["lstm.b"][rows])
    return out


def count_parameters(params: NetworkParams) -> int:
    return int(sum(params.arrays[k].size for k in params.network_keys()))


def count_multiply_adds(config: NetworkConfig) -> int:
    """Multiply-adds for one utterance window (matrix products only)."""
    if config.network == "lstm":
        D, H = config.feature_dim, config.lstm_hidden
        return config.window_frames * 4 * H * (D + H)
    gf, gd, p, q = lc_geometry(config)
    width = n_patches(config) * config.lc_units
    macs = width * p * q
    for _ in range(1, config.hidden_layers):
        macs += width * config.hidden_width
        width = config.hidden_width
    return macs * (config.window_frames if config.network == "frame_dnn" else 1)


def parameter_count(config: NetworkConfig) -> int:
    return count_parameters(init_params(config, np.random.default_rng(0)))


def match_parameter_count(reference: NetworkConfig, candidate: NetworkConfig, field: str = "lc_units",
                          limit: int = 1024) -> NetworkConfig:
    """`candidate` with `field` set to the value whose parameter count is closest to `reference`'s."""
    target = parameter_count(reference)
    best, best_gap = candidate, None
    for value in range(1, limit + 1):
        trial = candidate.model_copy(update={field: value})
        gap = parameter_count(trial) - target
        if best_gap is None or abs(gap) < abs(best_gap):
            best, best_gap = trial, gap
        if gap > 0:
            break
    print(f"[networks] {candidate.network} {field}={getattr(best, field)}: "
          f"{target + best_gap} parameters against {target}")
    return best


# ------------------------------ locally connected ------------------------------
def _to_patches(v: np.ndarray, p: int, q: int) -> np.ndarray:
    B, F, D = v.shape
    return v.reshape(B, F // p, p, D // q, q).transpose(0, 1, 3, 2, 4).reshape(B, (F // p) * (D // q), p * q)


def _from_patches(g: np.ndarray, F: int, D: int, p: int, q: int) -> np.ndarray:
    B = g.shape[0]
    return g.reshape(B, F // p, D // q, p, q).transpose(0, 1, 3, 2, 4).reshape(B, F, D)


def locally_connected(tape: GradTape, x: Tensor, W: Tensor, b: Tensor, patch: Tuple[int, int]) -> Tensor:
    """
    Untied patch layer (linear part). x is F x D or B x F x D; the grid is cut
    into non-overlapping p x q patches, patch-row-major, and patch k is mapped
    by its own W[k] (u x pq) and b[k]. Output is the concatenation, P*u wide.
    """
    p, q = patch
    single = x.value.ndim == 2
    v = x.value[None] if single else x.value
    if v.ndim != 3:
        raise DimensionError(f"locally-connected input must be F x D or B x F x D, got {x.shape}")
    B, F, D = v.shape
    if F % p or D % q:
        raise ConfigurationError(f"{p}x{q} patches do not tile a {F}x{D} input grid")
    P = (F // p) * (D // q)
    if W.shape[0] != P or W.shape[2] != p * q or b.shape != W.shape[:2]:
        raise DimensionError(f"locally-connected weights {W.shape}/{b.shape} do not match {P} patches of {p}x{q}")
    patches = _to_patches(v, p, q)
    out = np.matmul(patches.transpose(1, 0, 2), W.value.transpose(0, 2, 1)).transpose(1, 0, 2) + b.value[None]
    flat = out.reshape(B, -1)
    result = Tensor(flat[0] if single else flat)

    def vjp(g):
        gb = g[0].reshape(B, P, -1)
        dW = np.matmul(gb.transpose(1, 2, 0), patches.transpose(1, 0, 2))
        db = gb.sum(axis=0)
        dpatch = np.matmul(gb.transpose(1, 0, 2), W.value).transpose(1, 0, 2)
        dx = _from_patches(dpatch, F, D, p, q)
        return (dx[0] if single else dx), dW, db

    tape.record("locally_connected", (x, W, b), (result,), vjp)
    return result


def locally_connected_forward(tape: GradTape, window: Batch, W: Tensor, b: Tensor, patch: Tuple[int, int]) -> Tensor:
    return relu(tape, locally_connected(tape, _as_tensor(window), W, b, patch))


# ------------------------------ DNN ------------------------------
def _as_tensor(x: Batch) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if isinstance(x, FeatureMatrix):
        return Tensor(x.values)
    return Tensor(x)


def dnn_forward(tape: GradTape, net: Bound, config: NetworkConfig, grid: Tensor) -> Tensor:
    """Locally-connected + ReLU, then FC layers; ReLU on all but the last."""
    gf, gd, p, q = lc_geometry(config)
    h = locally_connected_forward(tape, grid, net["lc.W"], net["lc.b"], (p, q))
    last = config.hidden_layers - 1
    for i in range(1, config.hidden_layers):
        h = affine_forward(tape, h, net[f"fc{i}.W"], net[f"fc{i}.b"])
        if i < last:
            h = relu(tape, h)
    return h


def _check_window(x: Tensor, config: NetworkConfig) -> None:
    expected = (config.window_frames, config.feature_dim)
    if x.shape[-2:] != expected:
        raise DimensionError(f"window {x.shape[-2:]} does not match configured input {expected}")


def dnn_utterance_rep(tape: GradTape, net: Bound, config: NetworkConfig, windows: Batch) -> Tensor:
    x = _as_tensor(windows)
    _check_window(x, config)
    return dnn_forward(tape, net, config, x)


def context_windows(values: np.ndarray, context: int) -> np.ndarray:
    """(.., T, D) -> (.., T, 2c+1, D) with edge frames replicated."""
    T = values.shape[-2]
    idx = np.clip(np.arange(T)[:, None] + np.arange(-context, context + 1)[None, :], 0, T - 1)
    return values[..., idx, :]


def frame_outputs(tape: GradTape, net: Bound, config: NetworkConfig, utterances: np.ndarray) -> Tensor:
    """Per-frame last-hidden activations, (B*T, d) for a (B, T, D) batch."""
    v = np.asarray(utterances, dtype=np.float64)
    if v.ndim == 2:
        v = v[None]
    if v.shape[-1] != config.feature_dim:
        raise DimensionError(f"frames of dim {v.shape[-1]} do not match feature_dim {config.feature_dim}")
    ctx = context_windows(v, config.context_frames)
    B, T = v.shape[:2]
    return dnn_forward(tape, net, config, Tensor(ctx.reshape(B * T, ctx.shape[-2], ctx.shape[-1])))


def dvector_frame_rep(tape: GradTape, net: Bound, config: NetworkConfig, fbank: Batch) -> Tensor:
    """Average of the per-frame last-hidden activations; (d,) for one utterance, (B, d) for a batch."""
    v = fbank.values if isinstance(fbank, FeatureMatrix) else (fbank.value if isinstance(fbank, Tensor) else np.asarray(fbank))
    single = v.ndim == 2
    batch = v[None] if single else v
    B, T = batch.shape[:2]
    y = frame_outputs(tape, net, config, batch)
    rep = mean(tape, reshape(tape, y, (B, T, y.shape[-1])), axis=1)
    return reshape(tape, rep, (rep.shape[-1],)) if single else rep


# ------------------------------ LSTM ------------------------------
def lstm_step(
    tape: GradTape, x_t: Tensor, h_prev: Tensor, c_prev: Tensor, Wx: Tensor, Wh: Tensor, b: Tensor
) -> Tuple[Tensor, Tensor]:
    """One cell step, gates stacked as [input, forget, output, candidate]."""
    H = Wh.shape[1]
    if Wx.shape[0] != 4 * H or Wh.shape != (4 * H, H) or b.shape != (4 * H,) or x_t.shape[-1] != Wx.shape[1] \
            or h_prev.shape[-1] != H or c_prev.shape != h_prev.shape:
        raise DimensionError(f"lstm step: x{x_t.shape} h{h_prev.shape} c{c_prev.shape} Wx{Wx.shape} Wh{Wh.shape} b{b.shape}")
    x, hp, cp = x_t.value, h_prev.value, c_prev.value
    z = x @ Wx.value.T + hp @ Wh.value.T + b.value
    i = sigmoid(z[..., :H])
    f = sigmoid(z[..., H:2 * H])
    o = sigmoid(z[..., 2 * H:3 * H])
    g = np.tanh(z[..., 3 * H:])
    c = f * cp + i * g
    tc = np.tanh(c)
    h_t, c_t = Tensor(o * tc), Tensor(c)

    def vjp(grads):
        dh, dc_out = grads
        dc = dc_out + dh * o * (1.0 - tc * tc)
        dz = np.concatenate([
            dc * g * i * (1.0 - i),
            dc * cp * f * (1.0 - f),
            dh * tc * o * (1.0 - o),
            dc * i * (1.0 - g * g),
        ], axis=-1)
        if x.ndim == 1:
            dWx, dWh, db = np.outer(dz, x), np.outer(dz, hp), dz
        else:
            dWx, dWh, db = dz.T @ x, dz.T @ hp, dz.sum(axis=0)
        return dz @ Wx.value, dz @ Wh.value, dc * f, dWx, dWh, db

    tape.record("lstm_step", (x_t, h_prev, c_prev, Wx, Wh, b), (h_t, c_t), vjp)
    return h_t, c_t


def lstm_utterance_rep(tape: GradTape, net: Bound, config: NetworkConfig, frames: Batch) -> Tensor:
    """Run frames 1..T from a zero state and return h_T only."""
    x = _as_tensor(frames)
    if x.shape[-1] != config.feature_dim:
        raise DimensionError(f"frames of dim {x.shape[-1]} do not match feature_dim {config.feature_dim}")
    lead = x.shape[:-2]
    h = Tensor(np.zeros(lead + (config.lstm_hidden,)))
    c = Tensor(np.zeros(lead + (config.lstm_hidden,)))
    for t in range(x.shape[-2]):
        x_t = index(tape, x, (Ellipsis, t, slice(None)))
        h, c = lstm_step(tape, x_t, h, c, net["lstm.Wx"], net["lstm.Wh"], net["lstm.b"])
    return h


# ------------------------------ dispatch ------------------------------
def represent(tape: GradTape, net: Bound, config: NetworkConfig, windows: Batch) -> Tensor:
    """f(X) for a window (T x D) or a batch of windows (B x T x D)."""
    if config.network == "dnn":
        return dnn_utterance_rep(tape, net, config, windows)
    if config.network == "frame_dnn":
        return dvector_frame_rep(tape, net, config, windows)
    return lstm_utterance_rep(tape, net, config, windows)


def embed(params: NetworkParams, windows: np.ndarray, chunk: int = 256) -> np.ndarray:
    """Frozen-network representations for a (B, T, D) stack, evaluated without a tape."""
    windows = np.asarray(windows, dtype=np.float64)
    if windows.ndim == 2:
        windows = windows[None]
    net = bind(params)
    parts = []
    for start in range(0, windows.shape[0], chunk):
        parts.append(represent(GradTape(enabled=False), net, params.config, windows[start:start + chunk]).value)
    return np.concatenate(parts, axis=0) if parts else np.zeros((0, params.rep_dim))
