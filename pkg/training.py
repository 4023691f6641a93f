# backend/training.py
"""
End-to-end and softmax training.

End-to-end training keeps a FIFO pool of utterances that is fed by small
same-speaker groups and refreshed every few steps. Each trial pairs a test
utterance with up to N enrollment utterances; missing enrollment slots carry
use_weight 0 and contribute nothing to the speaker model, the loss or any
gradient.
"""
from collections import OrderedDict, deque
from dataclasses import dataclass, replace
from typing import Deque, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

import manifests
from autodiff import GradTape, Tensor, affine_forward, backward, dropout, mean, take_rows
from errors import ContractError, DegenerateInputError, DivergenceError, EmptyInputError, SamplingError
from evaluation import EvalSet, evaluate_set
from features import FeatureMatrix, extract_last_window
from losses import Target, cosine_rows, e2e_trial_losses, sample_candidates, softmax_xent
from networks import NetworkParams, bind, frame_outputs, init_params, represent
from settings import NetworkConfig, TrainConfig


@dataclass(frozen=True)
class Utterance:
    utterance_id: str
    speaker_id: str
    features: FeatureMatrix
    use_weight: int = 1

    def __post_init__(self) -> None:
        if self.use_weight not in (0, 1):
            raise ContractError(f"use_weight must be 0 or 1, got {self.use_weight}")


def load_dataset(manifest_path) -> List[Utterance]:
    df = manifests.read_manifest(manifest_path)
    if df.empty:
        raise EmptyInputError(f"manifest {manifest_path} lists no utterances")
    feats = manifests.load_feature_map(df)
    return [Utterance(r.utterance_id, r.speaker_id, feats[r.utterance_id]) for r in df.itertuples(index=False)]


@dataclass
class TrainingTrial:
    test: Utterance
    enrollment: List[Utterance]
    target: Target

    def __post_init__(self) -> None:
        used = [u for u in self.enrollment if u.use_weight]
        if not used:
            raise ContractError("a trial needs at least one enrollment utterance with use_weight 1")
        same = {u.speaker_id for u in used} == {self.test.speaker_id}
        if self.target is Target.ACCEPT and not same:
            raise ContractError("accept trial with enrollment from another speaker")
        if self.target is Target.REJECT and any(u.speaker_id == self.test.speaker_id for u in used):
            raise ContractError("reject trial with enrollment from the test speaker")


@dataclass
class TrainResult:
    params: NetworkParams
    log: pd.DataFrame


# ------------------------------ utterance pool ------------------------------
class SpeakerGroupStream:
    """Endless stream of same-speaker groups; reshuffled at every epoch boundary."""

    def __init__(self, dataset: Sequence[Utterance], group_size: int) -> None:
        if not dataset:
            raise ContractError("empty training set")
        self._by_speaker: Dict[str, List[Utterance]] = OrderedDict()
        for u in dataset:
            self._by_speaker.setdefault(u.speaker_id, []).append(u)
        self.group_size = group_size
        self.epoch = 0
        self._queue: Deque[List[Utterance]] = deque()

    @property
    def n_speakers(self) -> int:
        return len(self._by_speaker)

    def _new_epoch(self, rng: np.random.Generator) -> None:
        groups: List[List[Utterance]] = []
        for utts in self._by_speaker.values():
            order = rng.permutation(len(utts))
            shuffled = [utts[i] for i in order]
            groups.extend(shuffled[i:i + self.group_size] for i in range(0, len(shuffled), self.group_size))
        self._queue = deque(groups[i] for i in rng.permutation(len(groups)))
        self.epoch += 1
        if self.epoch > 1:
            print(f"[training] utterance stream wrapped, starting epoch {self.epoch}")

    def next_group(self, rng: np.random.Generator) -> List[Utterance]:
        if not self._queue:
            self._new_epoch(rng)
        return self._queue.popleft()


class UtterancePool:
    """FIFO buffer of speaker groups holding at most `capacity` utterances."""

    def __init__(self, capacity: int) -> None:
        if capacity < 1:
            raise ContractError(f"pool capacity must be >= 1, got {capacity}")
        self.capacity = capacity
        self.groups: Deque[Tuple[str, List[Utterance]]] = deque()
        self.size = 0
        self.refresh_count = 0
        self._index: Optional[Dict[str, List[Utterance]]] = None

    def insert(self, group: List[Utterance]) -> None:
        if not group:
            return
        self.groups.append((group[0].speaker_id, list(group[:self.capacity])))
        self.size += min(len(group), self.capacity)
        while self.size > self.capacity:
            speaker, utts = self.groups[0]
            drop = min(len(utts), self.size - self.capacity)
            del utts[:drop]
            self.size -= drop
            if not utts:
                self.groups.popleft()
        self._index = None

    def by_speaker(self) -> Dict[str, List[Utterance]]:
        if self._index is None:
            # an utterance can sit in two groups across an epoch wrap; keep it once
            index: Dict[str, List[Utterance]] = OrderedDict()
            seen = set()
            for speaker, utts in self.groups:
                bucket = index.setdefault(speaker, [])
                for u in utts:
                    if u.utterance_id not in seen:
                        seen.add(u.utterance_id)
                        bucket.append(u)
            self._index = index
        return self._index

    def utterances(self) -> List[Utterance]:
        return [u for _, utts in self.groups for u in utts]

    def state(self) -> List[Tuple[str, Tuple[str, ...]]]:
        return [(spk, tuple(u.utterance_id for u in utts)) for spk, utts in self.groups]


def pool_refresh(pool: UtterancePool, stream: SpeakerGroupStream, rng: np.random.Generator) -> UtterancePool:
    pool.insert(stream.next_group(rng))
    pool.refresh_count += 1
    return pool


def fill_pool(pool: UtterancePool, stream: SpeakerGroupStream, rng: np.random.Generator) -> UtterancePool:
    """Refresh until the pool is full or the stream has gone round once."""
    start = max(stream.epoch, 1)
    while pool.size < pool.capacity:
        pool_refresh(pool, stream, rng)
        if stream.epoch > start:
            break
    return pool


# ------------------------------ trials ------------------------------
def sample_trial(pool: UtterancePool, N: int, target_ratio: float, rng: np.random.Generator) -> TrainingTrial:
    if N < 1:
        raise ContractError(f"speaker model size must be >= 1, got {N}")
    groups = pool.by_speaker()
    speakers = list(groups)
    if len(speakers) < 2 and target_ratio < 1.0:
        raise SamplingError("reject trials need at least two speakers in the pool")

    if rng.random() < target_ratio:
        eligible = [s for s in speakers if len(groups[s]) >= 2]
        if not eligible:
            raise SamplingError("no speaker in the pool has two utterances for an accept trial")
        sizes = np.array([len(groups[s]) for s in eligible])
        pick = int(rng.integers(sizes.sum()))
        k = int(np.searchsorted(np.cumsum(sizes), pick, side="right"))
        utts = groups[eligible[k]]
        test_pos = pick - int(sizes[:k].sum())
        test = utts[test_pos]
        others = [u for i, u in enumerate(utts) if i != test_pos]
        target = Target.ACCEPT
    else:
        pooled = pool.utterances()
        test = pooled[int(rng.integers(len(pooled)))]
        impostors = [s for s in speakers if s != test.speaker_id]
        others = groups[impostors[int(rng.integers(len(impostors)))]]
        target = Target.REJECT

    chosen = [others[i] for i in rng.choice(len(others), size=min(N, len(others)), replace=False)]
    enrollment = [replace(u, use_weight=1) for u in chosen]
    enrollment += [replace(chosen[0], use_weight=0)] * (N - len(chosen))
    return TrainingTrial(test=test, enrollment=enrollment, target=target)


# ------------------------------ speaker model ------------------------------
def training_speaker_model(reps: Sequence[Sequence[float]], weights: Sequence[int]) -> np.ndarray:
    reps = np.asarray(reps, dtype=np.float64)
    w = np.asarray(weights, dtype=np.float64)
    if w.sum() < 1:
        raise DegenerateInputError("speaker model needs at least one utterance with weight 1")
    return (w[:, None] * reps).sum(axis=0) / w.sum()


def weighted_average(tape: GradTape, R: Tensor, idx: np.ndarray, weights: np.ndarray) -> Tensor:
    """m_b = sum_n w[b,n] R[idx[b,n]] / sum_n w[b,n] for every trial b."""
    idx = np.asarray(idx, dtype=np.int64)
    w = np.asarray(weights, dtype=np.float64)
    tot = w.sum(axis=1)
    if np.any(tot < 1):
        raise DegenerateInputError("speaker model needs at least one utterance with weight 1")
    acc = np.zeros((idx.shape[0], R.shape[-1]))
    for n in range(idx.shape[1]):
        # left-to-right accumulation: weight-0 slots add exact zeros
        acc = acc + w[:, n, None] * R.value[idx[:, n]]
    out = Tensor(acc / tot[:, None])

    def vjp(g):
        coef = w / tot[:, None]
        dR = np.zeros_like(R.value)
        np.add.at(dR, idx.reshape(-1), (coef[:, :, None] * g[0][:, None, :]).reshape(-1, R.shape[-1]))
        return (dR,)

    tape.record("weighted_average", (R,), (out,), vjp)
    return out


def window_cache(dataset: Sequence[Utterance], window_frames: int) -> Dict[str, np.ndarray]:
    return {u.utterance_id: extract_last_window(u.features, window_frames).values for u in dataset}


def trial_batch_loss(
    tape: GradTape,
    net: Dict[str, Tensor],
    config: NetworkConfig,
    trials: Sequence[TrainingTrial],
    windows: Dict[str, np.ndarray],
) -> Tuple[Tensor, Tensor]:
    """Mean end-to-end loss over trials, plus the per-trial losses."""
    slots: Dict[str, int] = OrderedDict()
    for t in trials:
        for u in [t.test] + [e for e in t.enrollment if e.use_weight]:
            slots.setdefault(u.utterance_id, len(slots))
    R = represent(tape, net, config, np.stack([windows[k] for k in slots]))

    N = max(len(t.enrollment) for t in trials)
    idx = np.zeros((len(trials), N), dtype=np.int64)
    w = np.zeros((len(trials), N))
    for b, t in enumerate(trials):
        for n, e in enumerate(t.enrollment):
            if e.use_weight:
                idx[b, n] = slots[e.utterance_id]
                w[b, n] = 1.0

    test = take_rows(tape, R, np.array([slots[t.test.utterance_id] for t in trials]))
    model = weighted_average(tape, R, idx, w)
    scores = cosine_rows(tape, test, model)
    accept = np.array([t.target is Target.ACCEPT for t in trials])
    per_trial = e2e_trial_losses(tape, scores, net["e2e.w"], net["e2e.b"], accept)
    return mean(tape, per_trial), per_trial


# ------------------------------ optimisation ------------------------------
class MomentumSGD:
    def __init__(self, learning_rate: float, momentum: float) -> None:
        self.learning_rate = learning_rate
        self.momentum = momentum
        self.velocity: Dict[str, np.ndarray] = {}

    def step(self, arrays: Dict[str, np.ndarray], grads: Dict[str, np.ndarray]) -> None:
        for key, g in grads.items():
            v = self.velocity.get(key)
            v = -self.learning_rate * g if v is None else self.momentum * v - self.learning_rate * g
            self.velocity[key] = v
            arrays[key] += v


def clip_gradients(grads: Dict[str, np.ndarray], max_norm: float) -> float:
    """Rescale `grads` in place so their global L2 norm is at most `max_norm`; returns the norm before."""
    norm = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / norm
        for key in grads:
            grads[key] = grads[key] * scale
    return norm


def _rngs(seed: int):
    return (np.random.default_rng([seed, 1]), np.random.default_rng([seed, 2]), np.random.default_rng([seed, 3]))


def _check_step(step: int, loss: float, grads: Dict[str, np.ndarray], last_good: Optional[int]) -> None:
    if not np.isfinite(loss) or not all(np.all(np.isfinite(g)) for g in grads.values()):
        raise DivergenceError(step, last_good, loss)


def _log_progress(kind: str, step: int, steps: int, loss: float, every: int) -> None:
    if step % every == 0 or step == steps:
        print(f"[training] {kind} step {step}/{steps} loss {loss:.5f}")


def train_end_to_end(config: TrainConfig, dataset: Sequence[Utterance], init: Optional[NetworkParams] = None) -> TrainResult:
    stream = SpeakerGroupStream(dataset, config.group_size)
    if stream.n_speakers < 2:
        raise ContractError("end-to-end training needs at least two speakers")
    init_rng, sample_rng, _ = _rngs(config.seed)
    if init is not None:
        params = init.copy()
        if params.config != config.network:
            print(f"[training] WARN: init checkpoint architecture overrides configured network ({params.config.network})")
    else:
        params = init_params(config.network, init_rng, e2e_w=config.e2e_init_w, e2e_b=config.e2e_init_b)
    windows = window_cache(dataset, params.config.window_frames)
    keys = [k for k in params.arrays if not k.startswith("softmax.")]
    opt = MomentumSGD(config.learning_rate, config.momentum)

    pool = fill_pool(UtterancePool(config.pool_capacity), stream, sample_rng)
    print(f"[training] e2e: {stream.n_speakers} speakers, pool {pool.size}/{pool.capacity}, "
          f"N={config.speaker_model_size}, batch {config.batch_size}, {config.steps} steps")

    rows = []
    last_good: Optional[int] = None
    for step in range(1, config.steps + 1):
        if step > 1 and (step - 1) % config.pool_refresh_steps == 0:
            pool_refresh(pool, stream, sample_rng)
        trials = [sample_trial(pool, config.speaker_model_size, config.target_ratio, sample_rng)
                  for _ in range(config.batch_size)]
        net = bind(params)
        tape = GradTape()
        loss, _ = trial_batch_loss(tape, net, params.config, trials, windows)
        grads = dict(zip(keys, backward(tape, loss, [net[k] for k in keys])))
        _check_step(step, loss.item(), grads, last_good)
        clip_gradients(grads, config.clip_norm)
        opt.step(params.arrays, grads)
        last_good = step
        rows.append((step, loss.item()))
        _log_progress("e2e", step, config.steps, loss.item(), config.log_every)

    return TrainResult(params, pd.DataFrame(rows, columns=["step", "loss"]))


def train_softmax(config: TrainConfig, dataset: Sequence[Utterance], init: Optional[NetworkParams] = None) -> TrainResult:
    """Per-utterance (or per-frame for frame_dnn) softmax training over dense speaker ids."""
    if not dataset:
        raise ContractError("empty training set")
    speaker_ids = sorted({u.speaker_id for u in dataset})
    label_of = {s: i for i, s in enumerate(speaker_ids)}
    init_rng, sample_rng, drop_rng = _rngs(config.seed)
    if init is not None and init.speaker_ids == speaker_ids:
        params = init.copy()
    else:
        params = init_params(config.network if init is None else init.config, init_rng, speaker_ids,
                             e2e_w=config.e2e_init_w, e2e_b=config.e2e_init_b)
        if init is not None:
            params.arrays.update({k: v.copy() for k, v in init.arrays.items() if not k.startswith("softmax.")})
    cfg = params.config
    windows = window_cache(dataset, cfg.window_frames)
    keys = [k for k in params.arrays if k not in ("e2e.w", "e2e.b")]
    opt = MomentumSGD(config.learning_rate, config.momentum)
    K = len(speaker_ids)
    sampled = 0 < config.candidate_count < K
    print(f"[training] softmax: {K} speakers, network {cfg.network}, dropout {config.dropout}, "
          f"{'candidates ' + str(config.candidate_count) if sampled else 'full softmax'}")

    rows = []
    last_good: Optional[int] = None
    for step in range(1, config.steps + 1):
        batch = [dataset[int(i)] for i in sample_rng.integers(len(dataset), size=config.batch_size)]
        labels = np.array([label_of[u.speaker_id] for u in batch])
        X = np.stack([windows[u.utterance_id] for u in batch])
        net = bind(params)
        tape = GradTape()
        if cfg.network == "frame_dnn":
            y = frame_outputs(tape, net, cfg, X)
            labels = np.repeat(labels, X.shape[1])
        else:
            y = represent(tape, net, cfg, X)
        y = dropout(tape, y, config.dropout, drop_rng)
        W, b = net["softmax.W"], net["softmax.b"]
        if sampled:
            cand = sample_candidates(K, labels, config.candidate_count, sample_rng)
            W, b = take_rows(tape, W, cand), take_rows(tape, b, cand)
            labels = np.searchsorted(cand, labels)
        loss = mean(tape, softmax_xent(tape, affine_forward(tape, y, W, b), labels))
        grads = dict(zip(keys, backward(tape, loss, [net[k] for k in keys])))
        _check_step(step, loss.item(), grads, last_good)
        clip_gradients(grads, config.clip_norm)
        opt.step(params.arrays, grads)
        last_good = step
        rows.append((step, loss.item()))
        _log_progress("softmax", step, config.steps, loss.item(), config.log_every)

    return TrainResult(params, pd.DataFrame(rows, columns=["step", "loss"]))


def train(config: TrainConfig, dataset: Sequence[Utterance], init: Optional[NetworkParams] = None) -> TrainResult:
    if config.loss == "softmax":
        return train_softmax(config, dataset, init)
    return train_end_to_end(config, dataset, init)


def sweep_model_size(config: TrainConfig, dataset: Sequence[Utterance], eval_set: EvalSet, sizes: Sequence[int],
                     max_enroll: int = 9, repeats: int = 1) -> pd.DataFrame:
    """
    End-to-end models per speaker model size, scored on held-out speakers.

    Each size is trained `repeats` times with seeds seed, seed+1, ...; the
    same seeds are used for every size and `eer_raw` is their mean.
    """
    if not sizes:
        raise ContractError("model-size sweep needs at least one size")
    if repeats < 1:
        raise ContractError(f"repeats must be at least 1, got {repeats}")
    rows = []
    for size in sorted(set(int(s) for s in sizes)):
        eers = []
        for r in range(repeats):
            print(f"[training] sweep: speaker model size {size}, seed {config.seed + r}")
            cfg = config.model_copy(update={"speaker_model_size": size, "loss": "e2e", "seed": config.seed + r})
            result = train_end_to_end(cfg, dataset)
            eers.append(evaluate_set(result.params, eval_set, tnorm=False, max_enroll=max_enroll).eer_raw)
        rows.append((size, float(np.mean(eers)), float(np.std(eers))))
    return pd.DataFrame(rows, columns=["size", "eer_raw", "eer_std"])
