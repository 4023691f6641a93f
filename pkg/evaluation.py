# backend/evaluation.py
"""
Trial-list evaluation: EER, DET operating points and t-norm.

Operating points are taken at every distinct score plus one threshold above
the maximum. FRR(t) counts targets scoring below t, FAR(t) counts nontargets
scoring at or above t.
"""
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Literal, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from pydantic import BaseModel, field_validator

import manifests
from errors import ContractError, DegenerateCohortError, DegenerateInputError
from features import FeatureMatrix
from losses import cosine_similarity
from networks import NetworkParams, embed
from scoring import SpeakerModel, enroll, prepare_window

TARGET = "target"
NONTARGET = "nontarget"


class ScoreRecord(BaseModel):
    trial_id: str
    raw: float
    tnorm: Optional[float] = None
    label: Literal["target", "nontarget"]

    @field_validator("raw", "tnorm")
    @classmethod
    def _finite(cls, v: Optional[float]) -> Optional[float]:
        if v is not None and not np.isfinite(v):
            raise ValueError(f"score must be finite, got {v}")
        return v


@dataclass
class Cohort:
    models: List[SpeakerModel]

    def __post_init__(self) -> None:
        if len(self.models) < 2:
            raise DegenerateCohortError(f"a t-norm cohort needs at least 2 models, got {len(self.models)}")

    def matrix(self) -> np.ndarray:
        return np.stack([m.vector for m in self.models])


# ------------------------------ EER / DET ------------------------------
def _split(records: Sequence[ScoreRecord], normalized: bool) -> Tuple[np.ndarray, np.ndarray]:
    if normalized and any(r.tnorm is None for r in records):
        raise ContractError("t-norm EER requested but some records carry no normalized score")
    scores = np.array([r.tnorm if normalized else r.raw for r in records], dtype=np.float64)
    labels = np.array([r.label == TARGET for r in records])
    return scores[labels], scores[~labels]


def _operating_points(tar: np.ndarray, non: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(thresholds, far, frr); the last threshold is +inf with far 0 and frr 1."""
    if tar.size == 0 or non.size == 0:
        raise ContractError(f"EER needs both classes, got {tar.size} target and {non.size} nontarget scores")
    tar, non = np.sort(tar), np.sort(non)
    thr = np.append(np.unique(np.concatenate([tar, non])), np.inf)
    frr = np.searchsorted(tar, thr, side="left") / tar.size
    far = (non.size - np.searchsorted(non, thr, side="left")) / non.size
    return thr, far, frr


def eer_from_scores(tar: Sequence[float], non: Sequence[float]) -> Tuple[float, float]:
    thr, far, frr = _operating_points(np.asarray(tar, dtype=np.float64), np.asarray(non, dtype=np.float64))
    d = frr - far
    j = int(np.argmax(d >= 0))    # d[0] = -1 and d[-1] = 1, so 0 < j
    if d[j] == 0:
        return float(frr[j]), float(thr[j]) if np.isfinite(thr[j]) else float(thr[j - 1])
    alpha = -d[j - 1] / (d[j] - d[j - 1])
    eer = frr[j - 1] + alpha * (frr[j] - frr[j - 1])
    threshold = thr[j - 1] if not np.isfinite(thr[j]) else thr[j - 1] + alpha * (thr[j] - thr[j - 1])
    return float(eer), float(threshold)


def compute_eer(records: Sequence[ScoreRecord], normalized: bool = False) -> Tuple[float, float]:
    """(eer, threshold) with linear interpolation between adjacent operating points."""
    return eer_from_scores(*_split(records, normalized))


def det_points(records: Sequence[ScoreRecord], normalized: bool = False) -> List[Tuple[float, float]]:
    _, far, frr = _operating_points(*_split(records, normalized))
    return [(float(a), float(r)) for a, r in zip(far, frr)]


# ------------------------------ t-norm ------------------------------
def t_norm_from_scores(raw: float, cohort_scores: Sequence[float]) -> float:
    c = np.asarray(cohort_scores, dtype=np.float64)
    if c.size < 2:
        raise DegenerateCohortError(f"a t-norm cohort needs at least 2 scores, got {c.size}")
    sigma = c.std()
    if sigma == 0:
        raise DegenerateCohortError("cohort scores have zero spread")
    return float((raw - c.mean()) / sigma)


def t_norm(raw: float, test_rep: np.ndarray, cohort: Cohort) -> float:
    return t_norm_from_scores(raw, [cosine_similarity(test_rep, m.vector) for m in cohort.models])


def _unit_rows(a: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(a, axis=1, keepdims=True)
    if np.any(n == 0):
        raise DegenerateInputError("cosine similarity of a zero-norm representation")
    return a / n


# ------------------------------ trial lists ------------------------------
@dataclass
class EvalSet:
    """Held-out utterances, their enrollment split, the trial list and the t-norm cohort."""
    features: Dict[str, FeatureMatrix]
    enrollment: Dict[str, List[str]]
    trials: pd.DataFrame
    cohort: Dict[str, List[str]] = field(default_factory=dict)   # impostor speaker -> utterance ids


@dataclass
class EvaluationReport:
    records: List[ScoreRecord]
    eer_raw: float
    eer_tnorm: Optional[float]
    threshold: float
    e2e_threshold: float
    skipped: List[str] = field(default_factory=list)

    @property
    def n_trials(self) -> int:
        return len(self.records)

    def scores_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            [(r.trial_id, r.raw, r.tnorm, r.label) for r in self.records],
            columns=manifests.SCORE_COLUMNS,
        )

    def summary(self) -> Dict[str, object]:
        return {
            "eer_raw": self.eer_raw,
            "eer_tnorm": self.eer_tnorm,
            "threshold": self.threshold,
            "n_trials": self.n_trials,
            "n_skipped": len(self.skipped),
            "e2e_threshold": self.e2e_threshold,
        }

    def write(self, out_dir: Path, det_out: Optional[Path] = None) -> Dict[str, Path]:
        out_dir = Path(out_dir)
        paths = {
            "scores": manifests.write_scores(self.scores_frame(), out_dir / "scores.tsv"),
            "summary": manifests.write_summary(self.summary(), out_dir / "summary.txt"),
        }
        if det_out is not None:
            det = pd.DataFrame(det_points(self.records), columns=["far", "frr"])
            paths["det"] = manifests.write_table(det, det_out)
        return paths


def evaluate(
    params: NetworkParams,
    enrollments: Dict[str, SpeakerModel],
    trials: pd.DataFrame,
    features: Dict[str, FeatureMatrix],
    tnorm: bool = False,
    cohort: Optional[Cohort] = None,
) -> EvaluationReport:
    """
    Score every trial against its claimed speaker's model.

    Trials naming an unknown speaker or test utterance are skipped and listed
    in the report. t-norm needs a cohort of impostor models whose speakers are
    disjoint from the enrolled ones.
    """
    if trials.empty:
        raise ContractError("empty trial list")
    if tnorm:
        if cohort is None:
            raise ContractError("t-norm needs an impostor cohort (held-out speakers outside the evaluation set)")
        shared = sorted({m.speaker_id for m in cohort.models} & set(enrollments))
        if shared:
            raise ContractError(f"cohort speaker {shared[0]!r} is also an evaluated speaker")

    skipped: List[str] = []
    usable = []
    for t in trials.itertuples(index=False):
        if t.claimed_speaker not in enrollments or t.test_id not in features:
            missing = t.claimed_speaker if t.claimed_speaker not in enrollments else t.test_id
            print(f"[evaluation] WARN: skipping trial {t.trial_id}: unknown {missing!r}")
            skipped.append(str(t.trial_id))
        else:
            usable.append(t)
    if not usable:
        raise ContractError(f"none of the {len(trials)} trials could be scored")

    test_ids = list(dict.fromkeys(t.test_id for t in usable))
    row_of = {u: i for i, u in enumerate(test_ids)}
    reps = embed(params, np.stack([prepare_window(params.config, features[u]) for u in test_ids]))
    unit_reps = _unit_rows(reps)

    speaker_ids = sorted(enrollments)
    col_of = {s: i for i, s in enumerate(speaker_ids)}
    model_scores = unit_reps @ _unit_rows(np.stack([enrollments[s].vector for s in speaker_ids])).T
    cohort_scores = unit_reps @ _unit_rows(cohort.matrix()).T if tnorm else None

    records: List[ScoreRecord] = []
    for t in usable:
        r = row_of[t.test_id]
        raw = float(model_scores[r, col_of[t.claimed_speaker]])
        norm = t_norm_from_scores(raw, cohort_scores[r]) if tnorm else None
        records.append(ScoreRecord(trial_id=str(t.trial_id), raw=raw, tnorm=norm, label=t.label))

    eer_raw, threshold = compute_eer(records)
    eer_tnorm = compute_eer(records, normalized=True)[0] if tnorm else None
    print(f"[evaluation] {len(records)} trials, EER raw {eer_raw:.4f}"
          + (f", t-norm {eer_tnorm:.4f} over {len(cohort.models)} cohort models" if eer_tnorm is not None else "")
          + (f", {len(skipped)} skipped" if skipped else ""))
    return EvaluationReport(records, eer_raw, eer_tnorm, threshold, params.e2e_head().threshold(), skipped)


def enroll_all(
    params: NetworkParams,
    features: Dict[str, FeatureMatrix],
    enrollment: Dict[str, List[str]],
    max_enroll: Optional[int] = 9,
) -> Dict[str, SpeakerModel]:
    return {
        spk: enroll(params, [features[u] for u in utt_ids], speaker_id=spk, max_utterances=max_enroll)
        for spk, utt_ids in sorted(enrollment.items())
    }


def enroll_cohort(
    params: NetworkParams,
    features: Dict[str, FeatureMatrix],
    cohort: Dict[str, List[str]],
    cohort_size: int = 20,
    max_enroll: Optional[int] = 9,
) -> Cohort:
    """Impostor models for the first `cohort_size` cohort speakers, by id."""
    if not cohort:
        raise ContractError("t-norm needs an impostor cohort but none was given")
    chosen = dict(sorted(cohort.items())[:cohort_size])
    return Cohort(list(enroll_all(params, features, chosen, max_enroll).values()))


def evaluate_set(
    params: NetworkParams,
    eval_set: EvalSet,
    tnorm: bool = False,
    max_enroll: Optional[int] = 9,
    cohort_size: int = 20,
) -> EvaluationReport:
    models = enroll_all(params, eval_set.features, eval_set.enrollment, max_enroll)
    cohort = enroll_cohort(params, eval_set.features, eval_set.cohort, cohort_size, max_enroll) if tnorm else None
    return evaluate(params, models, eval_set.trials, eval_set.features, tnorm=tnorm, cohort=cohort)


class TrialEvaluator:
    """Loads an evaluation set from disk on first use; scores checkpoints against it."""

    def __init__(self, enroll_manifest: Path, test_manifest: Path, trials_path: Path,
                 cohort_manifest: Optional[Path] = None) -> None:
        self.enroll_manifest = Path(enroll_manifest)
        self.test_manifest = Path(test_manifest)
        self.trials_path = Path(trials_path)
        self.cohort_manifest = Path(cohort_manifest) if cohort_manifest is not None else None
        self._eval_set: Optional[EvalSet] = None

    def _load(self) -> EvalSet:
        if self._eval_set is None:
            enroll_df = manifests.read_manifest(self.enroll_manifest)
            test_df = manifests.read_manifest(self.test_manifest)
            frames = [enroll_df, test_df]
            cohort: Dict[str, List[str]] = {}
            if self.cohort_manifest is not None:
                cohort_df = manifests.read_manifest(self.cohort_manifest)
                frames.append(cohort_df)
                cohort = _by_speaker(cohort_df)
            feats = manifests.load_feature_map(pd.concat(frames, ignore_index=True))
            self._eval_set = EvalSet(feats, _by_speaker(enroll_df), manifests.read_trials(self.trials_path), cohort)
        return self._eval_set

    def eval_set(self) -> EvalSet:
        return self._load()

    def run(self, params: NetworkParams, tnorm: bool = False, max_enroll: Optional[int] = 9, cohort_size: int = 20) -> dict:
        report = evaluate_set(params, self._load(), tnorm=tnorm, max_enroll=max_enroll, cohort_size=cohort_size)
        return {"report": report, "summary": report.summary()}


def _by_speaker(df: pd.DataFrame) -> Dict[str, List[str]]:
    return {s: g["utterance_id"].tolist() for s, g in df.groupby("speaker_id", sort=True)}
