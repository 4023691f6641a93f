# backend/scoring.py
import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from errors import ContractError, DegenerateInputError, DegenerateModelError
from features import FeatureMatrix, extract_last_window
from losses import E2eHead, Target, cosine_similarity
from networks import NetworkParams, embed
from settings import NetworkConfig


@dataclass(frozen=True)
class SpeakerModel:
    """Raw (unnormalized) average of enrollment representations."""
    speaker_id: str
    vector: np.ndarray
    count: int

    def __post_init__(self) -> None:
        if self.count < 1:
            raise DegenerateModelError(f"speaker model {self.speaker_id!r} built from {self.count} utterances")
        if not np.linalg.norm(self.vector) > 0:
            raise DegenerateModelError(f"speaker model {self.speaker_id!r} has zero norm")


@dataclass(frozen=True)
class Decision:
    score: float
    threshold: float
    outcome: Target


def prepare_window(config: NetworkConfig, features: FeatureMatrix) -> np.ndarray:
    """Every network sees the same fixed window of the last frames."""
    if features.dims != config.feature_dim:
        raise DegenerateInputError(f"features have {features.dims} dims, network expects {config.feature_dim}")
    return extract_last_window(features, config.window_frames).values


def represent_utterance(params: NetworkParams, features: FeatureMatrix) -> np.ndarray:
    return embed(params, prepare_window(params.config, features))[0]


def enroll(
    params: NetworkParams,
    utterances: Sequence[FeatureMatrix],
    speaker_id: str = "",
    max_utterances: Optional[int] = 9,
) -> SpeakerModel:
    if not utterances:
        raise ContractError(f"no enrollment utterances for speaker {speaker_id!r}")
    if max_utterances is not None and len(utterances) > max_utterances:
        raise ContractError(
            f"{len(utterances)} enrollment utterances for {speaker_id!r}; at most {max_utterances} allowed"
        )
    reps = np.stack([represent_utterance(params, u) for u in utterances])
    # exactly rounded sums keep the model independent of utterance order
    vector = np.array([math.fsum(col) for col in reps.T]) / len(utterances)
    return SpeakerModel(speaker_id=speaker_id, vector=vector, count=len(utterances))


def decide(score: float, head: E2eHead, threshold: Optional[float] = None) -> Decision:
    """Explicit thresholds accept at score >= threshold; the head's -b/w accepts on the side where w points."""
    if threshold is not None:
        outcome = Target.ACCEPT if score >= threshold else Target.REJECT
        return Decision(score, float(threshold), outcome)
    thr = head.threshold()
    accept = score <= thr if head.w < 0 else score >= thr
    return Decision(score, thr, Target.ACCEPT if accept else Target.REJECT)


def verify_representation(rep: np.ndarray, model: SpeakerModel, head: E2eHead, threshold: Optional[float] = None) -> Decision:
    return decide(cosine_similarity(rep, model.vector), head, threshold)


def verify(
    params: NetworkParams,
    model: SpeakerModel,
    test: FeatureMatrix,
    threshold: Optional[float] = None,
) -> Decision:
    return verify_representation(represent_utterance(params, test), model, params.e2e_head(), threshold)
