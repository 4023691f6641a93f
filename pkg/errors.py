# backend/errors.py
from typing import Optional


class VerificationError(RuntimeError):
    """Base class for every error the toolkit raises on purpose."""
    exit_code = 1


class DimensionError(VerificationError, ValueError):
    pass


class ContractError(VerificationError, ValueError):
    pass


class DegenerateInputError(VerificationError, ValueError):
    pass


class DegenerateCohortError(DegenerateInputError):
    pass


class DegenerateModelError(DegenerateInputError):
    pass


class ConfigurationError(VerificationError, ValueError):
    pass


class EmptyInputError(VerificationError, ValueError):
    pass


class SamplingError(VerificationError):
    pass


class FormatError(VerificationError):
    """Bad magic bytes, truncated payload or malformed table."""


class DivergenceError(VerificationError):
    exit_code = 3

    def __init__(self, step: int, last_good_step: Optional[int], loss: float) -> None:
        self.step = step
        self.last_good_step = last_good_step
        self.loss = loss
        super().__init__(
            f"training diverged at step {step} (loss={loss}); last good step: "
            f"{'none' if last_good_step is None else last_good_step}"
        )
