"""Exception types shared across the package."""


class StageSeqError(Exception):
    """Base class for all package-specific errors."""


class DimensionError(StageSeqError, ValueError):
    """Tensor shapes do not conform to an operation's contract."""


class DataError(StageSeqError, ValueError):
    """A dataset, manifest or split violates a precondition."""


class StateError(StageSeqError, RuntimeError):
    """Cached forward-pass state is missing or inconsistent."""


class NumericError(StageSeqError, ArithmeticError):
    """A computation produced a non-finite value where one is not allowed."""


class TrainingError(StageSeqError, RuntimeError):
    """Training diverged; carries the epoch and step where it happened."""

    def __init__(self, message: str, epoch: int, step: int):
        super().__init__(message)
        self.epoch = epoch
        self.step = step
