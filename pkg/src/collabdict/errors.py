"""Exception hierarchy shared across the package."""

from __future__ import annotations


class CollabDictError(Exception):
    """Base class for every error raised by this package."""


class ConsensusError(CollabDictError):
    """Consensus iteration failed to reach the requested tolerance."""

    def __init__(self, message: str, residual: float = float("nan"), iterations: int = 0):
        super().__init__(f"{message} (residual={residual:.3e}, iterations={iterations})")
        self.residual = residual
        self.iterations = iterations


class ModelCollapseError(CollabDictError):
    """Every mixture component was pruned."""


class ConditioningError(CollabDictError):
    """A covariance-like matrix is not positive semidefinite within tolerance."""


class ConvergenceError(CollabDictError):
    """An inner iterative solver ran out of sweeps."""


class TrainingFault(CollabDictError):
    """Non-finite objective, gradient or parameter during training."""

    def __init__(self, message: str, history: list | None = None):
        super().__init__(message)
        self.history = list(history or [])


class StageError(CollabDictError):
    """Wraps a failure inside an experiment with the stage it happened in."""

    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"[{stage}] {type(cause).__name__}: {cause}")
        self.stage = stage
        self.cause = cause
