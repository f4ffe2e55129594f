"""
Router error kinds.
Every failure the routing core can report maps to one of these classes.
"""

from typing import Optional


class RouterError(Exception):
    """Base class for routing errors."""


class InvalidInputError(RouterError, ValueError):
    """Input violates a documented precondition."""


class DegenerateTrainingError(RouterError):
    """Training data cannot produce a decision boundary."""


class NotReadyError(RouterError):
    """Component used before initialization completed."""


class ProviderError(RouterError):
    """Embedding provider failed."""


class NoFeasibleArmError(RouterError):
    """No model is available to serve the query."""


class StageError(RouterError):
    """Failure inside one stage of the context pipeline."""

    def __init__(self, stage: str, error: Exception, step: Optional[int] = None):
        self.stage = stage
        self.error = error
        self.step = step
        where = f" at step {step}" if step is not None else ""
        super().__init__(f"{stage} failed{where}: {error}")
