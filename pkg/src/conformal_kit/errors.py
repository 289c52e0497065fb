"""
Exception hierarchy shared across conformal_kit modules.

Configuration and domain problems subclass ValueError so callers that only
know the builtin still catch them; numerical failures subclass RuntimeError.
"""

from typing import Optional

import numpy as np


class ConformalKitError(Exception):
    """Base class for every error raised by conformal_kit."""


class ConfigurationError(ConformalKitError, ValueError):
    """A parameter, option, or config payload is invalid."""


class DomainError(ConformalKitError, ValueError):
    """Input data violates a structural requirement."""


class DegenerateNeighborhoodError(DomainError):
    """Every kernel weight around a query point is zero."""


class NumericalError(ConformalKitError, RuntimeError):
    """A numerical routine failed to produce a usable answer."""


class ConvergenceError(NumericalError):
    """Iterative solver stopped before meeting its tolerance."""

    def __init__(self, message: str, best: Optional[np.ndarray] = None, objective: float = float("nan")):
        super().__init__(message)
        self.best = best
        self.objective = objective

    def __reduce__(self):
        return type(self), (self.args[0], self.best, self.objective)


class SelectionError(ConformalKitError, RuntimeError):
    """No candidate in a pool produced a usable selection loss."""


class UnsupportedError(ConformalKitError, NotImplementedError):
    """Operation is not defined for the given score or weight kind."""


class ExperimentError(ConformalKitError, RuntimeError):
    """A Monte-Carlo repetition failed."""

    def __init__(self, message: str, repetition: int):
        super().__init__(f"repetition {repetition}: {message}")
        self.message = message
        self.repetition = repetition

    def __reduce__(self):
        return type(self), (self.message, self.repetition)
