"""Exception hierarchy shared across the package."""


class StikError(Exception):
    """Base class for all package-specific errors."""


class InvalidArgumentError(StikError, ValueError):
    """An argument violates a documented precondition."""


class SingularSystemError(StikError):
    """A linear system that must be solvable is singular (e.g. lambda = 0
    with a rank-deficient forward operator)."""


class NumericalBreakdownError(StikError):
    """A factorization or solve failed in a way that signals corrupted
    state rather than bad user input."""


class RejectedIncrementError(StikError):
    """A proposed regularization increment would drive the cumulative
    parameter non-positive; the caller must re-choose it."""


class MaxIterationsError(StikError):
    """An iterative solve hit its iteration cap. Carries the best iterate
    found so far in ``best``."""

    def __init__(self, message, best=None, iterations=None):
        super().__init__(message)
        self.best = best
        self.iterations = iterations


class SelectionFailedError(StikError):
    """Every candidate point of a parameter search failed to evaluate."""


class UndefinedObjectiveError(StikError):
    """The selection objective is undefined at the requested point
    (e.g. a vanishing denominator)."""
