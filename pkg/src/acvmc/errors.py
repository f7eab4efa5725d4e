"""Exception hierarchy shared by every module of the package."""

from __future__ import annotations


class AcvError(Exception):
    """Base class for all package errors."""


class DegenerateModelError(AcvError, ValueError):
    """A model has zero (or non-finite) variance."""


class InconsistentMomentsError(AcvError, ValueError):
    """Moments violate symmetry, Cauchy-Schwarz or positive semidefiniteness."""


class SingularCovarianceError(AcvError, ArithmeticError):
    """A covariance block that must be positive definite is not."""

    def __init__(self, message: str, block: str | None = None):
        super().__init__(message)
        self.block = block


class LayoutError(AcvError, ValueError):
    """An allocation is not admissible for the requested sampling scheme."""


class InfeasibleBudgetError(AcvError, ValueError):
    """The computational budget cannot pay for the smallest admissible allocation."""


class ConvergenceError(AcvError, RuntimeError):
    """Every optimizer start failed."""

    def __init__(self, message: str, traces: list | None = None):
        super().__init__(message)
        self.traces = traces or []
