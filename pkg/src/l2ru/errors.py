"""Exception types raised across the package."""


class L2ruError(Exception):
    """Base class for all package errors."""


class DimensionError(L2ruError, ValueError):
    """Array shapes are inconsistent with the operation."""


class SymmetryError(L2ruError, ValueError):
    """A matrix expected to be symmetric is not, beyond tolerance."""


class NotPositiveDefinite(L2ruError, ValueError):
    """Cholesky factorization met a non-positive pivot."""


class Singular(L2ruError, ValueError):
    """A linear solve met a numerically zero pivot."""


class ConvergenceError(L2ruError, RuntimeError):
    """An iterative method ran out of iterations.

    The last iterate is kept on ``last`` for inspection.
    """

    def __init__(self, message, last=None):
        super().__init__(message)
        self.last = last


class StructureError(L2ruError, ValueError):
    """A matrix does not have the block structure an algorithm requires."""


class Unstable(L2ruError, ValueError):
    """The state matrix is not Schur, so no finite gain exists."""


class DegenerateParameters(L2ruError, ValueError):
    """Free parameters fall in the measure-zero set where a map is undefined."""


class ConstructionError(L2ruError, RuntimeError):
    """A parametrization could not produce a certified system."""


class NaNLossError(L2ruError, FloatingPointError):
    """Training produced a non-finite loss.

    ``snapshot`` carries the parameters and epoch at the time of failure.
    """

    def __init__(self, message, snapshot=None):
        super().__init__(message)
        self.snapshot = snapshot
