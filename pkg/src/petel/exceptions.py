"""Exception types raised across the package."""


class PetelError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(PetelError, ValueError):
    """Parameter or data shapes do not agree."""


class NonFiniteLoss(PetelError, ArithmeticError):
    """A loss evaluation produced a non-finite value."""


class DataError(PetelError, ValueError):
    """Input data is missing, malformed or incompatible with a model."""


class DualUnbounded(PetelError):
    """The ETEL dual has no minimizer: zero is outside the convex hull of the moments."""


class SingularHessian(PetelError, ArithmeticError):
    """The dual Hessian stayed singular after jitter."""


class NoAlphaFound(PetelError):
    """Penalty tuning exhausted its increments without matching the ERM."""


class InitOffSupport(PetelError, ValueError):
    """The chain initial state lies outside the prior support."""


class NonFiniteDensityAtInit(PetelError, ArithmeticError):
    """The log-density at the chain initial state is not finite."""


class TooFewDraws(PetelError, ValueError):
    """Not enough retained draws for a posterior summary."""


class NonConvergence(PetelError, RuntimeError):
    """An iterative optimizer stopped before meeting its tolerance."""


class ExcessiveFailures(PetelError, RuntimeError):
    """Too many replicates of a coverage run failed."""

    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report
