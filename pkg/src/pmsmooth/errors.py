"""Exception hierarchy shared by every module of the package."""


class SmcError(Exception):
    """Base class for all package errors."""


class ConfigError(SmcError, ValueError):
    """Invalid configuration or model specification."""


class NumericalError(SmcError, ArithmeticError):
    """Base class for failures of a numerical procedure."""


class AllZeroWeights(NumericalError):
    pass


class NonFiniteWeight(NumericalError):
    pass


class ZeroNormalizer(NumericalError):
    pass


class ZeroLikelihood(NumericalError):
    pass


class NonFiniteGradient(NumericalError):
    pass


class WaldBudgetExceeded(NumericalError):
    """Wald positivization needed more rounds than allowed."""


class RejectionBudgetExceeded(NumericalError):
    """A rejection sampler hit its proposal cap."""


class InvalidBound(NumericalError):
    """An accept-reject bound was violated by an estimator draw."""


class BadTimes(ConfigError):
    pass


class DegenerateDiffusion(NumericalError):
    pass


class SingularCovariance(NumericalError):
    pass


class DomainError(NumericalError):
    pass


class PositivityViolation(NumericalError):
    pass


class DimensionMismatch(ConfigError):
    pass
