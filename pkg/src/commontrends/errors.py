"""Exception hierarchy shared by every module."""


class CommonTrendsError(Exception):
    """Base class for all errors raised by the package."""


class DataError(CommonTrendsError, ValueError):
    """Input data is malformed, non-finite, too short or otherwise unusable."""


class ContractError(CommonTrendsError, ValueError):
    """A caller violated a documented precondition (shapes, bounds, flags)."""


class NumericalError(CommonTrendsError, ArithmeticError):
    """A numerical recursion failed to produce a usable result."""


class DegeneracyError(NumericalError):
    """A variance or singular value collapsed where it must stay positive.

    ``step`` is the zero-based time index where the failure happened, when
    that is meaningful.
    """

    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


class ConfigError(CommonTrendsError, ValueError):
    """A run configuration failed validation."""
