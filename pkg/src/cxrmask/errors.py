"""Exception types shared across the package.

The CLI maps these onto its exit-code contract (2 config, 3 I/O, 4 numeric).
"""


class CxrMaskError(Exception):
    """Base class for all package errors."""


class InvalidArgumentError(CxrMaskError, ValueError):
    pass


class ShapeError(CxrMaskError, ValueError):
    pass


class NumericError(CxrMaskError, ArithmeticError):
    """A loss term evaluated to NaN or Inf."""

    def __init__(self, message, term=None):
        super().__init__(message)
        self.term = term


class UndefinedMetricError(CxrMaskError, ValueError):
    """A metric is mathematically undefined for the given inputs."""


class DataIOError(CxrMaskError, OSError):
    pass


class ConfigError(CxrMaskError, ValueError):
    pass
