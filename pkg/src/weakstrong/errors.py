"""Exception types shared across the package."""


class WeakStrongError(Exception):
    """Base class for all package errors."""


class DimensionError(WeakStrongError, ValueError):
    """Operand shapes are incompatible."""


class ParameterError(WeakStrongError, ValueError):
    """A scalar argument is outside its admissible range."""


class ConfigError(WeakStrongError, ValueError):
    """A configuration object or file is invalid.

    ``field`` names the offending key when known, so CLI diagnostics can point
    at it directly.
    """

    def __init__(self, message: str, field: str | None = None):
        super().__init__(message if field is None else f"{field}: {message}")
        self.field = field


class StratificationError(ConfigError):
    """A cross-validation fold ended up with a single class."""


class NumericError(WeakStrongError, ArithmeticError):
    """A NaN or infinite value appeared where a finite one is required."""


class UndefinedMetricError(WeakStrongError, ValueError):
    """A metric is undefined on the given input (e.g. AUC with one class)."""
