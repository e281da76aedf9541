"""Exception types shared across the package."""


class KVSegError(Exception):
    """Base class for all package errors."""


class DimensionError(KVSegError, ValueError):
    """Tensor shapes are incompatible with the requested operation."""


class ConfigurationError(KVSegError, ValueError):
    """A model, attention or schedule configuration is invalid.

    ``line`` is set when the error originates from a config file.
    """

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class FormatError(KVSegError, ValueError):
    """Malformed input data (RLE strings, manifests, serialized tensors)."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class ScheduleError(KVSegError, ValueError):
    """Learning-rate schedule queried outside its domain."""


class NumericError(KVSegError, ArithmeticError):
    """NaN/Inf encountered, or a gradient check failed."""

    def __init__(self, message: str, path: str | None = None):
        self.path = path
        if path is not None:
            message = f"{message} [{path}]"
        super().__init__(message)
