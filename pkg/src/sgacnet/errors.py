"""Exception hierarchy shared by every module of the package."""


class SGACNetError(Exception):
    """Base class for all package errors."""


class DimensionError(SGACNetError, ValueError):
    """Operand shapes are inconsistent.

    ``axis`` names the offending axis when one can be singled out.
    """

    def __init__(self, message, axis=None):
        super().__init__(message)
        self.axis = axis


class InvalidSpecError(SGACNetError, ValueError):
    """An operation was configured with impossible hyperparameters."""


class StateError(SGACNetError, RuntimeError):
    """An object was used in a state that forbids the requested action."""


class EvaluationError(SGACNetError, ArithmeticError):
    """A function evaluated to a non-finite value."""


class ConfigError(SGACNetError, ValueError):
    """A model or run configuration is invalid.

    ``field`` carries the offending key, ``line`` the 1-based line number in
    a config file when the error comes from parsing.
    """

    def __init__(self, message, field=None, line=None):
        super().__init__(message if line is None else f"line {line}: {message}")
        self.message = message
        self.field = field
        self.line = line


class DataError(SGACNetError, ValueError):
    """Input data (labels, predictions) violates its contract."""


class ImageFormatError(SGACNetError, ValueError):
    """A netpbm file could not be parsed; ``offset`` is the byte position."""

    def __init__(self, message, offset=None):
        super().__init__(message if offset is None else f"{message} (byte offset {offset})")
        self.offset = offset
