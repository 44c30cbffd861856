"""Exception types shared across the package."""


class OrthoLoraError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(OrthoLoraError, ValueError):
    """Operands have incompatible shapes; the message names both."""


class ParameterError(OrthoLoraError, ValueError):
    """A scalar argument or structural precondition is out of range."""


class NumericError(OrthoLoraError, ArithmeticError):
    """A computation produced or would produce non-finite / degenerate values."""


class ConfigError(ParameterError):
    """A config file or other user-supplied input failed validation; the
    message names the field or path."""
