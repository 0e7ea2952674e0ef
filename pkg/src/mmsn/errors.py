"""Exception hierarchy shared by every module."""


class MMSNError(Exception):
    """Base class for all package errors."""


class ContractError(MMSNError, ValueError):
    """A caller violated a precondition (shapes, incidence, call order)."""


class NumericError(MMSNError, ArithmeticError):
    """A computation produced NaN or Inf."""

    def __init__(self, message, epoch=None):
        super().__init__(message)
        self.epoch = epoch


class ConfigError(MMSNError, ValueError):
    """Invalid configuration value."""


class ParseError(MMSNError, ValueError):
    """Malformed input file."""


class ValidationError(MMSNError, ValueError):
    """Well-formed input that breaks a data invariant.

    ``field`` names the offending field, e.g. ``"edge.endpoint"``.
    """

    def __init__(self, field, message=""):
        super().__init__(f"{field}: {message}" if message else field)
        self.field = field
