"""Exception hierarchy shared by every module."""


class AltmError(Exception):
    """Base class for all errors raised by the package."""


class ShapeError(AltmError, ValueError):
    pass


class ParameterError(AltmError, ValueError):
    pass


class LabelError(AltmError, ValueError):
    pass


class NumericalError(AltmError, ArithmeticError):
    pass


class UsageError(AltmError, RuntimeError):
    pass


class ModeError(AltmError, RuntimeError):
    pass


class UnknownHeadError(AltmError, KeyError):
    pass


class ConflictError(AltmError, KeyError):
    pass


class ConfigError(AltmError, ValueError):
    """Invalid experiment configuration. ``key`` names the offending entry."""

    def __init__(self, message, key=None):
        super().__init__(message)
        self.key = key
