"""Exception hierarchy shared by every module."""


class TernVprError(Exception):
    """Base class for all package errors."""


class DimensionError(TernVprError, ValueError):
    """Shapes do not conform."""


class ParameterError(TernVprError, ValueError):
    """A scalar parameter is out of its legal range."""


class NumericError(TernVprError, ArithmeticError):
    """Non-finite values or a degenerate numeric case."""


class CodecError(TernVprError, ValueError):
    """Invalid ternary code encountered while decoding."""


class ConfigError(TernVprError, ValueError):
    """Invalid configuration."""


class UsageError(TernVprError, RuntimeError):
    """An operation was called in a way its contract forbids."""


class DataError(TernVprError, ValueError):
    """Inconsistent evaluation data (e.g. missing ground truth)."""


class LoadError(TernVprError, OSError):
    """A file on disk is malformed."""


class BadMagicError(LoadError):
    pass


class VersionMismatchError(LoadError):
    pass


class TruncatedError(LoadError):
    pass


class ReservedCodeError(LoadError, CodecError):
    pass
