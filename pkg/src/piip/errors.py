"""Exception hierarchy shared by every piip module."""


class PiipError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(PiipError, ValueError):
    """Tensor shapes do not agree with an operation's contract."""


class ConfigError(PiipError, ValueError):
    """An architectural or file configuration violates a stated rule."""


class NumericError(PiipError, ArithmeticError):
    """A NaN or Inf appeared where finite values are required."""


class ContractError(PiipError, RuntimeError):
    """An API was called outside its documented preconditions."""


class SchedulingError(ConfigError):
    """An interaction unit was requested for a pair the scheme does not allow."""


class InputError(PiipError, ValueError):
    """Model input does not match the configured resolution."""


class IntegrityError(PiipError, IOError):
    """A checkpoint failed magic, version, length or CRC validation."""


class VersionError(IntegrityError):
    """A checkpoint was written with a format version this build cannot read."""
