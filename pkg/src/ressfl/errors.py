"""Exception hierarchy shared across the package."""


class RessflError(Exception):
    """Base class for all errors raised by ressfl."""


class ShapeError(RessflError, ValueError):
    pass


class NonFiniteError(RessflError, FloatingPointError):
    """A NaN or Inf showed up in a tensor, loss or gradient."""


class BackwardError(RessflError, RuntimeError):
    pass


class ConfigError(RessflError, ValueError):
    pass


class PrivacyViolation(RessflError, RuntimeError):
    """Raised when a client is asked to touch data outside its own shard."""


class StaleAttackError(RessflError, ValueError):
    """Inversion model and activations come from different epochs."""


class DataFormatError(RessflError, ValueError):
    pass


class BadMagicError(DataFormatError):
    pass


class TruncatedFileError(DataFormatError):
    pass


class CountMismatchError(DataFormatError):
    pass


class VersionMismatchError(DataFormatError):
    pass


class ChecksumError(DataFormatError):
    pass
