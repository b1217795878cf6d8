"""Exception hierarchy shared by all vtn modules."""


class VTNError(Exception):
    """Base class for every error raised by this package."""


class ShapeError(VTNError, ValueError):
    pass


class NumericError(VTNError, ArithmeticError):
    pass


class DomainError(VTNError, ValueError):
    pass


class BoundsError(VTNError, IndexError):
    pass


class ConfigError(VTNError, ValueError):
    pass


class StateError(VTNError, RuntimeError):
    pass


class LoadError(VTNError):
    """A persisted file could not be decoded."""


class BadMagicError(LoadError):
    pass


class UnsupportedVersionError(LoadError):
    pass


class TruncatedFileError(LoadError):
    pass


class ChecksumError(LoadError):
    pass


class IntegrityError(LoadError):
    """Header and payload disagree (element counts, trailing bytes, dims)."""
