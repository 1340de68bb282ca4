"""Exception types shared across the package."""


class MaleniaError(Exception):
    """Base class for all package-specific errors."""


class OverlapError(MaleniaError):
    """Two lesion geometries intersect."""


class BoundsError(MaleniaError):
    """A lesion extends outside the volume."""


class FormatError(MaleniaError):
    """A serialized file is corrupt, truncated, or has the wrong magic/version."""


class ConfigError(MaleniaError):
    """Invalid configuration (overlapping class sets, unknown keys, ...)."""


class SchemaError(MaleniaError):
    """Attribute schema violates its structural invariants."""


class ProviderError(MaleniaError):
    """The text-embedding provider failed for a description string."""


class UnknownValueError(MaleniaError):
    """An attribute value is not present in the schema / embedding index."""


class ShapeError(MaleniaError):
    """Tensor shape contract violated."""


class SizeError(MaleniaError):
    """More ground-truth segments than available tokens."""


class NumericalError(MaleniaError):
    """A numeric computation produced a non-finite value."""


class EmptyMaskError(MaleniaError):
    """A mask required to be nonempty is all-zero."""


class DivergenceError(MaleniaError):
    """Training loss became non-finite."""


class HashMismatchError(MaleniaError):
    """Stored embedding bank does not match the checkpoint's schema hash."""
