"""Exception types raised across the package."""


class OrdinalDepthError(Exception):
    """Base class for all package errors."""


# dataio
class MissingFile(OrdinalDepthError, FileNotFoundError):
    pass


class UnsupportedFormat(OrdinalDepthError, ValueError):
    pass


class CorruptHeader(OrdinalDepthError, ValueError):
    pass


class NonPositiveScale(OrdinalDepthError, ValueError):
    pass


class DimensionMismatch(OrdinalDepthError, ValueError):
    pass


class IoFailure(OrdinalDepthError, OSError):
    pass


class DegenerateRange(OrdinalDepthError, ValueError):
    pass


# superpixel / context
class EmptyImage(OrdinalDepthError, ValueError):
    pass


class NoValidDepthWithinRadius(OrdinalDepthError, ValueError):
    pass


class NotCollinear(OrdinalDepthError, ValueError):
    pass


# micronet
class ShapeMismatch(OrdinalDepthError, ValueError):
    pass


class OddSpatialDim(ShapeMismatch):
    pass


class InvalidConfig(OrdinalDepthError, ValueError):
    pass


class NonFiniteLoss(OrdinalDepthError, FloatingPointError):
    pass


class CheckpointMismatch(OrdinalDepthError, ValueError):
    pass


# reconstruct / metrics
class ClassUnderpopulated(OrdinalDepthError, ValueError):
    pass


class NonFiniteInput(OrdinalDepthError, ValueError):
    pass


class LengthMismatch(OrdinalDepthError, ValueError):
    pass


class EmptyPairSet(OrdinalDepthError, ValueError):
    pass


class NonPositiveDepth(OrdinalDepthError, ValueError):
    pass
