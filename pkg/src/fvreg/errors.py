"""Exception types shared across the package."""


class FvregError(Exception):
    """Base class for all package-specific errors."""


class GimbalLockError(FvregError):
    """Euler extraction is ill-conditioned (|cos(ay)| below threshold)."""


class TooSmallError(FvregError):
    """Image is smaller than the requested crop window."""


class OutOfBoundsError(FvregError):
    """A sampling region or trajectory leaves the volume."""


class BadMagicError(FvregError):
    """File does not start with the expected magic string."""


class DimensionMismatchError(FvregError):
    """Array shapes or payload sizes do not agree."""


class ShapeMismatchError(DimensionMismatchError):
    """Tensor shapes are incompatible with the layer or operation."""


class ZeroVarianceError(FvregError):
    """A statistic that needs nonzero variance got a constant input."""


class EmptyBatchError(FvregError):
    """Batch-reducing operation received an empty batch."""


class NonFiniteError(FvregError):
    """A computation produced NaN or infinity."""
