"""Exception types shared across the package."""


class SCFCError(Exception):
    """Base class for every error raised by this package."""


class ShapeError(SCFCError, ValueError):
    def __init__(self, message, layer_index=None):
        super().__init__(message)
        self.layer_index = layer_index


class NonFiniteGradientError(SCFCError, FloatingPointError):
    def __init__(self, message, layer_index=None):
        super().__init__(message)
        self.layer_index = layer_index


class BackwardWithoutForwardError(SCFCError, RuntimeError):
    pass


class IdxFormatError(SCFCError, ValueError):
    pass


class IdxMagicError(IdxFormatError):
    pass


class IdxTruncatedError(IdxFormatError):
    pass


class IdxCountMismatchError(IdxFormatError):
    pass


class DatasetLayoutError(SCFCError, FileNotFoundError):
    pass


class ImageFormatError(SCFCError, ValueError):
    pass


class UnknownImageError(SCFCError, KeyError):
    pass


class UnlabeledImageError(SCFCError, KeyError):
    """Raised when a support image is queried before any E-step labeled it."""


class EmptySetError(SCFCError, ValueError):
    pass
