"""Exception types shared across the package."""


class DragsplatError(Exception):
    """Base class for all package errors."""


class SceneFormatError(DragsplatError):
    """Malformed scene file (bad header, wrong magic, truncated payload)."""


class SceneDataError(DragsplatError):
    """Scene payload parsed but contains invalid values (non-finite, etc.)."""


class BehindCameraError(DragsplatError):
    """A point projected with non-positive depth; caller decides whether to skip."""


class EmptyMaskError(DragsplatError):
    """Mask selection resolved to zero primitives; user must reselect."""


class ConfigurationError(DragsplatError):
    """Inconsistent module configuration (dimension mismatch, missing target view)."""


class GuidanceUnavailableError(DragsplatError):
    """Guidance transport failed (timeout, malformed response, shape mismatch).

    An edit run that hits this pauses and stays resumable.
    """


class StateError(DragsplatError):
    """Operation invoked in an invalid lifecycle state."""
