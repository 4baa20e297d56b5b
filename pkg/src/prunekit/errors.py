"""Exception types raised across the package."""


class PrunekitError(Exception):
    """Base class for all package errors."""


class ShapeError(PrunekitError, ValueError):
    """Tensor or layer extents are inconsistent."""


class GraphError(PrunekitError, ValueError):
    """A model graph violates a structural invariant."""


class ManifestError(PrunekitError):
    """Model manifest is missing, malformed or of an unsupported version."""


class BlobShapeMismatchError(PrunekitError):
    """A weight blob's declared size disagrees with the manifest shapes."""


class TruncatedBlobError(PrunekitError):
    """A weight blob on disk is shorter or longer than recorded."""


class PlanError(PrunekitError, ValueError):
    """A prune plan or ratio map does not fit the model."""


class ZeroChannelError(PlanError):
    """A plan or ratio would remove every channel of a layer."""


class NonPrunableLayerError(PlanError):
    """A plan tries to remove filters from a layer marked non-prunable."""


class CalibrationError(PrunekitError):
    """Calibration inputs could not be produced."""
