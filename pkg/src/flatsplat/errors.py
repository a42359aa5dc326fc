"""Exception types shared across the package."""


class FlatsplatError(Exception):
    """Base class for all package errors."""


class DomainError(FlatsplatError, ValueError):
    """An argument is outside the mathematical domain of an operation."""


class BehindCameraError(DomainError):
    """A point with non-positive camera-space depth was passed to a projection."""


class DegeneratePlaneError(DomainError):
    """Plane-to-origin distance too close to zero for a stable homography."""


class PointAtInfinityError(DomainError):
    """Homogeneous warp produced a vanishing third component."""


class ContractViolationError(FlatsplatError):
    """Inputs violate a documented interface contract (shape/provenance mismatch)."""


class ConfigurationError(FlatsplatError):
    """Invalid configuration (bad option values, too few cameras, ...)."""


class SceneLoadError(FlatsplatError):
    """A dataset, checkpoint, or mesh file failed validation on load."""


class TrainingDivergedError(FlatsplatError):
    """Optimization produced a non-finite loss."""
