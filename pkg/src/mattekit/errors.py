"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operands have incompatible extents."""


class ConfigError(ValueError):
    """A parameter value is outside its documented domain."""


class ContractError(RuntimeError):
    """An API precondition was violated (e.g. backward on a non-scalar)."""


class ResourceError(RuntimeError):
    """An operation would exceed a configured resource cap."""


class SelectionError(ValueError):
    """Mask selection was asked to choose from an empty candidate set."""


class OverlapError(ValueError):
    """Instance alphas sum above 1 somewhere in a multi-instance composite."""


class CheckpointError(RuntimeError):
    """A checkpoint file is corrupt, truncated, or version-mismatched."""


class MetricRegionError(ValueError):
    """An evaluation region is empty for the given ground truth."""
