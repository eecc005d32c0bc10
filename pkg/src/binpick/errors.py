"""Exception hierarchy shared by all binpick modules."""


class BinpickError(Exception):
    """Base class for all errors raised by this package."""


class ValidationError(BinpickError):
    """An input violates a documented precondition or invariant."""


class DimensionMismatch(ValidationError):
    """Two rasters/masks/tensors that must agree in shape do not."""


class NotARotation(ValidationError):
    """A 3x3 matrix is not orthonormal with determinant +1."""


class TooFewPoints(ValidationError):
    """A cloud has fewer points than the operation requires."""


class EmptyCloud(ValidationError):
    """A non-empty point cloud was required."""


class EmptySegment(ValidationError):
    """Pose initialization was asked to work on an empty segment."""


class EmptyBackground(ValidationError):
    """Background subtraction needs a non-empty background model."""


class NoViews(ValidationError):
    """At least one view is required."""


class EmptySpec(ValidationError):
    """A scene spec with no content cannot be rendered."""


class TooFewDepthPixels(ValidationError):
    """The 3D labeling pipeline needs a minimum number of valid depth pixels."""


class SceneMismatch(ValidationError):
    """Prediction and ground-truth scene ids do not line up."""


class NotRendered(ValidationError):
    """Statistics were requested from a scene that has not been rendered."""


class UnsupportedFormat(ValidationError):
    """A file is syntactically recognizable but in an unsupported variant."""


class MissingFile(BinpickError):
    """A referenced input file does not exist."""


class DegenerateCorrespondences(BinpickError):
    """ICP kept fewer than 3 pairs, or the kept pairs are rank-deficient."""


class AllCarved(BinpickError):
    """Voxel carving removed every voxel; no hull can be built."""
