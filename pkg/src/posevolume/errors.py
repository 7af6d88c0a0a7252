"""Exception types raised across the toolkit."""


class PoseVolumeError(Exception):
    """Base class for all toolkit errors."""


# geometry
class NonPositiveDepth(PoseVolumeError):
    """Point or requested depth is at or behind the camera plane."""


class DegenerateRays(PoseVolumeError):
    """Back-projected rays are too close to parallel to intersect."""


# volume
class InvalidRange(PoseVolumeError):
    """Requested grid exceeds the configured cell-count cap."""


# field
class KeypointOutsideGrid(PoseVolumeError):
    """Transformed keypoint falls outside the grid bounds."""


class NonFiniteInput(PoseVolumeError):
    """Input array contains NaN or infinity."""


class SpecMismatch(PoseVolumeError):
    """Two grids do not share the same layout."""


class CountMismatch(PoseVolumeError):
    """Paired point lists have different lengths."""


# solver
class DegenerateConfiguration(PoseVolumeError):
    """Point set is collinear (or coincident); alignment is underdetermined."""


class TooFewPoints(PoseVolumeError):
    """Fewer than three correspondences available."""


# synth
class TooFewModelPoints(PoseVolumeError):
    """Model does not carry enough points for the requested keypoint count."""


class Unplaceable(PoseVolumeError):
    """No in-frustum object placement found within the attempt budget."""


# pipeline
class EmptyMask(PoseVolumeError):
    """Segmentation mask has no positive pixels."""


# cli
class IoError(PoseVolumeError):
    """Filesystem problem; message names the offending path."""


class ConfigParseError(PoseVolumeError):
    """Malformed run configuration; message names the field or line."""


class SchemaMismatch(PoseVolumeError):
    """Scene file does not match the expected manifest/dump schema."""
