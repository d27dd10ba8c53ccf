"""Exception hierarchy shared by every facekit module."""


class FacekitError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(FacekitError):
    """Tensor or parameter dimensions do not line up; message names the offending dimension."""


class FormatError(FacekitError):
    """A file (annotations, weights, model assets, config) violates its format contract."""


class PoseError(FacekitError):
    """Pose recovery cannot proceed (degenerate geometry, points behind camera, ...)."""


class MetricError(FacekitError):
    """An evaluation quantity is undefined for the given inputs (zero normalizer, no visible points)."""
