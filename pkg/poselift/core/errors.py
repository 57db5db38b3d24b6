# poselift/core/errors.py
"""
Exception hierarchy. The CLI prints `<prefix>: <message>` for any of these.
"""


class PoseLiftError(Exception):
    """Base class for all poselift errors."""
    prefix = "error"


class ConfigError(PoseLiftError):
    """Invalid configuration value or combination."""
    prefix = "config error"


class DatasetFormatError(PoseLiftError):
    """Malformed or inconsistent dataset file."""
    prefix = "dataset error"


class DegeneracyError(PoseLiftError):
    """Geometry that admits no unique answer (collinear anchors, rank-deficient alignment)."""
    prefix = "geometry error"


class ShapeError(PoseLiftError):
    """Tensor shapes that do not fit an operation."""
    prefix = "shape error"


class TapeError(PoseLiftError):
    """Misuse of the differentiation tape."""
    prefix = "autodiff error"


class CheckpointError(PoseLiftError):
    """Unreadable checkpoint or one that does not match the model it is loaded into."""
    prefix = "checkpoint error"


class PoseError(PoseLiftError):
    """Pose or record that breaks a container invariant (shape, finiteness, bone lengths)."""
    prefix = "pose error"
