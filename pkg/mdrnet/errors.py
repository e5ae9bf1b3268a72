"""
Exceptions raised by mdrnet.

Each one derives from the builtin that already describes the failure so callers catching
ValueError / IndexError keep working.
"""


class MdrnetError(Exception):
    """Base class, lets the CLI tell expected failures from bugs"""


class GeometryError(MdrnetError, ValueError):
    """Invalid grid geometry (non-positive voxel size or extent, inconsistent ranges)"""


class BoundsError(MdrnetError, IndexError):
    """Coordinate outside the grid extents"""


class ShapeError(MdrnetError, ValueError):
    """Channel, kernel or extent mismatch"""


class FormatError(MdrnetError, ValueError):
    """Malformed file on disk"""


class ConfigError(MdrnetError, ValueError):
    """Inconsistent configuration"""


class TapeError(MdrnetError, RuntimeError):
    """GradTape misuse, e.g. backward on a consumed tape"""


class TrainingError(MdrnetError, RuntimeError):
    """Non-finite loss or gradient during training"""


class OracleMismatchError(MdrnetError, AssertionError):
    """A kernel disagrees with its brute-force oracle or finite differences"""
