"""Typed errors raised across surfacefill.

Each concrete error also derives from the closest builtin so callers may catch
either the domain type or the builtin one.
"""


class SurfaceFillError(Exception):
    """Base class for every error raised by this project."""


class DegenerateInputError(SurfaceFillError, ValueError):
    """Input that has no meaningful geometric answer (zero vectors, empty seed sets)."""


class ConfigError(SurfaceFillError, ValueError):
    """Invalid pipeline configuration, config file or scene file."""


class CalibrationError(SurfaceFillError, ValueError):
    """Missing or malformed calibration data."""


class SensorSpecError(SurfaceFillError, ValueError):
    """Sensor resolution description inconsistent with the point set."""


class DepthFormatError(SurfaceFillError, OSError):
    """Depth PNG with the wrong layout, or a depth map that cannot be encoded."""


class LidarFormatError(SurfaceFillError, OSError):
    """Malformed LiDAR binary."""


class FrameSetError(SurfaceFillError, ValueError):
    """Frame directories that do not pair up by file stem."""
