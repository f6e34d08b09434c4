"""Depth of empty pixels from the nearest seed and its surface normal.

An empty pixel is assumed to lie on the same plane as its nearest seed, so its
depth is the seed depth plus a residual that follows from intersecting the
pixel ray with the seed's tangent plane.
"""

from dataclasses import dataclass
from typing import Tuple

import numpy as np
import structlog
from scipy import ndimage

from depth_completion.distance_transform import NearestField
from depth_completion.geometry import CameraIntrinsics
from toolkit.errors import ConfigError, DegenerateInputError

logger = structlog.get_logger(__name__)


@dataclass(frozen=True, eq=False)
class DenseDepthMap:
    """Fully populated (H, W) depth grid in meters."""
    depth: np.ndarray

    def __post_init__(self):
        depth = np.array(self.depth, dtype=np.float64, copy=True)
        if depth.ndim != 2:
            raise DegenerateInputError(f"Dense depth map must be 2-D, got shape {depth.shape}")
        if not np.all(np.isfinite(depth)) or np.any(depth <= 0):
            raise DegenerateInputError("Dense depth must be finite and positive everywhere")
        depth.setflags(write=False)
        object.__setattr__(self, "depth", depth)

    @property
    def shape(self) -> Tuple[int, int]:
        return self.depth.shape

    @property
    def valid(self) -> np.ndarray:
        return np.ones(self.depth.shape, dtype=bool)


def residual(
    z_seed: float,
    d_u: float,
    d_v: float,
    u: float,
    v: float,
    normal: np.ndarray,
    intr: CameraIntrinsics,
    guard: float = 1e-6,
) -> float:
    """Depth change from the seed to pixel (u, v) along the seed's tangent plane.

    ``d_u``/``d_v`` are seed minus pixel; ``u``/``v`` are the image coordinates of
    the pixel ray. Returns 0 when the ray is within ``guard`` of parallel to the plane.
    """
    n = np.asarray(normal, dtype=np.float64).reshape(3)
    numerator = z_seed * d_u / intr.f_u * n[0] + z_seed * d_v / intr.f_v * n[1]
    denominator = (u - intr.p_u) / intr.f_u * n[0] + (v - intr.p_v) / intr.f_v * n[1] + n[2]
    if not abs(denominator) >= guard:
        return 0.0
    return float(numerator / denominator)


def residual_grid(field: NearestField, intr: CameraIntrinsics, guard: float = 1e-6) -> np.ndarray:
    """Residual for every pixel centre of the nearest field; 0 where the seed has no normal.

    Offsets run from the pixel centre to where the seed was measured, so the
    seed pixel itself gets the step from the measured position to its centre.
    """
    a, b = intr.normalized_grid()
    n = field.seed_normal
    z_seed = field.seed_depth
    numerator = z_seed * (field.ray_offset_u / intr.f_u * n[..., 0] + field.ray_offset_v / intr.f_v * n[..., 1])
    denominator = a * n[..., 0] + b * n[..., 1] + n[..., 2]
    usable = np.isfinite(denominator) & (np.abs(denominator) >= guard)
    with np.errstate(divide="ignore", invalid="ignore"):
        dz = np.where(usable, numerator / np.where(usable, denominator, 1.0), 0.0)
    return dz


def gaussian_kernel(size: int, sigma: float) -> np.ndarray:
    """Normalized 1-D Gaussian weights on integer offsets."""
    if size < 1 or size % 2 == 0:
        raise ConfigError(f"Gaussian kernel size must be odd and positive, got {size}")
    if not sigma > 0:
        raise ConfigError(f"Gaussian sigma must be positive, got {sigma}")
    offsets = np.arange(size, dtype=np.float64) - size // 2
    weights = np.exp(-0.5 * (offsets / sigma) ** 2)
    return weights / weights.sum()


def gaussian_smooth(dense: DenseDepthMap, kernel: int = 5, sigma: float = 1.0) -> DenseDepthMap:
    """Separable Gaussian smoothing with replicated borders; kernel 1 returns the input unchanged."""
    weights = gaussian_kernel(kernel, sigma)
    if kernel == 1:
        return dense
    smoothed = ndimage.correlate1d(dense.depth, weights, axis=0, mode="nearest")
    smoothed = ndimage.correlate1d(smoothed, weights, axis=1, mode="nearest")
    return DenseDepthMap(smoothed)
