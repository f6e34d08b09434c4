"""Parameter-free removal of occlusion-induced LiDAR outliers.

A point projected into the image is an outlier when some neighbour in the
resolution-derived window S(i) appears in the opposite order in the image than
in the LiDAR's angular frame, and the point is deeper than that neighbour by
more than epsilon. The window half-widths come from the sensors alone:
W * L / N columns and H / L rows.
"""

from dataclasses import dataclass
from typing import Tuple

import numpy as np
import structlog

from depth_completion.geometry import LidarScan, ProjectedPoints, SparseDepthMap, to_spherical_many
from toolkit.errors import SensorSpecError

logger = structlog.get_logger(__name__)


@dataclass(frozen=True)
class SensorSpec:
    width: int
    height: int
    num_lines: int
    num_points: int

    def __post_init__(self):
        for name in ("width", "height", "num_lines", "num_points"):
            value = getattr(self, name)
            if not value > 0:
                raise SensorSpecError(f"SensorSpec.{name} must be positive, got {value}")

    @property
    def half_widths(self) -> Tuple[float, float]:
        """(column, row) bounds of the neighbourhood window."""
        return self.width * self.num_lines / self.num_points, self.height / self.num_lines

    @classmethod
    def for_map(cls, sparse: SparseDepthMap, num_lines: int) -> "SensorSpec":
        height, width = sparse.shape
        return cls(width, height, num_lines, sparse.occupied)


@dataclass(frozen=True, eq=False)
class PointSamples:
    """Per-point image position (continuous), LiDAR angles and camera depth of the points in a sparse map."""
    point_ids: np.ndarray
    u: np.ndarray
    v: np.ndarray
    theta: np.ndarray
    phi: np.ndarray
    z: np.ndarray

    def __len__(self) -> int:
        return int(self.point_ids.shape[0])

    @classmethod
    def from_projection(
        cls,
        scan: LidarScan,
        projected: ProjectedPoints,
        winners: np.ndarray,
        pole_tolerance: float = 1e-12,
    ) -> "PointSamples":
        """Samples for the z-buffer winners of ``projected``."""
        ids = projected.point_ids[winners]
        if ids.size:
            _, theta, phi = to_spherical_many(scan.points[ids], pole_tolerance)
        else:
            theta = phi = np.zeros(0)
        return cls(ids, projected.u[winners], projected.v[winners], theta, phi, projected.z[winners])


@dataclass(frozen=True, eq=False)
class OutlierMask:
    """Removed point ids plus the matching per-pixel grid."""
    removed_ids: np.ndarray
    pixels: np.ndarray
    num_points: int

    @property
    def removed(self) -> int:
        return int(self.removed_ids.shape[0])

    @property
    def keep_ratio(self) -> float:
        if self.num_points == 0:
            return 1.0
        return 1.0 - self.removed / self.num_points

    def to_image(self) -> np.ndarray:
        """8-bit single-channel mask, 255 = removed."""
        return np.where(self.pixels, 255, 0).astype(np.uint8)

    @classmethod
    def nothing_removed(cls, sparse: SparseDepthMap) -> "OutlierMask":
        return cls(np.zeros(0, dtype=np.int64), np.zeros(sparse.shape, dtype=bool), sparse.occupied)


def neighbor_pairs(u: np.ndarray, v: np.ndarray, spec: SensorSpec) -> Tuple[np.ndarray, np.ndarray]:
    """All ordered pairs (i, j), i != j, with |u_j - u_i| < hu and |v_j - v_i| < hv.

    Buckets of size (hu, hv) make every such j fall in the 3x3 buckets around i.
    """
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    n = u.shape[0]
    if n == 0:
        empty = np.zeros(0, dtype=np.int64)
        return empty, empty
    hu, hv = spec.half_widths
    bu = np.floor(u / hu).astype(np.int64) + 1
    bv = np.floor(v / hv).astype(np.int64) + 1
    stride = int(bv.max()) + 2
    keys = bu * stride + bv
    order = np.argsort(keys, kind="stable")
    sorted_keys = keys[order]

    all_i, all_j = [], []
    for du in (-1, 0, 1):
        for dv in (-1, 0, 1):
            target = (bu + du) * stride + (bv + dv)
            left = np.searchsorted(sorted_keys, target, side="left")
            right = np.searchsorted(sorted_keys, target, side="right")
            counts = right - left
            total = int(counts.sum())
            if total == 0:
                continue
            i_rep = np.repeat(np.arange(n), counts)
            starts = np.repeat(left, counts)
            within = np.arange(total) - np.repeat(np.cumsum(counts) - counts, counts)
            all_i.append(i_rep)
            all_j.append(order[starts + within])

    if not all_i:
        empty = np.zeros(0, dtype=np.int64)
        return empty, empty
    i = np.concatenate(all_i)
    j = np.concatenate(all_j)
    keep = (i != j) & (np.abs(u[j] - u[i]) < hu) & (np.abs(v[j] - v[i]) < hv)
    return i[keep], j[keep]


def neighborhood(i: int, u: np.ndarray, v: np.ndarray, spec: SensorSpec) -> np.ndarray:
    """Indices j != i inside the window around point ``i``."""
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    hu, hv = spec.half_widths
    inside = (np.abs(u - u[i]) < hu) & (np.abs(v - v[i]) < hv)
    inside[i] = False
    return np.flatnonzero(inside)


def outlier_indices(samples: PointSamples, spec: SensorSpec, epsilon: float = 1.0) -> np.ndarray:
    """Sorted sample indices flagged as outliers.

    Every decision reads the original sample set, so the result does not depend
    on iteration order. Rows grow downward while elevation grows upward, hence
    rows are compared against the depression angle -phi.
    """
    if len(samples) != spec.num_points:
        raise SensorSpecError(
            f"SensorSpec expects {spec.num_points} points but the map holds {len(samples)}"
        )
    i, j = neighbor_pairs(samples.u, samples.v, spec)
    depression = -samples.phi
    order_flipped = (
        ((samples.u[i] - samples.u[j]) * (samples.theta[i] - samples.theta[j]) < 0)
        | ((samples.v[i] - samples.v[j]) * (depression[i] - depression[j]) < 0)
    )
    deeper = samples.z[i] > samples.z[j] + epsilon
    return np.unique(i[order_flipped & deeper])


def azimuth_follows_columns(samples: PointSamples) -> bool:
    """True when image columns grow with LiDAR azimuth across the samples, as the order test assumes."""
    if len(samples) < 2:
        return True
    u = samples.u - samples.u.mean()
    theta = samples.theta - samples.theta.mean()
    return float(u @ theta) >= 0.0


def remove_outliers(
    sparse: SparseDepthMap,
    samples: PointSamples,
    spec: SensorSpec,
    epsilon: float = 1.0,
) -> Tuple[SparseDepthMap, OutlierMask]:
    """Drop outlier points from the sparse map and report them as a mask."""
    if not azimuth_follows_columns(samples):
        logger.warning("Azimuth runs against image columns, check the LiDAR mounting", points=len(samples))
    flagged = outlier_indices(samples, spec, epsilon)
    removed_ids = np.sort(samples.point_ids[flagged])
    occupied = sparse.source_id >= 0
    pixels = np.zeros(sparse.shape, dtype=bool)
    pixels[occupied] = np.isin(sparse.source_id[occupied], removed_ids)
    mask = OutlierMask(removed_ids, pixels, spec.num_points)
    logger.debug("Removed outliers", points=spec.num_points, removed=mask.removed, keep_ratio=mask.keep_ratio)
    return sparse.without(pixels), mask
