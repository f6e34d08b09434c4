"""Exact nearest-seed transform over the image grid, carrying seed identity.

The Euclidean field comes from scipy's exact feature transform, which may
return any of several equally near seeds. The result is then made canonical:
ties go to the smaller row and then the smaller column. Within a row the
nearest seed column is found with running max/min accumulations (ties go
left), so only the winning row has to be resolved per pixel.

For the L1 metric candidates are compared on an integer key

    key = distance * M + rank,    rank = row * W + col,    M = W * H

swept down and up each column, so the minimum key is the canonical seed.
"""

from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np
import structlog
from scipy import ndimage

from depth_completion.geometry import SparseDepthMap
from depth_completion.normals import NormalMap
from toolkit.errors import DegenerateInputError
from toolkit.settings import DistanceMetric

logger = structlog.get_logger(__name__)

# larger than any squared distance on a grid that fits in memory
_NO_SEED = np.iinfo(np.int64).max // 4


@dataclass(frozen=True, eq=False)
class NearestField:
    """Per-pixel nearest seed: its pixel, the offset to it, the distance, and the seed's depth and normal.

    ``seed_u``/``seed_v`` are the continuous image position the seed depth was
    measured at (its pixel centre when the map carries no positions).
    """
    seed_row: np.ndarray
    seed_col: np.ndarray
    distance: np.ndarray
    seed_depth: np.ndarray
    seed_normal: np.ndarray
    seed_u: np.ndarray
    seed_v: np.ndarray
    metric: DistanceMetric

    @property
    def offset_u(self) -> np.ndarray:
        """Signed column offset (seed minus pixel)."""
        return self.seed_col - np.arange(self.seed_col.shape[1])[None, :]

    @property
    def offset_v(self) -> np.ndarray:
        """Signed row offset (seed minus pixel)."""
        return self.seed_row - np.arange(self.seed_row.shape[0])[:, None]

    @property
    def ray_offset_u(self) -> np.ndarray:
        """Seed position minus pixel centre along u, in pixels."""
        return self.seed_u - (np.arange(self.seed_u.shape[1]) + 0.5)[None, :]

    @property
    def ray_offset_v(self) -> np.ndarray:
        """Seed position minus pixel centre along v, in pixels."""
        return self.seed_v - (np.arange(self.seed_v.shape[0]) + 0.5)[:, None]

    @property
    def shape(self) -> Tuple[int, int]:
        return self.seed_row.shape


def _row_pass(occupied: np.ndarray) -> np.ndarray:
    """Nearest seed column within each row, -1 for rows without seeds; ties go left."""
    height, width = occupied.shape
    cols = np.broadcast_to(np.arange(width), occupied.shape)
    left = np.maximum.accumulate(np.where(occupied, cols, -1), axis=1)
    right = np.minimum.accumulate(np.where(occupied, cols, width)[:, ::-1], axis=1)[:, ::-1]
    has_left = left >= 0
    has_right = right < width
    take_left = has_left & (~has_right | ((cols - left) <= (right - cols)))
    return np.where(take_left, left, np.where(has_right, right, -1))


def _first_nearest_rows(found_row: np.ndarray, sq_dist: np.ndarray, gap_sq: np.ndarray) -> np.ndarray:
    """Smallest seed row at the nearest distance, per pixel.

    ``found_row`` is the row of any nearest seed. Nearest rows never decrease
    down a column, so the smallest one lies between the pixel above's
    ``found_row`` and the pixel's own; the windows of a column add up to at
    most its height.
    """
    width = found_row.shape[1]
    best = found_row.copy()
    lower = np.vstack([np.zeros((1, width), dtype=np.int64), found_row[:-1]])
    pix = np.flatnonzero(lower < found_row)
    q = lower.ravel()[pix]
    stop = found_row.ravel()[pix]
    target = sq_dist.ravel()[pix]
    r, c = np.divmod(pix, width)
    gaps = gap_sq.ravel()
    while pix.size:
        hit = gaps[q * width + c] + (r - q) ** 2 == target
        best.flat[pix[hit]] = q[hit]
        more = ~hit & (q + 1 < stop)
        pix, r, c, q, stop, target = pix[more], r[more], c[more], q[more] + 1, stop[more], target[more]
    return best


def _euclidean_seeds(occupied: np.ndarray, seed_col_in_row: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    height, width = occupied.shape
    rows = np.arange(height)[:, None]
    cols = np.arange(width)[None, :]
    indices = ndimage.distance_transform_edt(~occupied, return_distances=False, return_indices=True)
    found_row = indices[0].astype(np.int64)
    sq_dist = (found_row - rows) ** 2 + (indices[1].astype(np.int64) - cols) ** 2
    gap_sq = np.where(seed_col_in_row >= 0, (cols - seed_col_in_row) ** 2, _NO_SEED)
    seed_row = _first_nearest_rows(found_row, sq_dist, gap_sq)
    return seed_row, np.take_along_axis(seed_col_in_row, seed_row, axis=0)


def _l1_seeds(occupied: np.ndarray, seed_col_in_row: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    height, width = occupied.shape
    scale = height * width
    rank = np.arange(height)[:, None] * width + seed_col_in_row
    gap = np.abs(np.arange(width)[None, :] - seed_col_in_row)
    best = np.where(seed_col_in_row >= 0, gap * scale + rank, _NO_SEED)
    for q in range(1, height):
        np.minimum(best[q], best[q - 1] + scale, out=best[q])
    for q in range(height - 2, -1, -1):
        np.minimum(best[q], best[q + 1] + scale, out=best[q])
    winner = best % scale
    return winner // width, winner % width


def nearest_field(
    sparse: SparseDepthMap,
    normals: Optional[NormalMap] = None,
    metric: DistanceMetric = DistanceMetric.EUCLIDEAN,
) -> NearestField:
    """Exact nearest occupied pixel for every pixel under the chosen metric."""
    occupied = sparse.valid
    if not occupied.any():
        raise DegenerateInputError("Nearest field needs at least one occupied pixel")
    metric = DistanceMetric(metric)
    height, width = occupied.shape

    seed_col_in_row = _row_pass(occupied)
    if metric is DistanceMetric.EUCLIDEAN:
        seed_row, seed_col = _euclidean_seeds(occupied, seed_col_in_row)
    else:
        seed_row, seed_col = _l1_seeds(occupied, seed_col_in_row)

    d_row = seed_row - np.arange(height)[:, None]
    d_col = seed_col - np.arange(width)[None, :]
    if metric is DistanceMetric.EUCLIDEAN:
        distance = np.hypot(d_row, d_col)
    else:
        distance = (np.abs(d_row) + np.abs(d_col)).astype(np.float64)

    seed_depth = sparse.depth[seed_row, seed_col]
    seed_u = sparse.u[seed_row, seed_col]
    seed_v = sparse.v[seed_row, seed_col]
    seed_u = np.where(np.isfinite(seed_u), seed_u, seed_col + 0.5)
    seed_v = np.where(np.isfinite(seed_v), seed_v, seed_row + 0.5)
    if normals is None:
        seed_normal = np.full((height, width, 3), np.nan)
    else:
        seed_normal = normals.normals[seed_row, seed_col]
    return NearestField(seed_row, seed_col, distance, seed_depth, seed_normal, seed_u, seed_v, metric)
