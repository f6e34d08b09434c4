"""Surface normals from a spherical range image.

Normals come from the partial derivatives of the range function r(theta, phi):
a surface point is p = r * e_r, so the normal is the gradient form

    n ~ R(theta_s, phi) . (1, -(dr/dtheta_s) / (r cos phi), -(dr/dphi) / r)

where R's columns are the local spherical basis (e_r, e_theta, e_phi) and
theta_s = -theta is the right-handed azimuth. Derivatives are taken like an
edge detector over neighbouring range-image cells, using the stored angles of
the actual points rather than bin centres.
"""

from dataclasses import dataclass
from typing import Optional

import numpy as np
import structlog
from scipy import ndimage

from depth_completion.geometry import (
    CameraIntrinsics,
    LidarScan,
    RigidTransform,
    SparseDepthMap,
    to_spherical_many,
)
from toolkit.errors import DegenerateInputError

logger = structlog.get_logger(__name__)

MIN_ANGLE_STEP = 1e-12


@dataclass(frozen=True, eq=False)
class RangeImage:
    """Grid of (rows = lines, cols = azimuth bins); empty cells hold NaN and id -1."""
    r: np.ndarray
    theta: np.ndarray
    phi: np.ndarray
    point_id: np.ndarray
    num_points: int

    @property
    def occupied(self) -> np.ndarray:
        return self.point_id >= 0

    @property
    def rows(self) -> int:
        return self.r.shape[0]

    @property
    def cols(self) -> int:
        return self.r.shape[1]


@dataclass(frozen=True, eq=False)
class PointNormals:
    """Unit normals per scan point in the LiDAR frame; NaN rows where none was estimated."""
    normals: np.ndarray

    @property
    def valid(self) -> np.ndarray:
        return np.all(np.isfinite(self.normals), axis=1)

    def lookup(self, point_ids: np.ndarray) -> np.ndarray:
        point_ids = np.asarray(point_ids, dtype=np.int64)
        out = np.full(point_ids.shape + (3,), np.nan)
        ok = (point_ids >= 0) & (point_ids < self.normals.shape[0])
        out[ok] = self.normals[point_ids[ok]]
        return out


@dataclass(frozen=True, eq=False)
class NormalMap:
    """(H, W, 3) camera-frame unit normals, NaN where absent."""
    normals: np.ndarray

    @property
    def valid(self) -> np.ndarray:
        return np.all(np.isfinite(self.normals), axis=2)

    @classmethod
    def empty(cls, height: int, width: int) -> "NormalMap":
        return cls(np.full((height, width, 3), np.nan))


def elevation_lines(phi: np.ndarray, num_lines: int) -> np.ndarray:
    """Bin elevations into ``num_lines`` uniform bins over the observed span; line 0 is the top."""
    if phi.size == 0:
        return np.zeros(0, dtype=np.int64)
    top, bottom = float(np.max(phi)), float(np.min(phi))
    span = top - bottom
    if span <= 0:
        return np.zeros(phi.shape, dtype=np.int64)
    lines = np.floor((top - phi) / span * num_lines).astype(np.int64)
    return np.clip(lines, 0, num_lines - 1)


def assign_pseudo_lines(scan: LidarScan, num_lines: Optional[int] = None, pole_tolerance: float = 1e-12) -> LidarScan:
    """Scan copy whose line indices come from elevation binning."""
    num_lines = num_lines or scan.num_lines
    if len(scan) == 0:
        return LidarScan(scan.points, np.zeros(0, dtype=np.int64), num_lines)
    _, _, phi = to_spherical_many(scan.points, pole_tolerance)
    return LidarScan(scan.points, elevation_lines(phi, num_lines), num_lines)


def build_range_image(
    scan: LidarScan,
    cols: int = 512,
    point_ids: Optional[np.ndarray] = None,
    pole_tolerance: float = 1e-12,
) -> RangeImage:
    """Place every point at (line row, azimuth bin); collisions keep the smaller range.

    ``point_ids`` are the ids stored per point (default: position in ``scan``).
    """
    if len(scan) == 0:
        raise DegenerateInputError("Cannot build a range image from an empty scan")
    if cols < 4:
        raise DegenerateInputError(f"Range image needs at least 4 columns, got {cols}")
    ids = np.arange(len(scan)) if point_ids is None else np.asarray(point_ids, dtype=np.int64)
    r, theta, phi = to_spherical_many(scan.points, pole_tolerance)

    rows = scan.line_index if scan.has_lines else elevation_lines(phi, scan.num_lines)
    lo, hi = float(theta.min()), float(theta.max())
    if hi > lo:
        col = np.floor((theta - lo) / (hi - lo) * cols).astype(np.int64)
        col = np.clip(col, 0, cols - 1)
    else:
        col = np.zeros(theta.shape, dtype=np.int64)

    shape = (scan.num_lines, cols)
    flat = rows * cols + col
    order = np.lexsort((ids, r, flat))
    _, first = np.unique(flat[order], return_index=True)
    keep = order[first]

    grid_r = np.full(shape, np.nan)
    grid_theta = np.full(shape, np.nan)
    grid_phi = np.full(shape, np.nan)
    grid_id = np.full(shape, -1, dtype=np.int64)
    grid_r[rows[keep], col[keep]] = r[keep]
    grid_theta[rows[keep], col[keep]] = theta[keep]
    grid_phi[rows[keep], col[keep]] = phi[keep]
    grid_id[rows[keep], col[keep]] = ids[keep]
    num_points = int(max(len(scan), ids.max() + 1)) if ids.size else len(scan)
    return RangeImage(grid_r, grid_theta, grid_phi, grid_id, num_points)


def _nearest_offsets(occupied: np.ndarray, direction: int, max_gap: int) -> np.ndarray:
    """Column offset (signed) to the nearest occupied cell along axis 1, 0 where none within the gap."""
    rows, cols = occupied.shape
    offsets = np.zeros(occupied.shape, dtype=np.int64)
    found = np.zeros(occupied.shape, dtype=bool)
    for step in range(1, max_gap + 1):
        shifted = np.zeros(occupied.shape, dtype=bool)
        if direction > 0:
            shifted[:, :cols - step] = occupied[:, step:]
        else:
            shifted[:, step:] = occupied[:, :cols - step]
        hit = shifted & ~found
        offsets[hit] = direction * step
        found |= hit
    return offsets


def _derivative_along_cols(r: np.ndarray, angle: np.ndarray, occupied: np.ndarray, max_gap: int) -> np.ndarray:
    """dr/d(angle) along axis 1 from the nearest occupied neighbours, NaN where undefined."""
    col_idx = np.arange(r.shape[1])[None, :]
    fwd = _nearest_offsets(occupied, +1, max_gap)
    bwd = _nearest_offsets(occupied, -1, max_gap)
    has_f, has_b = fwd != 0, bwd != 0

    f_idx = col_idx + fwd
    b_idx = col_idx + bwd
    r_f = np.take_along_axis(r, f_idx, axis=1)
    a_f = np.take_along_axis(angle, f_idx, axis=1)
    r_b = np.take_along_axis(r, b_idx, axis=1)
    a_b = np.take_along_axis(angle, b_idx, axis=1)

    # central where both neighbours exist, one-sided otherwise
    r_hi = np.where(has_f, r_f, r)
    a_hi = np.where(has_f, a_f, angle)
    r_lo = np.where(has_b, r_b, r)
    a_lo = np.where(has_b, a_b, angle)
    step = a_hi - a_lo
    usable = occupied & (has_f | has_b) & (np.abs(step) > MIN_ANGLE_STEP)
    with np.errstate(divide="ignore", invalid="ignore"):
        deriv = np.where(usable, (r_hi - r_lo) / np.where(usable, step, 1.0), np.nan)
    return deriv


def _box_smooth(values: np.ndarray) -> np.ndarray:
    """3x3 mean over finite neighbours; cells that were NaN stay NaN."""
    valid = np.isfinite(values)
    summed = ndimage.uniform_filter(np.where(valid, values, 0.0), size=3, mode="constant")
    counts = ndimage.uniform_filter(valid.astype(np.float64), size=3, mode="constant")
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(valid, summed / counts, np.nan)


def spherical_basis(theta: np.ndarray, phi: np.ndarray) -> np.ndarray:
    """R(theta_s, phi) = Rz(theta_s) . Ry(phi) per cell, shape (..., 3, 3); columns are e_r, e_theta, e_phi."""
    theta_s = -np.asarray(theta)
    ct, st = np.cos(theta_s), np.sin(theta_s)
    cp, sp = np.cos(phi), np.sin(phi)
    zero, one = np.zeros_like(ct), np.ones_like(ct)
    rz = np.stack([np.stack([ct, -st, zero], -1), np.stack([st, ct, zero], -1), np.stack([zero, zero, one], -1)], -2)
    ry = np.stack([np.stack([cp, zero, -sp], -1), np.stack([zero, one, zero], -1), np.stack([sp, zero, cp], -1)], -2)
    return rz @ ry


def estimate_normals(ri: RangeImage, max_gap: int = 3, smoothing: bool = True) -> PointNormals:
    """Unit normals per stored point, oriented toward the sensor."""
    occupied = ri.occupied
    if np.count_nonzero(occupied) < 3:
        raise DegenerateInputError("Normal estimation needs at least 3 occupied range-image cells")

    dr_dtheta = _derivative_along_cols(ri.r, ri.theta, occupied, max_gap)
    dr_dphi = _derivative_along_cols(ri.r.T, ri.phi.T, occupied.T, max_gap).T
    if smoothing:
        dr_dtheta = _box_smooth(dr_dtheta)
        dr_dphi = _box_smooth(dr_dphi)

    ok = occupied & np.isfinite(dr_dtheta) & np.isfinite(dr_dphi)
    r, theta, phi = ri.r[ok], ri.theta[ok], ri.phi[ok]
    # d/dtheta_s = -d/dtheta
    coeffs = np.stack([
        np.ones_like(r),
        dr_dtheta[ok] / (r * np.cos(phi)),
        -dr_dphi[ok] / r,
    ], axis=-1)
    n = np.einsum("...ij,...j->...i", spherical_basis(theta, phi), coeffs)
    n /= np.linalg.norm(n, axis=-1, keepdims=True)

    points = np.stack([np.cos(phi) * np.cos(theta), -np.cos(phi) * np.sin(theta), np.sin(phi)], axis=-1)
    facing_away = np.einsum("ij,ij->i", n, points) > 0
    n[facing_away] *= -1.0

    normals = np.full((ri.num_points, 3), np.nan)
    normals[ri.point_id[ok]] = n
    logger.debug("Estimated normals", occupied=int(occupied.sum()), normals=int(ok.sum()))
    return PointNormals(normals)


def fill_range_image_normals(ri: RangeImage, normals: PointNormals, max_gap: int = 3) -> PointNormals:
    """Give occupied cells without a normal the normal of the nearest cell in the same row or column."""
    grid = np.full(ri.r.shape + (3,), np.nan)
    occ = ri.occupied
    grid[occ] = normals.lookup(ri.point_id[occ])
    has = np.all(np.isfinite(grid), axis=2)
    filled = grid.copy()
    need = occ & ~has
    for step in range(1, max_gap + 1):
        for axis in (1, 0):
            for direction in (-1, 1):
                if not need.any():
                    break
                src = np.roll(grid, -direction * step, axis=axis)
                src_has = np.roll(has, -direction * step, axis=axis)
                # np.roll wraps; drop cells that came around the border
                edge = np.zeros(has.shape, dtype=bool)
                index = [slice(None), slice(None)]
                index[axis] = slice(-step, None) if direction > 0 else slice(None, step)
                edge[tuple(index)] = True
                take = need & src_has & ~edge
                filled[take] = src[take]
                need &= ~take

    out = normals.normals.copy()
    ids = ri.point_id[occ]
    out[ids] = filled[occ]
    return PointNormals(out)


def normals_to_camera(
    normals: PointNormals,
    extrinsics: RigidTransform,
    sparse: SparseDepthMap,
    intr: Optional[CameraIntrinsics] = None,
) -> NormalMap:
    """Rotate the source point's normal into every occupied pixel.

    With ``intr`` the result is re-oriented against the pixel-centre viewing ray;
    without it the LiDAR-side orientation is kept.
    """
    height, width = sparse.shape
    grid = np.full((height, width, 3), np.nan)
    rows, cols = np.nonzero(sparse.source_id >= 0)
    n = normals.lookup(sparse.source_id[rows, cols])
    have = np.all(np.isfinite(n), axis=1)
    rows, cols, n = rows[have], cols[have], extrinsics.rotate(n[have])
    n /= np.linalg.norm(n, axis=1, keepdims=True)
    if intr is not None:
        a = (cols + 0.5 - intr.p_u) / intr.f_u
        b = (rows + 0.5 - intr.p_v) / intr.f_v
        facing_away = n[:, 0] * a + n[:, 1] * b + n[:, 2] > 0
        n[facing_away] *= -1.0
    grid[rows, cols] = n
    return NormalMap(grid)
