"""Coordinate systems, camera model and LiDAR-to-image projection.

Axis conventions:
    camera frame: x right, y down, z forward
    LiDAR frame:  x forward, y left, z up
    extrinsics:   LiDAR -> camera

Azimuth is ``theta = -atan2(y, x)`` in the LiDAR frame, so theta grows with the
image column for points both sensors see. Elevation
``phi = atan2(z, hypot(x, y))`` grows upward while image rows grow downward.
"""

from dataclasses import dataclass, field
from typing import Optional, Tuple

import numpy as np
import structlog

from toolkit.errors import CalibrationError, DegenerateInputError

logger = structlog.get_logger(__name__)

DEFAULT_MAX_RANGE = 120.0
ORTHONORMAL_TOL = 1e-9


def _frozen(array: np.ndarray) -> np.ndarray:
    array = np.array(array, dtype=np.float64, copy=True)
    array.setflags(write=False)
    return array


@dataclass(frozen=True)
class CameraIntrinsics:
    """Pinhole camera: focal lengths and principal point in pixels, image size."""
    f_u: float
    f_v: float
    p_u: float
    p_v: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.f_u > 0 and self.f_v > 0):
            raise CalibrationError(f"Focal lengths must be positive, got f_u={self.f_u}, f_v={self.f_v}")
        if self.width <= 0 or self.height <= 0:
            raise CalibrationError(f"Image size must be positive, got {self.width}x{self.height}")
        if not (0 <= self.p_u < self.width and 0 <= self.p_v < self.height):
            raise CalibrationError(
                f"Principal point ({self.p_u}, {self.p_v}) outside {self.width}x{self.height} image"
            )

    @property
    def shape(self) -> Tuple[int, int]:
        """Grid shape as (rows, cols)."""
        return self.height, self.width

    @property
    def matrix(self) -> np.ndarray:
        return np.array([
            [self.f_u, 0.0, self.p_u],
            [0.0, self.f_v, self.p_v],
            [0.0, 0.0, 1.0],
        ])

    def normalized_grid(self) -> Tuple[np.ndarray, np.ndarray]:
        """Per-pixel ((mu - p_u) / f_u, (nu - p_v) / f_v) at pixel centres, each (H, W)."""
        cols = (np.arange(self.width, dtype=np.float64) + 0.5 - self.p_u) / self.f_u
        rows = (np.arange(self.height, dtype=np.float64) + 0.5 - self.p_v) / self.f_v
        a, b = np.meshgrid(cols, rows)
        return a, b


@dataclass(frozen=True, eq=False)
class RigidTransform:
    """Rotation plus translation (meters); maps source-frame points to the target frame."""
    rotation: np.ndarray
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        rotation = np.asarray(self.rotation, dtype=np.float64)
        translation = np.asarray(self.translation, dtype=np.float64).reshape(-1)
        if rotation.shape != (3, 3) or translation.shape != (3,):
            raise CalibrationError(
                f"Expected 3x3 rotation and 3-vector translation, got {rotation.shape} and {translation.shape}"
            )
        if not (np.all(np.isfinite(rotation)) and np.all(np.isfinite(translation))):
            raise CalibrationError("Rigid transform contains non-finite values")
        if np.max(np.abs(rotation @ rotation.T - np.eye(3))) > ORTHONORMAL_TOL:
            raise CalibrationError("Rotation is not orthonormal")
        if abs(np.linalg.det(rotation) - 1.0) > ORTHONORMAL_TOL:
            raise CalibrationError("Rotation determinant is not +1")
        object.__setattr__(self, "rotation", _frozen(rotation))
        object.__setattr__(self, "translation", _frozen(translation))

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, matrix: np.ndarray) -> "RigidTransform":
        """Build from a 3x4 ``[R|t]`` or 4x4 homogeneous matrix."""
        matrix = np.asarray(matrix, dtype=np.float64)
        if matrix.shape not in ((3, 4), (4, 4)):
            raise CalibrationError(f"Expected a 3x4 or 4x4 matrix, got {matrix.shape}")
        return cls(matrix[:3, :3], matrix[:3, 3])

    def apply(self, points: np.ndarray) -> np.ndarray:
        points = np.asarray(points, dtype=np.float64)
        return points @ self.rotation.T + self.translation

    def rotate(self, vectors: np.ndarray) -> np.ndarray:
        """Rotate direction vectors (translation does not apply)."""
        return np.asarray(vectors, dtype=np.float64) @ self.rotation.T

    def inverse(self) -> "RigidTransform":
        rt = self.rotation.T
        return RigidTransform(rt, -rt @ self.translation)

    def compose(self, first: "RigidTransform") -> "RigidTransform":
        """Transform equivalent to applying ``first`` and then ``self``."""
        return RigidTransform(self.rotation @ first.rotation, self.rotation @ first.translation + self.translation)

    def as_matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m


@dataclass(frozen=True, eq=False)
class LidarScan:
    """Points in the LiDAR frame with optional per-point line (ring) indices."""
    points: np.ndarray
    line_index: Optional[np.ndarray] = None
    num_lines: int = 64

    def __post_init__(self):
        points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        if not np.all(np.isfinite(points)):
            raise DegenerateInputError("LiDAR scan contains non-finite coordinates")
        if self.num_lines <= 0:
            raise DegenerateInputError(f"num_lines must be positive, got {self.num_lines}")
        object.__setattr__(self, "points", _frozen(points))
        if self.line_index is not None:
            lines = np.asarray(self.line_index).astype(np.int64).reshape(-1)
            if lines.shape[0] != points.shape[0]:
                raise DegenerateInputError(
                    f"line_index has {lines.shape[0]} entries for {points.shape[0]} points"
                )
            if lines.size and (lines.min() < 0 or lines.max() >= self.num_lines):
                raise DegenerateInputError(f"line indices must lie in [0, {self.num_lines})")
            lines.setflags(write=False)
            object.__setattr__(self, "line_index", lines)

    def __len__(self) -> int:
        return int(self.points.shape[0])

    @property
    def has_lines(self) -> bool:
        return self.line_index is not None

    def subset(self, mask: np.ndarray) -> "LidarScan":
        lines = None if self.line_index is None else self.line_index[mask]
        return LidarScan(self.points[mask], lines, self.num_lines)


@dataclass(frozen=True)
class SphericalPoint:
    r: float
    theta: float
    phi: float
    degenerate_azimuth: bool = False


def to_spherical_many(points: np.ndarray, pole_tolerance: float = 1e-12) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Vectorized Cartesian -> (r, theta, phi). Pole points get theta = 0."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    r = np.linalg.norm(points, axis=1)
    if np.any(r == 0.0):
        raise DegenerateInputError("Cannot convert a zero-norm point to spherical coordinates")
    horizontal = np.hypot(points[:, 0], points[:, 1])
    pole = horizontal <= pole_tolerance * r
    theta = np.where(pole, 0.0, -np.arctan2(points[:, 1], points[:, 0]))
    # -atan2 maps the branch value pi to -pi; keep theta in (-pi, pi]
    theta = np.where(theta <= -np.pi, np.pi, theta)
    phi = np.arctan2(points[:, 2], horizontal)
    phi = np.where(pole, np.sign(points[:, 2]) * (np.pi / 2), phi)
    return r, theta, phi


def to_spherical(point: np.ndarray, pole_tolerance: float = 1e-12) -> SphericalPoint:
    point = np.asarray(point, dtype=np.float64).reshape(3)
    if not np.all(np.isfinite(point)):
        raise DegenerateInputError("Point must be finite")
    r, theta, phi = to_spherical_many(point[None, :], pole_tolerance)
    horizontal = np.hypot(point[0], point[1])
    return SphericalPoint(float(r[0]), float(theta[0]), float(phi[0]), bool(horizontal <= pole_tolerance * r[0]))


def from_spherical_many(r: np.ndarray, theta: np.ndarray, phi: np.ndarray) -> np.ndarray:
    r = np.asarray(r, dtype=np.float64)
    cos_phi = np.cos(phi)
    return np.stack([r * cos_phi * np.cos(theta), -r * cos_phi * np.sin(theta), r * np.sin(phi)], axis=-1)


def from_spherical(sp: SphericalPoint) -> np.ndarray:
    return from_spherical_many(np.array([sp.r]), np.array([sp.theta]), np.array([sp.phi]))[0]


@dataclass(frozen=True, eq=False)
class ProjectedPoints:
    """In-frame projections of a point set: ids into the source scan and continuous pixels."""
    point_ids: np.ndarray
    u: np.ndarray
    v: np.ndarray
    z: np.ndarray

    @property
    def cols(self) -> np.ndarray:
        return np.floor(self.u).astype(np.int64)

    @property
    def rows(self) -> np.ndarray:
        return np.floor(self.v).astype(np.int64)

    def __len__(self) -> int:
        return int(self.point_ids.shape[0])


@dataclass(frozen=True, eq=False)
class SparseDepthMap:
    """Depth grid (H, W) in meters, 0 where empty, plus the source point id per pixel (-1 where empty).

    ``u``/``v`` hold the continuous image position the seed was measured at,
    NaN where empty or unknown (maps read from PNG carry no positions).
    """
    depth: np.ndarray
    source_id: Optional[np.ndarray] = None
    u: Optional[np.ndarray] = None
    v: Optional[np.ndarray] = None

    def __post_init__(self):
        depth = np.asarray(self.depth, dtype=np.float64)
        if depth.ndim != 2:
            raise DegenerateInputError(f"Depth map must be 2-D, got shape {depth.shape}")
        if not np.all(np.isfinite(depth)) or np.any(depth < 0):
            raise DegenerateInputError("Depth map values must be finite and non-negative")
        depth = depth.copy()
        depth.setflags(write=False)
        object.__setattr__(self, "depth", depth)
        if self.source_id is None:
            ids = np.full(depth.shape, -1, dtype=np.int64)
        else:
            ids = np.array(self.source_id, dtype=np.int64, copy=True)
            if ids.shape != depth.shape:
                raise DegenerateInputError("source_id grid does not match the depth grid")
        ids.setflags(write=False)
        object.__setattr__(self, "source_id", ids)
        for name in ("u", "v"):
            value = getattr(self, name)
            grid = np.full(depth.shape, np.nan) if value is None else np.array(value, dtype=np.float64, copy=True)
            if grid.shape != depth.shape:
                raise DegenerateInputError(f"{name} grid does not match the depth grid")
            grid.setflags(write=False)
            object.__setattr__(self, name, grid)

    @classmethod
    def empty(cls, height: int, width: int) -> "SparseDepthMap":
        return cls(np.zeros((height, width)))

    @property
    def shape(self) -> Tuple[int, int]:
        return self.depth.shape

    @property
    def valid(self) -> np.ndarray:
        return self.depth > 0

    @property
    def occupied(self) -> int:
        return int(np.count_nonzero(self.depth > 0))

    @property
    def density(self) -> float:
        return self.occupied / float(self.depth.size)

    def without(self, removed_pixels: np.ndarray) -> "SparseDepthMap":
        """Copy with the given pixels emptied."""
        depth = np.where(removed_pixels, 0.0, self.depth)
        ids = np.where(removed_pixels, -1, self.source_id)
        u = np.where(removed_pixels, np.nan, self.u)
        v = np.where(removed_pixels, np.nan, self.v)
        return SparseDepthMap(depth, ids, u, v)


def project_point(
    point: np.ndarray, extrinsics: RigidTransform, intr: CameraIntrinsics
) -> Optional[Tuple[float, float, float]]:
    """Project one LiDAR-frame point; ``None`` when behind the camera or out of frame."""
    cam = extrinsics.apply(np.asarray(point, dtype=np.float64).reshape(1, 3))[0]
    if not cam[2] > 0:
        return None
    u = intr.f_u * cam[0] / cam[2] + intr.p_u
    v = intr.f_v * cam[1] / cam[2] + intr.p_v
    if 0 <= u < intr.width and 0 <= v < intr.height:
        return float(u), float(v), float(cam[2])
    return None


def project_points(
    points: np.ndarray,
    extrinsics: RigidTransform,
    intr: CameraIntrinsics,
    max_range: float = DEFAULT_MAX_RANGE,
) -> ProjectedPoints:
    """Vectorized projection keeping points with 0 < z <= max_range inside the image."""
    cam = extrinsics.apply(points)
    z = cam[:, 2]
    front = z > 0
    with np.errstate(divide="ignore", invalid="ignore"):
        u = np.where(front, intr.f_u * cam[:, 0] / np.where(front, z, 1.0) + intr.p_u, -1.0)
        v = np.where(front, intr.f_v * cam[:, 1] / np.where(front, z, 1.0) + intr.p_v, -1.0)
    keep = front & (z <= max_range) & (u >= 0) & (u < intr.width) & (v >= 0) & (v < intr.height)
    ids = np.flatnonzero(keep)
    return ProjectedPoints(ids, u[keep], v[keep], z[keep])


def zbuffer(projected: ProjectedPoints, intr: CameraIntrinsics) -> Tuple[SparseDepthMap, np.ndarray]:
    """Rasterize projections keeping the nearest point per pixel.

    Returns the depth map and the indices (into ``projected``) of the winning points.
    Depth ties go to the smaller point id. Each occupied pixel keeps its winner's
    continuous (u, v).
    """
    rows, cols = projected.rows, projected.cols
    # floor() of a value just below W can round up to W in float; clamp to the grid
    np.clip(cols, 0, intr.width - 1, out=cols)
    np.clip(rows, 0, intr.height - 1, out=rows)
    flat = rows * intr.width + cols
    order = np.lexsort((projected.point_ids, projected.z, flat))
    _, first = np.unique(flat[order], return_index=True)
    winners = order[first]

    depth = np.zeros(intr.shape)
    ids = np.full(intr.shape, -1, dtype=np.int64)
    u = np.full(intr.shape, np.nan)
    v = np.full(intr.shape, np.nan)
    at = rows[winners], cols[winners]
    depth[at] = projected.z[winners]
    ids[at] = projected.point_ids[winners]
    u[at] = projected.u[winners]
    v[at] = projected.v[winners]
    return SparseDepthMap(depth, ids, u, v), winners


def project_scan(
    scan: LidarScan,
    extrinsics: RigidTransform,
    intr: CameraIntrinsics,
    max_range: float = DEFAULT_MAX_RANGE,
) -> SparseDepthMap:
    projected = project_points(scan.points, extrinsics, intr, max_range)
    sparse, _ = zbuffer(projected, intr)
    logger.debug("Projected scan", points=len(scan), in_frame=len(projected), occupied=sparse.occupied)
    return sparse


def unproject_pixel(u: float, v: float, z: float, intr: CameraIntrinsics) -> np.ndarray:
    """Camera-frame point ``z * K^-1 (u, v, 1)``."""
    if not z > 0:
        raise DegenerateInputError(f"Depth must be positive to unproject, got {z}")
    return np.array([z * (u - intr.p_u) / intr.f_u, z * (v - intr.p_v) / intr.f_v, z])
