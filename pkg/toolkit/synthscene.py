"""Analytic scenes of planes and spheres seen by a LiDAR and a camera.

Everything is exact: LiDAR returns are closed-form ray/surface intersections,
ground truth depth and normals come from the same formulas, and camera
visibility of every LiDAR point is decided by casting a ray from the camera.

World frame follows the LiDAR convention (x forward, y left, z up). Poses map
sensor coordinates to world coordinates.

Scene files are key-value text files::

    SURFACES=plane 20 0 0 -1 0 0; sphere 10 1 0 1.5
    LIDAR_POSITION=0 0.3 0
    CAMERA_POSITION=0 0 0
    LINES=40
    ELEVATION_MIN_DEG=-24
    ELEVATION_MAX_DEG=24
    AZIMUTH_MIN_DEG=-44
    AZIMUTH_MAX_DEG=44
    AZIMUTH_STEP_DEG=0.4
    JITTER_SIGMA=0.0
    SEED=0
    WIDTH=240
    HEIGHT=120
    FOCAL=120
    PRINCIPAL_U=120
    PRINCIPAL_V=60
    FRAMES=1
    FRAME_SHIFT=0 0 0

A plane is ``plane px py pz nx ny nz [half_w half_h]`` and a sphere
``sphere cx cy cz radius``, all in world meters. With half extents the plane is
a rectangle centred on its point (see :attr:`Plane.axes`).
"""

from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
import structlog
from dotenv import dotenv_values

from depth_completion.geometry import (
    CameraIntrinsics,
    LidarScan,
    RigidTransform,
    SparseDepthMap,
)
from depth_completion.normals import NormalMap
from depth_completion.surface_model import DenseDepthMap
from toolkit.errors import ConfigError

logger = structlog.get_logger(__name__)

# columns: camera x (right) -> world -y, camera y (down) -> world -z, camera z (forward) -> world x
CAMERA_AXES = np.array([
    [0.0, 0.0, 1.0],
    [-1.0, 0.0, 0.0],
    [0.0, -1.0, 0.0],
])
HIT_EPSILON = 1e-9
VISIBILITY_TOLERANCE = 1e-6


@dataclass(frozen=True, eq=False)
class Plane:
    """Infinite plane, or a rectangle centred on ``point`` when ``half_extent`` is given.

    The rectangle's first axis is horizontal (normal x world z, or world x for
    horizontal planes) and its second axis completes the in-plane frame.
    """
    point: np.ndarray
    normal: np.ndarray
    half_extent: Optional[Tuple[float, float]] = None

    def __post_init__(self):
        normal = np.asarray(self.normal, dtype=np.float64).reshape(3)
        length = np.linalg.norm(normal)
        if not length > 0:
            raise ConfigError("Plane normal must be nonzero")
        object.__setattr__(self, "point", np.asarray(self.point, dtype=np.float64).reshape(3))
        object.__setattr__(self, "normal", normal / length)
        if self.half_extent is not None:
            a, b = (float(x) for x in self.half_extent)
            if not (a > 0 and b > 0):
                raise ConfigError(f"Plane half extents must be positive, got {self.half_extent}")
            object.__setattr__(self, "half_extent", (a, b))

    @property
    def axes(self) -> Tuple[np.ndarray, np.ndarray]:
        first = np.cross(self.normal, [0.0, 0.0, 1.0])
        if np.linalg.norm(first) < 1e-9:
            first = np.array([1.0, 0.0, 0.0])
        first = first / np.linalg.norm(first)
        return first, np.cross(self.normal, first)

    def intersect(self, origins: np.ndarray, directions: np.ndarray) -> np.ndarray:
        """Ray parameter of the hit per ray, inf on a miss (rays need not be unit length)."""
        denom = directions @ self.normal
        with np.errstate(divide="ignore", invalid="ignore"):
            t = ((self.point - origins) @ self.normal) / denom
        hit = (np.abs(denom) > 0) & (t > HIT_EPSILON)
        if self.half_extent is not None:
            first, second = self.axes
            with np.errstate(invalid="ignore"):
                local = origins + np.where(hit, t, 0.0)[:, None] * directions - self.point
            hit &= (np.abs(local @ first) <= self.half_extent[0]) & (np.abs(local @ second) <= self.half_extent[1])
        return np.where(hit, t, np.inf)

    def normal_at(self, points: np.ndarray) -> np.ndarray:
        return np.broadcast_to(self.normal, np.shape(points)).copy()


@dataclass(frozen=True, eq=False)
class Sphere:
    center: np.ndarray
    radius: float

    def __post_init__(self):
        if not self.radius > 0:
            raise ConfigError(f"Sphere radius must be positive, got {self.radius}")
        object.__setattr__(self, "center", np.asarray(self.center, dtype=np.float64).reshape(3))

    def intersect(self, origins: np.ndarray, directions: np.ndarray) -> np.ndarray:
        """Smallest positive root of |o + t d - c|^2 = r^2, inf on a miss."""
        oc = origins - self.center
        a = np.einsum("ij,ij->i", directions, directions)
        b = 2.0 * np.einsum("ij,ij->i", directions, oc)
        c = np.einsum("ij,ij->i", oc, oc) - self.radius ** 2
        disc = b * b - 4.0 * a * c
        hit = disc >= 0
        root = np.sqrt(np.where(hit, disc, 0.0))
        # stable pair of roots: q / a and c / q
        q = -0.5 * (b + np.where(b >= 0, root, -root))
        with np.errstate(divide="ignore", invalid="ignore"):
            t1 = np.where(hit, q / a, np.inf)
            t2 = np.where(hit & (q != 0), c / q, np.inf)
        t1 = np.where(t1 > HIT_EPSILON, t1, np.inf)
        t2 = np.where(t2 > HIT_EPSILON, t2, np.inf)
        return np.minimum(t1, t2)

    def normal_at(self, points: np.ndarray) -> np.ndarray:
        n = points - self.center
        return n / np.linalg.norm(n, axis=-1, keepdims=True)


Surface = Union[Plane, Sphere]


@dataclass(frozen=True)
class LidarPattern:
    """Scan lines evenly spaced in elevation (line 0 on top) times a fixed azimuth step."""
    num_lines: int = 64
    elevation_min_deg: float = -24.8
    elevation_max_deg: float = 2.0
    azimuth_min_deg: float = -45.0
    azimuth_max_deg: float = 45.0
    azimuth_step_deg: float = 0.18
    jitter_sigma: float = 0.0

    def __post_init__(self):
        if self.num_lines < 1:
            raise ConfigError(f"LiDAR pattern needs at least one line, got {self.num_lines}")
        if not self.azimuth_step_deg > 0:
            raise ConfigError(f"Azimuth step must be positive, got {self.azimuth_step_deg}")
        if self.elevation_max_deg < self.elevation_min_deg or self.azimuth_max_deg < self.azimuth_min_deg:
            raise ConfigError("LiDAR pattern ranges must be ordered min <= max")
        if self.jitter_sigma < 0:
            raise ConfigError("Range jitter sigma must be non-negative")

    def directions(self) -> Tuple[np.ndarray, np.ndarray]:
        """Unit ray directions in the LiDAR frame and the line of each ray."""
        elevations = np.radians(np.linspace(self.elevation_max_deg, self.elevation_min_deg, self.num_lines))
        count = int(np.floor((self.azimuth_max_deg - self.azimuth_min_deg) / self.azimuth_step_deg + 1e-9)) + 1
        azimuths = np.radians(self.azimuth_min_deg + self.azimuth_step_deg * np.arange(count))
        phi, alpha = np.meshgrid(elevations, azimuths, indexing="ij")
        dirs = np.stack([np.cos(phi) * np.cos(alpha), np.cos(phi) * np.sin(alpha), np.sin(phi)], axis=-1)
        lines = np.repeat(np.arange(self.num_lines), count)
        return dirs.reshape(-1, 3), lines


def camera_pose_at(position: Sequence[float]) -> RigidTransform:
    """Forward-looking camera (optical axis along world x) at ``position``."""
    return RigidTransform(CAMERA_AXES, np.asarray(position, dtype=np.float64))


def lidar_pose_at(position: Sequence[float]) -> RigidTransform:
    return RigidTransform(np.eye(3), np.asarray(position, dtype=np.float64))


@dataclass(frozen=True, eq=False)
class SceneSpec:
    surfaces: Tuple[Surface, ...]
    lidar_pose: RigidTransform = field(default_factory=RigidTransform.identity)
    camera_pose: RigidTransform = field(default_factory=lambda: camera_pose_at((0.0, 0.0, 0.0)))
    pattern: LidarPattern = field(default_factory=LidarPattern)
    seed: int = 0
    intrinsics: Optional[CameraIntrinsics] = None

    def __post_init__(self):
        surfaces = tuple(self.surfaces)
        if not surfaces:
            raise ConfigError("A scene needs at least one surface")
        object.__setattr__(self, "surfaces", surfaces)

    @property
    def extrinsics(self) -> RigidTransform:
        """LiDAR -> camera."""
        return self.camera_pose.inverse().compose(self.lidar_pose)

    def shifted(self, offset: Sequence[float], seed: int) -> "SceneSpec":
        """Same scene with both sensors translated by ``offset`` (world meters)."""
        offset = np.asarray(offset, dtype=np.float64)
        return SceneSpec(
            self.surfaces,
            RigidTransform(self.lidar_pose.rotation, self.lidar_pose.translation + offset),
            RigidTransform(self.camera_pose.rotation, self.camera_pose.translation + offset),
            self.pattern,
            seed,
            self.intrinsics,
        )


@dataclass(frozen=True, eq=False)
class RenderedScan:
    scan: LidarScan
    surface_id: np.ndarray
    visible: np.ndarray


@dataclass(frozen=True, eq=False)
class TruthRender:
    depth: DenseDepthMap
    normals: NormalMap
    miss: np.ndarray
    surface_id: np.ndarray

    def as_sparse(self) -> SparseDepthMap:
        """Ground truth with missed pixels left empty."""
        return SparseDepthMap(np.where(self.miss, 0.0, self.depth.depth))


def cast(surfaces: Sequence[Surface], origins: np.ndarray, directions: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Nearest hit parameter and surface index per ray; index -1 and t = inf on a miss."""
    origins = np.broadcast_to(np.asarray(origins, dtype=np.float64), directions.shape)
    hits = np.stack([s.intersect(origins, directions) for s in surfaces], axis=0)
    surface_id = np.argmin(hits, axis=0)
    t = hits[surface_id, np.arange(directions.shape[0])]
    surface_id = np.where(np.isfinite(t), surface_id, -1)
    return t, surface_id


def render_scan(spec: SceneSpec) -> RenderedScan:
    """LiDAR returns of the scene with per-point surface id and camera visibility."""
    local_dirs, lines = spec.pattern.directions()
    world_dirs = spec.lidar_pose.rotate(local_dirs)
    origin = spec.lidar_pose.translation
    t, surface_id = cast(spec.surfaces, origin, world_dirs)
    hit = surface_id >= 0
    t, surface_id, local_dirs, world_dirs, lines = t[hit], surface_id[hit], local_dirs[hit], world_dirs[hit], lines[hit]

    if spec.pattern.jitter_sigma > 0:
        rng = np.random.default_rng(spec.seed)
        t = np.maximum(t + rng.normal(0.0, spec.pattern.jitter_sigma, size=t.shape), HIT_EPSILON)

    points_world = origin + t[:, None] * world_dirs
    camera = spec.camera_pose.translation
    to_point = points_world - camera
    distance = np.linalg.norm(to_point, axis=1)
    blocker_t, _ = cast(spec.surfaces, camera, to_point / distance[:, None])
    visible = blocker_t >= distance - VISIBILITY_TOLERANCE * np.maximum(distance, 1.0)

    scan = LidarScan(t[:, None] * local_dirs, lines, spec.pattern.num_lines)
    logger.debug("Rendered scan", points=len(scan), occluded=int((~visible).sum()))
    return RenderedScan(scan, surface_id, visible)


def render_truth(
    spec: SceneSpec,
    intr: CameraIntrinsics,
    camera_pose: Optional[RigidTransform] = None,
    max_range: float = 120.0,
) -> TruthRender:
    """Exact depth and camera-frame normal at every pixel centre."""
    pose = camera_pose or spec.camera_pose
    a, b = intr.normalized_grid()
    rays = np.stack([a, b, np.ones_like(a)], axis=-1).reshape(-1, 3)
    # camera-frame z of the ray is 1, so the hit parameter is the depth
    t, surface_id = cast(spec.surfaces, pose.translation, pose.rotate(rays))
    miss = surface_id < 0

    normals = np.full(rays.shape, np.nan)
    hit_idx = np.flatnonzero(~miss)
    for k, surface in enumerate(spec.surfaces):
        sel = hit_idx[surface_id[hit_idx] == k]
        if sel.size == 0:
            continue
        points = pose.translation + t[sel, None] * pose.rotate(rays[sel])
        n_cam = pose.inverse().rotate(surface.normal_at(points))
        facing_away = np.einsum("ij,ij->i", n_cam, rays[sel]) > 0
        n_cam[facing_away] *= -1.0
        normals[sel] = n_cam

    depth = np.where(miss, max_range, t).reshape(intr.shape)
    return TruthRender(
        DenseDepthMap(depth),
        NormalMap(normals.reshape(intr.shape + (3,))),
        miss.reshape(intr.shape),
        surface_id.reshape(intr.shape),
    )


def _floats(raw: str, count, key: str) -> np.ndarray:
    counts = (count,) if isinstance(count, int) else tuple(count)
    try:
        values = np.array([float(x) for x in raw.replace(",", " ").split()])
    except ValueError as e:
        raise ConfigError(f"Scene key {key} must hold numbers, got '{raw}'") from e
    if values.ndim != 1 or values.size not in counts:
        expected = " or ".join(str(c) for c in counts)
        raise ConfigError(f"Scene key {key} needs {expected} numbers, got {values.size}")
    return values


def parse_surfaces(raw: str) -> List[Surface]:
    surfaces: List[Surface] = []
    for entry in filter(None, (e.strip() for e in raw.split(";"))):
        kind, _, rest = entry.partition(" ")
        kind = kind.lower()
        if kind == "plane":
            v = _floats(rest, (6, 8), "SURFACES")
            extent = (float(v[6]), float(v[7])) if v.size == 8 else None
            surfaces.append(Plane(v[:3], v[3:6], half_extent=extent))
        elif kind == "sphere":
            v = _floats(rest, 4, "SURFACES")
            surfaces.append(Sphere(v[:3], float(v[3])))
        else:
            raise ConfigError(f"Unknown surface kind '{kind}' (expected plane or sphere)")
    return surfaces


SCENE_KEYS = {
    "SURFACES", "LIDAR_POSITION", "CAMERA_POSITION", "LINES", "ELEVATION_MIN_DEG", "ELEVATION_MAX_DEG",
    "AZIMUTH_MIN_DEG", "AZIMUTH_MAX_DEG", "AZIMUTH_STEP_DEG", "JITTER_SIGMA", "SEED",
    "WIDTH", "HEIGHT", "FOCAL", "PRINCIPAL_U", "PRINCIPAL_V", "FRAMES", "FRAME_SHIFT",
}


@dataclass(frozen=True, eq=False)
class SceneFile:
    spec: SceneSpec
    intrinsics: CameraIntrinsics
    frames: int
    frame_shift: np.ndarray

    def frame(self, index: int) -> SceneSpec:
        return self.spec.shifted(self.frame_shift * index, self.spec.seed + index)


def load_scene_spec(path: Path) -> SceneFile:
    """Parse a scene file (see module docstring)."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"Scene file not found: {path}")
    raw = {k.strip().upper(): v for k, v in dotenv_values(path).items()}
    unknown = set(raw) - SCENE_KEYS
    if unknown:
        raise ConfigError(f"Unknown scene keys in {path}: {sorted(unknown)}")
    if not raw.get("SURFACES"):
        raise ConfigError(f"Scene file {path} defines no SURFACES")

    def number(key: str, default: float) -> float:
        value = raw.get(key)
        if value is None or value == "":
            return default
        return float(_floats(value, 1, key)[0])

    pattern = LidarPattern(
        num_lines=int(number("LINES", 64)),
        elevation_min_deg=number("ELEVATION_MIN_DEG", -24.8),
        elevation_max_deg=number("ELEVATION_MAX_DEG", 2.0),
        azimuth_min_deg=number("AZIMUTH_MIN_DEG", -45.0),
        azimuth_max_deg=number("AZIMUTH_MAX_DEG", 45.0),
        azimuth_step_deg=number("AZIMUTH_STEP_DEG", 0.18),
        jitter_sigma=number("JITTER_SIGMA", 0.0),
    )
    width, height = int(number("WIDTH", 240)), int(number("HEIGHT", 120))
    focal = number("FOCAL", 120.0)
    intr = CameraIntrinsics(
        focal, focal, number("PRINCIPAL_U", width / 2.0), number("PRINCIPAL_V", height / 2.0), width, height
    )
    lidar_position = _floats(raw.get("LIDAR_POSITION") or "0 0 0", 3, "LIDAR_POSITION")
    camera_position = _floats(raw.get("CAMERA_POSITION") or "0 0 0", 3, "CAMERA_POSITION")
    spec = SceneSpec(
        surfaces=tuple(parse_surfaces(raw["SURFACES"])),
        lidar_pose=lidar_pose_at(lidar_position),
        camera_pose=camera_pose_at(camera_position),
        pattern=pattern,
        seed=int(number("SEED", 0)),
        intrinsics=intr,
    )
    frames = int(number("FRAMES", 1))
    if frames < 1:
        raise ConfigError(f"FRAMES must be at least 1, got {frames}")
    shift = _floats(raw.get("FRAME_SHIFT") or "0 0 0", 3, "FRAME_SHIFT")
    return SceneFile(spec, intr, frames, shift)
