import time
from dataclasses import dataclass, field, replace
from typing import Dict, List, Sequence, Tuple

import numpy as np
import structlog

from depth_completion.distance_transform import NearestField, nearest_field
from depth_completion.geometry import (
    CameraIntrinsics,
    LidarScan,
    ProjectedPoints,
    RigidTransform,
    SparseDepthMap,
    project_points,
    zbuffer,
)
from depth_completion.normals import (
    NormalMap,
    PointNormals,
    assign_pseudo_lines,
    build_range_image,
    estimate_normals,
    fill_range_image_normals,
    normals_to_camera,
)
from depth_completion.outlier import OutlierMask, PointSamples, SensorSpec, remove_outliers
from depth_completion.surface_model import DenseDepthMap, gaussian_smooth, residual_grid
from toolkit.errors import ConfigError, DegenerateInputError
from toolkit.evaluation import EvalReport, metrics
from toolkit.settings import PipelineConfig

logger = structlog.get_logger(__name__)

MIN_DEPTH = 1e-3

ABLATION_STEPS = (
    "original input",
    "+ outlier removal",
    "+ distance transform",
    "+ residual",
    "+ smooth",
)


@dataclass
class CompletionResult:
    """Everything one frame's completion produced, stage by stage."""
    dense: DenseDepthMap
    sparse: SparseDepthMap
    cleaned: SparseDepthMap
    mask: OutlierMask
    normals: NormalMap
    field: NearestField
    initial: DenseDepthMap
    corrected: DenseDepthMap
    timings_ms: Dict[str, float] = field(default_factory=dict)


@dataclass
class AblationRow:
    step: str
    report: EvalReport


class _StageTimer:
    def __init__(self):
        self.timings: Dict[str, float] = {}
        self._last = time.perf_counter()

    def lap(self, stage: str) -> None:
        now = time.perf_counter()
        self.timings[stage] = (now - self._last) * 1000.0
        self._last = now


def _project(scan: LidarScan, extrinsics: RigidTransform, intr: CameraIntrinsics, cfg: PipelineConfig):
    if len(scan) == 0:
        raise DegenerateInputError("Scan is empty")
    projected = project_points(scan.points, extrinsics, intr, cfg.max_range)
    if len(projected) == 0:
        raise DegenerateInputError("No scan point projects into the image")
    sparse, winners = zbuffer(projected, intr)
    return projected, sparse, winners


def _scan_normals(scan: LidarScan, projected: ProjectedPoints, cfg: PipelineConfig) -> PointNormals:
    """Normals for the in-frame points, from a range image of those points only.

    Scans without ring indices are binned by elevation over the whole scan first.
    """
    if not scan.has_lines:
        scan = assign_pseudo_lines(scan, pole_tolerance=cfg.pole_tolerance)
    in_frame = scan.subset(projected.point_ids)
    ri = build_range_image(
        in_frame, cfg.range_image_cols, point_ids=projected.point_ids, pole_tolerance=cfg.pole_tolerance
    )
    normals = estimate_normals(ri, max_gap=cfg.normal_max_gap, smoothing=cfg.normal_smoothing)
    if cfg.fill_normals_in_range_image:
        normals = fill_range_image_normals(ri, normals, max_gap=cfg.normal_max_gap)
    return normals


def _clean(scan, projected, sparse, winners, intr, cfg) -> Tuple[SparseDepthMap, OutlierMask]:
    if not cfg.outlier_removal:
        return sparse, OutlierMask.nothing_removed(sparse)
    samples = PointSamples.from_projection(scan, projected, winners, cfg.pole_tolerance)
    spec = SensorSpec(intr.width, intr.height, scan.num_lines, len(samples))
    return remove_outliers(sparse, samples, spec, cfg.epsilon)


def clean_sparse(
    scan: LidarScan,
    extrinsics: RigidTransform,
    intr: CameraIntrinsics,
    cfg: PipelineConfig = PipelineConfig(),
) -> Tuple[SparseDepthMap, OutlierMask]:
    """Project the scan and drop occlusion outliers, without completing."""
    projected, sparse, winners = _project(scan, extrinsics, intr, cfg)
    return _clean(scan, projected, sparse, winners, intr, cfg)


def complete(
    scan: LidarScan,
    extrinsics: RigidTransform,
    intr: CameraIntrinsics,
    cfg: PipelineConfig = PipelineConfig(),
) -> CompletionResult:
    """Dense depth for the camera image from one LiDAR scan.

    Normals are estimated on the full in-frame scan, outliers are removed, each
    pixel takes its nearest kept seed's depth plus the tangent-plane residual,
    and the result is smoothed.
    """
    timer = _StageTimer()
    projected, sparse, winners = _project(scan, extrinsics, intr, cfg)
    point_normals = _scan_normals(scan, projected, cfg)
    timer.lap("normals")

    cleaned, mask = _clean(scan, projected, sparse, winners, intr, cfg)
    if cleaned.occupied == 0:
        raise DegenerateInputError("Outlier removal left no depth seeds")
    timer.lap("outliers")

    normal_map = normals_to_camera(point_normals, extrinsics, cleaned, intr)
    nearest = nearest_field(cleaned, normal_map, cfg.dt_metric)
    timer.lap("distance_transform")

    initial = DenseDepthMap(nearest.seed_depth)
    depth = nearest.seed_depth + residual_grid(nearest, intr, cfg.denom_guard)
    # seed depths never exceed max_range, so the residual is the only source of out-of-range values
    corrected = DenseDepthMap(np.clip(depth, MIN_DEPTH, cfg.max_range))
    timer.lap("residual")

    dense = gaussian_smooth(corrected, cfg.smooth_kernel, cfg.smooth_sigma)
    if cfg.preserve_seeds:
        dense = DenseDepthMap(np.where(cleaned.valid, cleaned.depth, dense.depth))
    timer.lap("smooth")

    logger.debug(
        "Completed frame",
        in_frame=len(projected),
        occupied=sparse.occupied,
        removed=mask.removed,
        normals=int(normal_map.valid.sum()),
        **{f"{k}_ms": round(v, 3) for k, v in timer.timings.items()},
    )
    return CompletionResult(
        dense=dense,
        sparse=sparse,
        cleaned=cleaned,
        mask=mask,
        normals=normal_map,
        field=nearest,
        initial=initial,
        corrected=corrected,
        timings_ms=timer.timings,
    )


def complete_multi(
    scan: LidarScan,
    cameras: Sequence[Tuple[str, RigidTransform, CameraIntrinsics]],
    cfg: PipelineConfig = PipelineConfig(),
) -> Dict[str, CompletionResult]:
    """Complete every camera of a rig from one shared scan."""
    if not cameras:
        raise ConfigError("complete_multi needs at least one camera")
    names = [name for name, _, _ in cameras]
    if len(set(names)) != len(names):
        raise ConfigError(f"Camera names must be unique, got {names}")
    return {name: complete(scan, extrinsics, intr, cfg) for name, extrinsics, intr in cameras}


def ablation_trace(
    scan: LidarScan,
    extrinsics: RigidTransform,
    intr: CameraIntrinsics,
    cfg: PipelineConfig,
    ground_truth: SparseDepthMap,
) -> List[AblationRow]:
    """Metrics after each pipeline step, in pipeline order."""
    result = complete(scan, extrinsics, intr, cfg)
    crop = cfg.devkit_crop
    stages = [
        metrics(result.sparse, ground_truth, devkit_crop=crop),
        replace(metrics(result.cleaned, ground_truth, devkit_crop=crop),
                kept_points=result.mask.num_points - result.mask.removed, total_points=result.mask.num_points),
        metrics(result.initial, ground_truth, devkit_crop=crop),
        metrics(result.corrected, ground_truth, devkit_crop=crop),
        metrics(result.dense, ground_truth, devkit_crop=crop),
    ]
    return [AblationRow(step, report) for step, report in zip(ABLATION_STEPS, stages)]
