import time

import numpy as np
import pytest

from dataset_io.calibration import read_calibration
from dataset_io.depth_png import read_depth_png
from dataset_io.frames import list_frames, pair_frames
from dataset_io.lidar_bin import read_lidar_bin
from depth_completion.geometry import CameraIntrinsics, LidarScan
from depth_completion.pipeline import (
    ABLATION_STEPS,
    ablation_trace,
    clean_sparse,
    complete,
    complete_multi,
)
from toolkit.errors import ConfigError, DegenerateInputError
from toolkit.evaluation import EvalReport, metrics
from toolkit.settings import PipelineConfig, settings
from toolkit.synthscene import LidarPattern, Plane, SceneSpec, camera_pose_at, lidar_pose_at, render_scan, render_truth

NO_SMOOTH = PipelineConfig(smooth_kernel=1)


def run(spec: SceneSpec, cfg: PipelineConfig = PipelineConfig()):
    rendered = render_scan(spec)
    result = complete(rendered.scan, spec.extrinsics, spec.intrinsics, cfg)
    truth = render_truth(spec, spec.intrinsics, max_range=cfg.max_range)
    return rendered, result, truth


def test_fronto_parallel_wall_is_recovered(intrinsics, small_pattern):
    spec = SceneSpec(
        (Plane((10.0, 0.0, 0.0), (-1.0, 0.0, 0.0)),),
        lidar_pose=lidar_pose_at((0.0, 0.0, 0.2)),
        pattern=small_pattern,
        intrinsics=intrinsics,
    )
    _, result, truth = run(spec, NO_SMOOTH)
    assert result.dense.shape == intrinsics.shape
    err = np.abs(result.dense.depth - truth.depth.depth)
    assert np.median(err) < 1e-3
    assert err.max() < 0.1
    assert result.mask.removed == 0


def test_seed_pixels_before_smoothing(tilted_wall_scene):
    _, result, truth = run(tilted_wall_scene, NO_SMOOTH)
    seeds = result.cleaned.valid
    np.testing.assert_array_equal(result.initial.depth[seeds], result.cleaned.depth[seeds])
    # seed pixels move from the measured position to the pixel centre along the tangent plane
    moved = np.abs(result.corrected.depth[seeds] - result.cleaned.depth[seeds])
    assert moved.max() < 0.5
    centre_err = np.abs(result.corrected.depth[seeds] - truth.depth.depth[seeds])
    raw_err = np.abs(result.cleaned.depth[seeds] - truth.depth.depth[seeds])
    assert centre_err.mean() < raw_err.mean()

    _, kept, _ = run(tilted_wall_scene, PipelineConfig(preserve_seeds=True))
    np.testing.assert_array_equal(kept.dense.depth[seeds], kept.cleaned.depth[seeds])


def test_tilted_wall_is_recovered_near_seeds(tilted_wall_scene):
    _, result, truth = run(tilted_wall_scene, NO_SMOOTH)
    assert result.normals.valid.sum() > 0.9 * result.cleaned.occupied
    err = np.abs(result.corrected.depth - truth.depth.depth)
    near = result.field.distance <= 2.0
    assert near.mean() > 0.5
    assert err[near].mean() <= 1e-3


def test_dense_output_is_finite_and_in_range(occlusion_scene):
    _, result, _ = run(occlusion_scene(baseline=0.4))
    depth = result.dense.depth
    assert np.all(np.isfinite(depth))
    assert depth.min() > 0 and depth.max() <= PipelineConfig().max_range
    assert set(result.timings_ms) == {"normals", "outliers", "distance_transform", "residual", "smooth"}


def test_residual_beats_nearest_initial_on_tilted_walls(tilted_wall_scene):
    _, result, truth = run(tilted_wall_scene)
    gt = truth.as_sparse()
    initial = metrics(result.initial, gt)
    corrected = metrics(result.corrected, gt)
    assert corrected.mae < initial.mae
    assert corrected.rmse < initial.rmse


def test_ablation_trace_on_an_occlusion_scene(occlusion_scene):
    spec = occlusion_scene(baseline=0.5)
    rendered = render_scan(spec)
    gt = render_truth(spec, spec.intrinsics).as_sparse()
    rows = ablation_trace(rendered.scan, spec.extrinsics, spec.intrinsics, PipelineConfig(), gt)

    assert [row.step for row in rows] == list(ABLATION_STEPS)
    raw, cleaned = rows[0].report, rows[1].report
    assert raw.rmse > cleaned.rmse
    assert cleaned.keep_ratio < 1.0
    assert cleaned.density < raw.density < 1.0
    for row in rows[2:]:
        assert row.report.density == 1.0


def test_ablation_trace_on_a_tilted_wall(tilted_wall_scene):
    spec = tilted_wall_scene
    rendered = render_scan(spec)
    gt = render_truth(spec, spec.intrinsics).as_sparse()
    rows = {row.step: row.report for row in ablation_trace(rendered.scan, spec.extrinsics, spec.intrinsics, NO_SMOOTH, gt)}
    assert rows["+ residual"].mae < rows["+ distance transform"].mae
    assert rows["+ outlier removal"].keep_ratio == 1.0


def test_disabling_outlier_removal_keeps_every_seed(occlusion_scene):
    spec = occlusion_scene(baseline=0.5)
    _, result, _ = run(spec, PipelineConfig(outlier_removal=False))
    assert result.mask.removed == 0
    np.testing.assert_array_equal(result.cleaned.depth, result.sparse.depth)


def test_clean_sparse_matches_the_pipeline_stage(occlusion_scene):
    spec = occlusion_scene(baseline=0.4)
    rendered = render_scan(spec)
    cleaned, mask = clean_sparse(rendered.scan, spec.extrinsics, spec.intrinsics)
    result = complete(rendered.scan, spec.extrinsics, spec.intrinsics)
    np.testing.assert_array_equal(cleaned.depth, result.cleaned.depth)
    np.testing.assert_array_equal(mask.removed_ids, result.mask.removed_ids)


def test_complete_is_deterministic(occlusion_scene):
    spec = occlusion_scene(baseline=0.3)
    rendered = render_scan(spec)
    a = complete(rendered.scan, spec.extrinsics, spec.intrinsics)
    b = complete(rendered.scan, spec.extrinsics, spec.intrinsics)
    np.testing.assert_array_equal(a.dense.depth, b.dense.depth)


def test_complete_multi_runs_every_camera(tilted_wall_scene):
    spec = tilted_wall_scene
    right = SceneSpec(spec.surfaces, spec.lidar_pose, camera_pose_at((0.0, -0.5, 0.0)), spec.pattern,
                      intrinsics=spec.intrinsics)
    scan = render_scan(spec).scan
    results = complete_multi(scan, [
        ("left", spec.extrinsics, spec.intrinsics),
        ("right", right.extrinsics, right.intrinsics),
    ])
    assert set(results) == {"left", "right"}
    alone = complete(scan, spec.extrinsics, spec.intrinsics)
    np.testing.assert_array_equal(results["left"].dense.depth, alone.dense.depth)
    assert not np.array_equal(results["left"].sparse.depth, results["right"].sparse.depth)


def test_complete_multi_rejects_bad_camera_lists(tilted_wall_scene):
    spec = tilted_wall_scene
    scan = render_scan(spec).scan
    with pytest.raises(ConfigError):
        complete_multi(scan, [])
    with pytest.raises(ConfigError):
        complete_multi(scan, [("cam", spec.extrinsics, spec.intrinsics), ("cam", spec.extrinsics, spec.intrinsics)])


def test_scans_that_miss_the_image_are_rejected(tilted_wall_scene):
    spec = tilted_wall_scene
    with pytest.raises(DegenerateInputError):
        complete(LidarScan(np.zeros((0, 3))), spec.extrinsics, spec.intrinsics)
    behind = LidarScan(np.array([[-10.0, 0.0, 0.0], [-10.0, 1.0, 0.0], [-10.0, 0.0, 1.0]]))
    with pytest.raises(DegenerateInputError):
        complete(behind, spec.extrinsics, spec.intrinsics)


@pytest.mark.benchmark
def test_kitti_sized_frame_completes_within_budget():
    intr = CameraIntrinsics(721.5, 721.5, 609.6, 172.9, 1242, 375)
    pattern = LidarPattern(azimuth_min_deg=-40.0, azimuth_max_deg=40.0)
    spec = SceneSpec(
        (Plane((30.0, 0.0, 0.0), (-1.0, 0.0, 0.0)), Plane((0.0, 0.0, -1.7), (0.0, 0.0, 1.0))),
        lidar_pose=lidar_pose_at((0.27, 0.0, 0.08)),
        pattern=pattern,
        intrinsics=intr,
    )
    scan = render_scan(spec).scan
    complete(scan, spec.extrinsics, intr)
    times = []
    for _ in range(5):
        start = time.perf_counter()
        result = complete(scan, spec.extrinsics, intr)
        times.append((time.perf_counter() - start) * 1000.0)
    assert result.sparse.occupied > 10_000
    assert np.median(times) <= 100.0


@pytest.mark.kitti
def test_kitti_validation_matches_published_errors():
    """Expects ``velodyne/``, ``groundtruth/`` and ``calib/`` under the KITTI root, as ``synth`` writes them."""
    root = settings.kitti_root
    scans = list_frames(root / "velodyne", ".bin")
    gts = list_frames(root / "groundtruth", ".png")
    stems = pair_frames(scans, gts, names=("velodyne", "groundtruth"))
    intr, extrinsics = read_calibration(root / "calib" / "calib_cam_to_cam.txt", root / "calib" / "calib_velo_to_cam.txt")
    cfg = PipelineConfig(devkit_crop=True)
    totals = {step: EvalReport() for step in ABLATION_STEPS}
    without = EvalReport()
    for stem in stems:
        scan = read_lidar_bin(scans[stem])
        gt = read_depth_png(gts[stem])
        for row in ablation_trace(scan, extrinsics, intr, cfg, gt):
            totals[row.step] = totals[row.step].merge(row.report)
        plain = complete(scan, extrinsics, intr, cfg.with_overrides(outlier_removal=False))
        without = without.merge(metrics(plain.dense, gt, devkit_crop=True))

    raw, cleaned, full = totals["original input"], totals["+ outlier removal"], totals["+ smooth"]
    assert raw.rmse == pytest.approx(1595.24, rel=0.05)
    assert raw.mae == pytest.approx(202.16, rel=0.05)
    assert cleaned.rmse == pytest.approx(662.87, rel=0.05)
    assert cleaned.mae == pytest.approx(81.68, rel=0.05)
    assert cleaned.keep_ratio == pytest.approx(0.94, abs=0.01)
    assert full.rmse == pytest.approx(1319.12, rel=0.05)
    assert full.mae == pytest.approx(301.45, rel=0.05)
    assert without.rmse == pytest.approx(1629.38, rel=0.05)
    assert without.mae == pytest.approx(400.09, rel=0.05)


def test_pole_tolerance_reaches_the_spherical_conversion(tilted_wall_scene):
    # a tolerance above 1 puts every point on the pole: no azimuth spread, so no normals
    _, result, _ = run(tilted_wall_scene, PipelineConfig(smooth_kernel=1, pole_tolerance=2.0))
    assert not result.normals.valid.any()
    np.testing.assert_array_equal(result.corrected.depth, result.initial.depth)
