import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from depth_completion.geometry import SparseDepthMap, project_points, zbuffer
from depth_completion.outlier import (
    OutlierMask,
    PointSamples,
    SensorSpec,
    azimuth_follows_columns,
    neighbor_pairs,
    neighborhood,
    outlier_indices,
    remove_outliers,
)
from toolkit.errors import SensorSpecError
from toolkit.synthscene import Plane, SceneSpec, camera_pose_at, lidar_pose_at, render_scan, render_truth

BOARD = 1


def random_samples(seed: int, n: int, width: int = 40, height: int = 30) -> PointSamples:
    rng = np.random.default_rng(seed)
    return PointSamples(
        point_ids=np.arange(n) * 3 + 1,
        u=rng.uniform(0, width, n),
        v=rng.uniform(0, height, n),
        theta=rng.uniform(-0.5, 0.5, n),
        phi=rng.uniform(-0.3, 0.3, n),
        z=rng.uniform(1.0, 30.0, n),
    )


def permuted(samples: PointSamples, order: np.ndarray) -> PointSamples:
    return PointSamples(*(getattr(samples, name)[order] for name in ("point_ids", "u", "v", "theta", "phi", "z")))


def clean_scene(spec: SceneSpec):
    """Project a rendered scene, run the filter, and return what the checks need."""
    intr = spec.intrinsics
    rendered = render_scan(spec)
    projected = project_points(rendered.scan.points, spec.extrinsics, intr)
    sparse, winners = zbuffer(projected, intr)
    samples = PointSamples.from_projection(rendered.scan, projected, winners)
    sensor = SensorSpec(intr.width, intr.height, rendered.scan.num_lines, len(samples))
    cleaned, mask = remove_outliers(sparse, samples, sensor, epsilon=1.0)
    return rendered, samples, sensor, sparse, cleaned, mask


@given(seed=st.integers(0, 2 ** 32 - 1), n=st.integers(0, 120))
def test_neighbor_pairs_match_brute_force(seed, n):
    samples = random_samples(seed, n)
    spec = SensorSpec(40, 30, 8, max(n, 1))
    i, j = neighbor_pairs(samples.u, samples.v, spec)
    found = set(zip(i.tolist(), j.tolist()))
    expected = {(a, b) for a in range(n) for b in neighborhood(a, samples.u, samples.v, spec).tolist()}
    assert found == expected
    assert len(found) == len(i)


@given(seed=st.integers(0, 2 ** 32 - 1), n=st.integers(1, 150))
def test_removal_does_not_depend_on_point_order(seed, n):
    samples = random_samples(seed, n)
    spec = SensorSpec(40, 30, 8, n)
    flagged = samples.point_ids[outlier_indices(samples, spec)]
    order = np.random.default_rng(seed + 1).permutation(n)
    shuffled = permuted(samples, order)
    flagged_shuffled = shuffled.point_ids[outlier_indices(shuffled, spec)]
    np.testing.assert_array_equal(np.sort(flagged), np.sort(flagged_shuffled))


@given(seed=st.integers(0, 2 ** 32 - 1), n=st.integers(1, 150))
def test_every_removed_point_has_a_shallower_reordered_neighbour(seed, n):
    samples = random_samples(seed, n)
    spec = SensorSpec(40, 30, 8, n)
    flagged = set(outlier_indices(samples, spec, epsilon=1.0).tolist())
    for i in range(n):
        near = neighborhood(i, samples.u, samples.v, spec)
        witnesses = [
            j for j in near
            if samples.z[i] > samples.z[j] + 1.0
            and ((samples.u[i] - samples.u[j]) * (samples.theta[i] - samples.theta[j]) < 0
                 or (samples.v[i] - samples.v[j]) * (samples.phi[j] - samples.phi[i]) < 0)
        ]
        assert (i in flagged) == bool(witnesses)
        if near.size and samples.z[i] <= samples.z[near].min():
            assert i not in flagged


def test_far_point_seen_through_a_near_one_is_removed():
    # i is farther, right of j in the image but left of j for the LiDAR
    samples = PointSamples(
        point_ids=np.array([10, 11]),
        u=np.array([10.6, 10.0]),
        v=np.array([5.0, 5.0]),
        theta=np.array([0.10, 0.12]),
        phi=np.zeros(2),
        z=np.array([20.0, 5.0]),
    )
    spec = SensorSpec(20, 10, 10, 2)
    assert spec.half_widths == (100.0, 1.0)
    np.testing.assert_array_equal(outlier_indices(samples, spec), [0])

    same_order = PointSamples(samples.point_ids, samples.u, samples.v, np.array([0.12, 0.10]), samples.phi, samples.z)
    assert outlier_indices(same_order, spec).size == 0

    shallow = PointSamples(samples.point_ids, samples.u, samples.v, samples.theta, samples.phi, np.array([5.9, 5.0]))
    assert outlier_indices(shallow, spec, epsilon=1.0).size == 0


def test_rows_are_compared_against_depression_angle():
    # i sits below j in the image and below j for the LiDAR: consistent, nothing removed
    samples = PointSamples(
        point_ids=np.array([0, 1]),
        u=np.array([5.0, 5.0]),
        v=np.array([6.0, 5.0]),
        theta=np.zeros(2),
        phi=np.array([-0.02, 0.0]),
        z=np.array([20.0, 5.0]),
    )
    spec = SensorSpec(20, 10, 2, 2)
    assert outlier_indices(samples, spec).size == 0
    flipped = PointSamples(samples.point_ids, samples.u, samples.v, samples.theta, np.array([0.02, 0.0]), samples.z)
    np.testing.assert_array_equal(outlier_indices(flipped, spec), [0])


def test_sensor_spec_validation():
    with pytest.raises(SensorSpecError):
        SensorSpec(0, 10, 64, 100)
    with pytest.raises(SensorSpecError):
        SensorSpec(10, 10, 64, 0)
    samples = random_samples(0, 5)
    with pytest.raises(SensorSpecError):
        outlier_indices(samples, SensorSpec(40, 30, 8, 6))


def test_mask_image_and_keep_ratio():
    depth = np.array([[0.0, 4.0, 9.0]])
    sparse = SparseDepthMap(depth, np.array([[-1, 0, 1]]))
    samples = PointSamples(
        point_ids=np.array([0, 1]),
        u=np.array([1.2, 2.1]),
        v=np.array([0.5, 0.5]),
        theta=np.array([0.2, 0.1]),
        phi=np.zeros(2),
        z=np.array([4.0, 9.0]),
    )
    spec = SensorSpec(3, 1, 1, 2)
    cleaned, mask = remove_outliers(sparse, samples, spec)
    np.testing.assert_array_equal(mask.removed_ids, [1])
    assert mask.keep_ratio == 1.0 - 1 / 2
    np.testing.assert_array_equal(mask.to_image(), [[0, 0, 255]])
    assert mask.to_image().dtype == np.uint8
    assert cleaned.occupied == 1 and cleaned.source_id[0, 2] == -1

    untouched = OutlierMask.nothing_removed(sparse)
    assert untouched.removed == 0 and untouched.keep_ratio == 1.0


def test_single_surface_scenes_keep_every_point(intrinsics, small_pattern, tilted_wall_scene):
    wall = SceneSpec(
        (Plane((20.0, 0.0, 0.0), (-1.0, 0.0, 0.0)),),
        lidar_pose=lidar_pose_at((0.0, 0.0, 0.3)),
        camera_pose=camera_pose_at((0.0, 0.0, 0.0)),
        pattern=small_pattern,
        intrinsics=intrinsics,
    )
    for spec in (wall, tilted_wall_scene):
        rendered, _, _, sparse, cleaned, mask = clean_scene(spec)
        assert rendered.visible.all()
        assert mask.keep_ratio == 1.0
        assert cleaned.occupied == sparse.occupied


def test_occlusion_outliers_match_camera_visibility(occlusion_scene):
    """Points whose whole neighbourhood window lies on the board: flagged exactly when the camera cannot see them."""
    rng = np.random.default_rng(7)
    true_pos = false_pos = false_neg = 0
    for k in range(20):
        half = tuple(rng.uniform(0.8, 1.2, 2))
        spec = occlusion_scene(baseline=float(rng.uniform(0.2, 0.5)), board=half, seed=k)
        rendered, samples, sensor, sparse, cleaned, mask = clean_scene(spec)
        truth = render_truth(spec, spec.intrinsics).surface_id

        hu, hv = sensor.half_widths
        du, dv = math.ceil(hu), math.ceil(hv)
        height, width = truth.shape
        occluded = ~rendered.visible[samples.point_ids]
        flagged = np.isin(samples.point_ids, mask.removed_ids)
        for idx in range(len(samples)):
            row, col = int(samples.v[idx]), int(samples.u[idx])
            if row - dv < 0 or row + dv >= height or col - du < 0 or col + du >= width:
                continue
            if not np.all(truth[row - dv:row + dv + 1, col - du:col + du + 1] == BOARD):
                continue
            true_pos += bool(occluded[idx] and flagged[idx])
            false_pos += bool(flagged[idx] and not occluded[idx])
            false_neg += bool(occluded[idx] and not flagged[idx])

    assert true_pos > 0
    assert true_pos / (true_pos + false_pos) >= 0.95
    assert true_pos / (true_pos + false_neg) >= 0.95


def test_filter_reduces_foreground_errors(occlusion_scene):
    spec = occlusion_scene(baseline=0.5)
    rendered, samples, _, sparse, cleaned, mask = clean_scene(spec)
    occluded_ids = set(np.flatnonzero(~rendered.visible).tolist())
    kept_ids = set(cleaned.source_id[cleaned.valid].tolist())
    before = len(occluded_ids & set(sparse.source_id[sparse.valid].tolist()))
    after = len(occluded_ids & kept_ids)
    assert before > 0
    assert after < before
    assert mask.removed > 0
    assert 0.9 < mask.keep_ratio < 1.0


def test_forward_mounting_keeps_azimuth_and_columns_in_step(tilted_wall_scene):
    _, samples, _, _, _, _ = clean_scene(tilted_wall_scene)
    assert azimuth_follows_columns(samples)
    mirrored = PointSamples(samples.point_ids, samples.u, samples.v, -samples.theta, samples.phi, samples.z)
    assert not azimuth_follows_columns(mirrored)
    assert azimuth_follows_columns(random_samples(0, 1))
