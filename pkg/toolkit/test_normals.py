import numpy as np
import pytest

from depth_completion.geometry import (
    CameraIntrinsics,
    LidarScan,
    RigidTransform,
    SparseDepthMap,
    from_spherical_many,
    to_spherical_many,
)
from depth_completion.normals import (
    PointNormals,
    RangeImage,
    assign_pseudo_lines,
    build_range_image,
    elevation_lines,
    estimate_normals,
    fill_range_image_normals,
    normals_to_camera,
    spherical_basis,
)
from toolkit.errors import DegenerateInputError
from toolkit.synthscene import LidarPattern, Plane, SceneSpec, Sphere, render_scan


def square_pattern(half_deg: float, step_deg: float) -> LidarPattern:
    """Same angular step in elevation and azimuth."""
    lines = int(round(2 * half_deg / step_deg)) + 1
    return LidarPattern(
        num_lines=lines,
        elevation_min_deg=-half_deg,
        elevation_max_deg=half_deg,
        azimuth_min_deg=-half_deg,
        azimuth_max_deg=half_deg,
        azimuth_step_deg=step_deg,
    )


def scan_normals(surfaces, pattern: LidarPattern, smoothing: bool = True):
    rendered = render_scan(SceneSpec(tuple(surfaces), pattern=pattern))
    # one range-image column per azimuth step; every ray hits something, so the span is the pattern's
    cols = pattern.num_lines
    ri = build_range_image(rendered.scan, cols=cols)
    return rendered, estimate_normals(ri, max_gap=3, smoothing=smoothing)


def angle_deg(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    cos = np.clip(np.einsum("ij,ij->i", a, b), -1.0, 1.0)
    return np.degrees(np.arccos(cos))


def test_sphere_around_the_sensor_gives_radial_normals():
    pattern = square_pattern(10.0, 0.5)
    rendered, normals = scan_normals([Sphere((0.0, 0.0, 0.0), 7.0)], pattern)
    points = rendered.scan.points
    assert normals.valid.all()
    expected = -points / np.linalg.norm(points, axis=1, keepdims=True)
    np.testing.assert_allclose(normals.normals, expected, atol=1e-6)


def test_plane_normals_match_the_analytic_normal():
    pattern = square_pattern(10.0, 0.2)
    rendered, normals = scan_normals([Plane((5.0, 0.0, 0.0), (-1.0, 0.0, 0.0))], pattern)
    assert len(rendered.scan) == 101 * 101
    ok = normals.valid
    assert ok.mean() > 0.99
    expected = np.tile([-1.0, 0.0, 0.0], (int(ok.sum()), 1))
    assert np.median(angle_deg(normals.normals[ok], expected)) <= 0.1


def test_plane_normals_do_not_depend_on_plane_distance():
    pattern = square_pattern(10.0, 0.2)
    _, near = scan_normals([Plane((5.0, 0.0, 0.0), (-1.0, 0.0, 0.0))], pattern)
    _, far = scan_normals([Plane((20.0, 0.0, 0.0), (-1.0, 0.0, 0.0))], pattern)
    both = near.valid & far.valid
    assert np.median(angle_deg(near.normals[both], far.normals[both])) <= 1.0


def test_tilted_plane_normals():
    yaw, pitch = np.radians(25.0), np.radians(-15.0)
    normal = np.array([-np.cos(pitch) * np.cos(yaw), np.cos(pitch) * np.sin(yaw), np.sin(pitch)])
    pattern = square_pattern(10.0, 0.2)
    _, normals = scan_normals([Plane((8.0, 0.0, 0.0), normal)], pattern)
    ok = normals.valid
    expected = np.tile(normal, (int(ok.sum()), 1))
    assert np.median(angle_deg(normals.normals[ok], expected)) <= 0.5


def test_sphere_normal_error_shrinks_with_denser_sampling():
    sphere = Sphere((10.0, 0.0, 0.0), 4.0)
    wall = Plane((40.0, 0.0, 0.0), (-1.0, 0.0, 0.0))
    errors = []
    for step in (0.8, 0.2):
        rendered, normals = scan_normals([sphere, wall], square_pattern(20.0, step))
        on_sphere = (rendered.surface_id == 0) & normals.valid
        points = rendered.scan.points[on_sphere]
        expected = (points - sphere.center) / sphere.radius
        errors.append(np.median(angle_deg(normals.normals[on_sphere], expected)))
    assert errors[1] < errors[0]
    assert errors[1] <= 2.0


def test_emitted_normals_are_unit_and_face_the_sensor():
    sphere = Sphere((12.0, 2.0, -1.0), 3.0)
    wall = Plane((30.0, 0.0, 0.0), (-1.0, 0.2, 0.1))
    rendered, normals = scan_normals([sphere, wall], square_pattern(20.0, 0.5))
    ok = normals.valid
    n = normals.normals[ok]
    np.testing.assert_allclose(np.linalg.norm(n, axis=1), 1.0, atol=1e-6)
    assert np.all(np.einsum("ij,ij->i", n, rendered.scan.points[ok]) <= 0)


def test_without_smoothing_plane_normals_stay_accurate():
    pattern = square_pattern(10.0, 0.2)
    _, normals = scan_normals([Plane((5.0, 0.0, 0.0), (-1.0, 0.0, 0.0))], pattern, smoothing=False)
    ok = normals.valid
    expected = np.tile([-1.0, 0.0, 0.0], (int(ok.sum()), 1))
    assert np.median(angle_deg(normals.normals[ok], expected)) <= 0.1


def test_spherical_basis_is_a_rotation_whose_first_column_points_outward():
    theta = np.array([0.0, 0.4, -1.2])
    phi = np.array([0.0, -0.3, 0.7])
    basis = spherical_basis(theta, phi)
    for k in range(3):
        np.testing.assert_allclose(basis[k] @ basis[k].T, np.eye(3), atol=1e-12)
        assert np.linalg.det(basis[k]) == pytest.approx(1.0)
    np.testing.assert_allclose(basis[..., :, 0], from_spherical_many(np.ones(3), theta, phi), atol=1e-12)


def test_pseudo_lines_recover_ring_indices():
    pattern = square_pattern(8.0, 1.0)
    rendered = render_scan(SceneSpec((Plane((6.0, 0.0, 0.0), (-1.0, 0.0, 0.0)),), pattern=pattern))
    bare = LidarScan(rendered.scan.points, None, pattern.num_lines)
    assert not bare.has_lines
    binned = assign_pseudo_lines(bare)
    np.testing.assert_array_equal(binned.line_index, rendered.scan.line_index)


def test_elevation_lines_edge_cases():
    assert elevation_lines(np.zeros(0), 4).size == 0
    np.testing.assert_array_equal(elevation_lines(np.full(3, 0.1), 4), [0, 0, 0])
    np.testing.assert_array_equal(elevation_lines(np.array([0.3, 0.0, -0.3]), 3), [0, 1, 2])


def test_range_image_collisions_keep_the_nearer_point():
    points = np.array([[10.0, 0.0, 0.0], [5.0, 0.0, 0.0], [10.0, 1.0, 0.0], [10.0, -1.0, 0.0]])
    scan = LidarScan(points, np.zeros(4, dtype=np.int64), 1)
    ri = build_range_image(scan, cols=4)
    assert ri.occupied.sum() == 3
    kept = set(ri.point_id[ri.occupied].tolist())
    assert 1 in kept and 0 not in kept


def test_range_image_and_normals_reject_degenerate_input():
    with pytest.raises(DegenerateInputError):
        build_range_image(LidarScan(np.zeros((0, 3))))
    scan = LidarScan(np.array([[10.0, 0.0, 0.0], [10.0, 1.0, 0.0]]), np.zeros(2, dtype=np.int64), 1)
    with pytest.raises(DegenerateInputError):
        build_range_image(scan, cols=2)
    with pytest.raises(DegenerateInputError):
        estimate_normals(build_range_image(scan, cols=4))


def test_range_image_fill_copies_a_neighbour_normal():
    pattern = square_pattern(5.0, 0.5)
    rendered = render_scan(SceneSpec((Plane((5.0, 0.0, 0.0), (-1.0, 0.0, 0.0)),), pattern=pattern))
    ri = build_range_image(rendered.scan, cols=pattern.num_lines)
    normals = estimate_normals(ri)
    holed = normals.normals.copy()
    victim = int(ri.point_id[5, 5])
    holed[victim] = np.nan
    filled = fill_range_image_normals(ri, PointNormals(holed), max_gap=2)
    assert filled.valid[victim]
    assert filled.valid.sum() == normals.valid.sum()
    np.testing.assert_allclose(filled.normals[victim], [-1.0, 0.0, 0.0], atol=1e-3)


def test_cells_without_a_horizontal_neighbour_get_no_normal():
    rows, cols = np.mgrid[0:5, 0:12]
    occupied = (cols <= 5) | (cols == 11)
    theta = np.where(occupied, cols * 0.01, np.nan)
    phi = np.where(occupied, (2 - rows) * 0.01, np.nan)
    r = np.where(occupied, 7.0, np.nan)
    ids = np.full(occupied.shape, -1)
    ids[occupied] = np.arange(occupied.sum())
    ri = RangeImage(r, theta, phi, ids, int(occupied.sum()))

    normals = estimate_normals(ri, max_gap=3)
    # column 11 has vertical neighbours only; the nearest cell to its left is 6 columns away
    assert not normals.valid[ids[:, 11]].any()
    assert normals.valid[ids[:, :6].ravel()].all()
    points = from_spherical_many(r[:, :6], theta[:, :6], phi[:, :6]).reshape(-1, 3)
    expected = -points / np.linalg.norm(points, axis=1, keepdims=True)
    np.testing.assert_allclose(normals.normals[ids[:, :6].ravel()], expected, atol=1e-9)


def test_normals_to_camera_orients_against_the_pixel_ray():
    intr = CameraIntrinsics(100.0, 100.0, 50.0, 50.0, 100, 100)
    depth = np.zeros((100, 100))
    ids = np.full((100, 100), -1)
    depth[50, 50], ids[50, 50] = 10.0, 0
    sparse = SparseDepthMap(depth, ids)
    normals = PointNormals(np.array([[0.0, 0.0, 1.0]]))

    oriented = normals_to_camera(normals, RigidTransform.identity(), sparse, intr)
    np.testing.assert_allclose(oriented.normals[50, 50], [0.0, 0.0, -1.0])
    assert oriented.valid.sum() == 1

    kept = normals_to_camera(normals, RigidTransform.identity(), sparse)
    np.testing.assert_allclose(kept.normals[50, 50], [0.0, 0.0, 1.0])


def test_lookup_of_unknown_ids_is_nan():
    normals = PointNormals(np.array([[1.0, 0.0, 0.0]]))
    looked_up = normals.lookup(np.array([0, -1, 5]))
    assert np.isfinite(looked_up[0]).all()
    assert np.isnan(looked_up[1:]).all()


def test_to_spherical_matches_range_image_angles():
    pattern = square_pattern(4.0, 1.0)
    rendered = render_scan(SceneSpec((Plane((6.0, 0.0, 0.0), (-1.0, 0.0, 0.0)),), pattern=pattern))
    ri = build_range_image(rendered.scan, cols=pattern.num_lines)
    r, theta, phi = to_spherical_many(rendered.scan.points)
    ids = ri.point_id[ri.occupied]
    np.testing.assert_allclose(ri.r[ri.occupied], r[ids])
    np.testing.assert_allclose(ri.theta[ri.occupied], theta[ids])
    np.testing.assert_allclose(ri.phi[ri.occupied], phi[ids])
