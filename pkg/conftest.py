import os

import hypothesis
import numpy as np
import pytest

from depth_completion.geometry import CameraIntrinsics, RigidTransform
from toolkit.settings import settings
from toolkit.synthscene import LidarPattern, Plane, SceneSpec, camera_pose_at, lidar_pose_at

np.seterr(all="warn")

hypothesis.settings.register_profile("default", max_examples=50, deadline=None)
hypothesis.settings.register_profile("fast", max_examples=5, deadline=None)
hypothesis.settings.register_profile("ci", max_examples=200, deadline=None, derandomize=True)
hypothesis.settings.load_profile(os.getenv("HYPOTHESIS_PROFILE", "default"))


def pytest_configure(config):
    config.addinivalue_line("markers", "kitti: needs a KITTI depth-completion copy under SURFACEFILL_KITTI_ROOT")
    config.addinivalue_line("markers", "benchmark: slow runtime measurements, enabled by SURFACEFILL_RUN_BENCHMARKS=1")


def pytest_collection_modifyitems(config, items):
    skip_kitti = pytest.mark.skip(reason="SURFACEFILL_KITTI_ROOT is not set")
    skip_bench = pytest.mark.skip(reason="set SURFACEFILL_RUN_BENCHMARKS=1 to run benchmarks")
    for item in items:
        if "kitti" in item.keywords and settings.kitti_root is None:
            item.add_marker(skip_kitti)
        if "benchmark" in item.keywords and not settings.run_benchmarks:
            item.add_marker(skip_bench)


@pytest.fixture
def intrinsics() -> CameraIntrinsics:
    return CameraIntrinsics(120.0, 120.0, 120.0, 60.0, 240, 120)


@pytest.fixture
def small_pattern() -> LidarPattern:
    """40 lines over +-24 degrees, 0.4 degree azimuth step: matches the 240x120 test camera's field of view."""
    return LidarPattern(
        num_lines=40,
        elevation_min_deg=-24.0,
        elevation_max_deg=24.0,
        azimuth_min_deg=-44.0,
        azimuth_max_deg=44.0,
        azimuth_step_deg=0.4,
    )


@pytest.fixture
def occlusion_scene(intrinsics, small_pattern):
    """Builder for a 2 m board at 5 m in front of a wall at 20 m, LiDAR ``baseline`` meters above the camera.

    The LiDAR sees the wall over the board's top edge where the camera cannot.
    """
    def build(baseline: float = 0.3, board=(1.0, 1.0), seed: int = 0) -> SceneSpec:
        surfaces = (
            Plane((20.0, 0.0, 0.0), (-1.0, 0.0, 0.0)),
            Plane((5.0, 0.0, 0.0), (-1.0, 0.0, 0.0), half_extent=board),
        )
        return SceneSpec(
            surfaces,
            lidar_pose=lidar_pose_at((0.0, 0.0, baseline)),
            camera_pose=camera_pose_at((0.0, 0.0, 0.0)),
            pattern=small_pattern,
            seed=seed,
            intrinsics=intrinsics,
        )
    return build


@pytest.fixture
def tilted_wall_scene(intrinsics, small_pattern) -> SceneSpec:
    """A wall 10 m ahead turned 30 degrees about the vertical axis, sensors 0.2 m apart."""
    yaw = np.radians(30.0)
    normal = (-np.cos(yaw), np.sin(yaw), 0.0)
    return SceneSpec(
        (Plane((10.0, 0.0, 0.0), normal),),
        lidar_pose=lidar_pose_at((0.0, 0.0, 0.2)),
        camera_pose=camera_pose_at((0.0, 0.0, 0.0)),
        pattern=small_pattern,
        intrinsics=intrinsics,
    )


@pytest.fixture
def identity_extrinsics() -> RigidTransform:
    return RigidTransform.identity()
