"""KITTI calibration text files ("KEY: v1 v2 ..." per line).

Intrinsics come from the rectified projection matrix of the chosen camera,
extrinsics from the velodyne-to-camera rotation and translation, followed by
the rectifying rotation and the camera's baseline offset encoded in the
projection matrix's last column.
"""

from pathlib import Path
from typing import Dict, Optional, Tuple, Union

import numpy as np
import structlog

from depth_completion.geometry import CameraIntrinsics, RigidTransform
from toolkit.errors import CalibrationError

logger = structlog.get_logger(__name__)

ORTHONORMAL_TOL = 1e-6


def parse_calibration_text(text: str, source: str = "<text>") -> Dict[str, np.ndarray]:
    """Numeric entries of a calibration file; non-numeric lines (e.g. calib_time) are skipped."""
    calib: Dict[str, np.ndarray] = {}
    for line in text.splitlines():
        line = line.strip()
        if not line or ":" not in line:
            continue
        key, value = line.split(":", 1)
        try:
            calib[key.strip()] = np.array([float(x) for x in value.split()])
        except ValueError:
            logger.debug("Skipping non-numeric calibration entry", key=key.strip(), source=source)
    return calib


def load_calibration_file(path: Union[str, Path]) -> Dict[str, np.ndarray]:
    path = Path(path)
    try:
        text = path.read_text()
    except (OSError, UnicodeDecodeError) as e:
        raise CalibrationError(f"{path}: cannot read calibration file ({e})") from e
    return parse_calibration_text(text, str(path))


def _entry(calib: Dict[str, np.ndarray], keys, size: int, source: str) -> Optional[np.ndarray]:
    for key in keys:
        if key in calib:
            value = calib[key]
            if value.size != size:
                raise CalibrationError(f"{source}: {key} has {value.size} values, expected {size}")
            if not np.all(np.isfinite(value)):
                raise CalibrationError(f"{source}: {key} contains non-finite values")
            return value
    return None


def _rotation(matrix: np.ndarray, name: str, source: str) -> np.ndarray:
    """Check orthonormality at calibration-file precision and snap to the nearest rotation."""
    if np.max(np.abs(matrix @ matrix.T - np.eye(3))) > ORTHONORMAL_TOL:
        raise CalibrationError(f"{source}: {name} is not orthonormal within {ORTHONORMAL_TOL}")
    u, _, vt = np.linalg.svd(matrix)
    rotation = u @ vt
    if np.linalg.det(rotation) < 0:
        raise CalibrationError(f"{source}: {name} is a reflection, not a rotation")
    return rotation


def read_calibration(
    cam_file: Union[str, Path],
    lidar_file: Union[str, Path],
    camera: str = "02",
    image_size: Optional[Tuple[int, int]] = None,
) -> Tuple[CameraIntrinsics, RigidTransform]:
    """Intrinsics of rectified camera ``camera`` and the LiDAR -> that camera transform.

    Accepts the raw-data layout (P_rect_XX, R_rect_00, S_rect_XX / R, T) and the
    object-detection layout (P2, R0_rect / Tr_velo_to_cam). ``image_size`` is
    (width, height) and is required when the file carries no S_rect entry.
    """
    cam = load_calibration_file(cam_file)
    lidar = load_calibration_file(lidar_file) if Path(lidar_file) != Path(cam_file) else cam
    cam_src, lidar_src = str(cam_file), str(lidar_file)

    index = str(int(camera))
    projection = _entry(cam, (f"P_rect_{camera}", f"P{index}"), 12, cam_src)
    if projection is None:
        raise CalibrationError(f"{cam_src}: missing projection matrix P_rect_{camera} / P{index}")
    projection = projection.reshape(3, 4)
    k = projection[:, :3]
    f_u, f_v, p_u, p_v = k[0, 0], k[1, 1], k[0, 2], k[1, 2]

    size = _entry(cam, (f"S_rect_{camera}",), 2, cam_src)
    if size is not None:
        width, height = int(round(size[0])), int(round(size[1]))
    elif image_size is not None:
        width, height = image_size
    else:
        raise CalibrationError(f"{cam_src}: missing S_rect_{camera} and no image size given")
    intr = CameraIntrinsics(float(f_u), float(f_v), float(p_u), float(p_v), width, height)

    rect = _entry(cam, ("R_rect_00", "R0_rect"), 9, cam_src)
    rect = np.eye(3) if rect is None else _rotation(rect.reshape(3, 3), "R_rect_00", cam_src)

    rotation = _entry(lidar, ("R",), 9, lidar_src)
    translation = _entry(lidar, ("T",), 3, lidar_src)
    if rotation is not None and translation is not None:
        rotation = rotation.reshape(3, 3)
    else:
        velo_to_cam = _entry(lidar, ("Tr_velo_to_cam", "Tr_velo_cam"), 12, lidar_src)
        if velo_to_cam is None:
            raise CalibrationError(f"{lidar_src}: missing R and T (or Tr_velo_to_cam)")
        velo_to_cam = velo_to_cam.reshape(3, 4)
        rotation, translation = velo_to_cam[:, :3], velo_to_cam[:, 3]
    rotation = _rotation(rotation, "R", lidar_src)

    # projection = K [I | K^-1 p4]: the camera's offset from the rectified reference camera
    try:
        baseline = np.linalg.solve(k, projection[:, 3])
    except np.linalg.LinAlgError as e:
        raise CalibrationError(f"{cam_src}: projection matrix is singular") from e
    extrinsics = RigidTransform(rect @ rotation, rect @ translation + baseline)
    logger.debug("Loaded calibration", camera=camera, width=width, height=height)
    return intr, extrinsics


def write_calibration(
    intr: CameraIntrinsics,
    extrinsics: RigidTransform,
    cam_file: Union[str, Path],
    lidar_file: Union[str, Path],
    camera: str = "02",
) -> None:
    """Write a raw-data style calibration pair readable by :func:`read_calibration`."""
    def fmt(values: np.ndarray) -> str:
        return " ".join(f"{v:.12e}" for v in np.asarray(values).reshape(-1))

    projection = np.hstack([intr.matrix, np.zeros((3, 1))])
    cam_lines = [
        f"S_rect_{camera}: {fmt([intr.width, intr.height])}",
        f"R_rect_00: {fmt(np.eye(3))}",
        f"P_rect_{camera}: {fmt(projection)}",
    ]
    lidar_lines = [f"R: {fmt(extrinsics.rotation)}", f"T: {fmt(extrinsics.translation)}"]
    for path, lines in ((Path(cam_file), cam_lines), (Path(lidar_file), lidar_lines)):
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text("\n".join(lines) + "\n")
