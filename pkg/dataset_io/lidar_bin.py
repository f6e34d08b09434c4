"""Velodyne binaries: flat little-endian float32 records (x, y, z, reflectance)."""

from pathlib import Path
from typing import Optional, Union

import numpy as np

from depth_completion.geometry import LidarScan
from toolkit.errors import LidarFormatError

RECORD = np.dtype("<f4")
RECORD_BYTES = 16


def decode_lidar(data: bytes, num_lines: int = 64, source: str = "<bytes>") -> LidarScan:
    if len(data) % RECORD_BYTES:
        offset = len(data) - len(data) % RECORD_BYTES
        raise LidarFormatError(
            f"{source}: truncated record at byte offset {offset} ({len(data)} bytes is not a multiple of 16)"
        )
    records = np.frombuffer(data, dtype=RECORD).reshape(-1, 4)
    points = records[:, :3].astype(np.float64)
    bad = ~np.all(np.isfinite(points), axis=1)
    if bad.any():
        first = int(np.flatnonzero(bad)[0])
        raise LidarFormatError(f"{source}: non-finite coordinates at byte offset {first * RECORD_BYTES}")
    return LidarScan(points, None, num_lines)


def read_lidar_bin(path: Union[str, Path], num_lines: int = 64) -> LidarScan:
    """Points only; reflectance is dropped and no ring index is available."""
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as e:
        raise LidarFormatError(f"{path}: cannot read LiDAR file ({e})") from e
    return decode_lidar(data, num_lines, str(path))


def write_lidar_bin(scan: LidarScan, path: Union[str, Path], reflectance: Optional[np.ndarray] = None) -> None:
    path = Path(path)
    records = np.zeros((len(scan), 4), dtype=RECORD)
    records[:, :3] = scan.points
    if reflectance is not None:
        records[:, 3] = reflectance
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(records.tobytes())
