"""16-bit PNG depth maps: stored value = round(depth_m * 256), 0 = no measurement."""

from pathlib import Path
from typing import Union

import numpy as np
import structlog
from PIL import Image

from depth_completion.geometry import SparseDepthMap
from toolkit.errors import DepthFormatError

logger = structlog.get_logger(__name__)

DEPTH_SCALE = 256.0
MAX_RAW = 65535
MAX_DEPTH = MAX_RAW / DEPTH_SCALE
SIXTEEN_BIT_MODES = ("I;16", "I;16B", "I;16L", "I")


def read_depth_png(path: Union[str, Path]) -> SparseDepthMap:
    path = Path(path)
    try:
        with Image.open(path) as img:
            mode = img.mode
            if mode not in SIXTEEN_BIT_MODES:
                bands = len(img.getbands())
                raise DepthFormatError(
                    f"{path}: expected a 16-bit single-channel PNG, got mode {mode} with {bands} channel(s)"
                )
            if img.format != "PNG":
                raise DepthFormatError(f"{path}: expected PNG data, got {img.format}")
            raw = np.asarray(img).astype(np.int64)
    except DepthFormatError:
        raise
    except Exception as e:
        raise DepthFormatError(f"{path}: cannot decode depth PNG ({e})") from e
    if raw.ndim != 2:
        raise DepthFormatError(f"{path}: expected a single channel, got array shape {raw.shape}")
    if raw.min(initial=0) < 0 or raw.max(initial=0) > MAX_RAW:
        raise DepthFormatError(f"{path}: values outside the 16-bit range")
    return SparseDepthMap(raw.astype(np.float64) / DEPTH_SCALE)


def encode_depth(depth: np.ndarray) -> np.ndarray:
    """Depth in meters -> uint16 raw values, nearest integer with ties to even."""
    depth = np.asarray(depth, dtype=np.float64)
    if not np.all(np.isfinite(depth)) or np.any(depth < 0):
        raise DepthFormatError("Depth must be finite and non-negative to encode")
    if depth.size and depth.max() > MAX_DEPTH:
        raise DepthFormatError(
            f"Depth {depth.max():.3f} m exceeds the maximum representable {MAX_DEPTH:.6f} m"
        )
    return np.rint(depth * DEPTH_SCALE).astype(np.uint16)


def write_depth_png(depth_map, path: Union[str, Path]) -> None:
    """Write a sparse or dense map; empty cells of sparse maps are stored as 0."""
    path = Path(path)
    raw = encode_depth(np.where(depth_map.valid, depth_map.depth, 0.0))
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(raw).save(path, format="PNG")
    logger.debug("Wrote depth PNG", path=str(path), occupied=int(np.count_nonzero(raw)))
