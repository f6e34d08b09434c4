"""8-bit visualizations of depth, normals, outlier masks and signed errors."""

from pathlib import Path
from typing import Optional, Union

import numpy as np
from PIL import Image

from depth_completion.geometry import SparseDepthMap
from depth_completion.normals import NormalMap
from depth_completion.outlier import OutlierMask
from toolkit.errors import ConfigError, DepthFormatError

# near (index 0) to far (index 255)
DEPTH_ANCHORS = np.array([
    [252, 253, 191],
    [252, 166, 112],
    [241, 96, 93],
    [199, 47, 111],
    [140, 41, 129],
    [94, 24, 126],
    [49, 17, 89],
    [20, 14, 54],
    [4, 4, 20],
], dtype=np.float64)
ERROR_RANGE = 5.0
RENDER_MODES = ("depth", "normal", "outlier_mask", "error")


def colormap_lut() -> np.ndarray:
    """256 x 3 uint8 table interpolated linearly between the anchor colours."""
    positions = np.linspace(0.0, 255.0, DEPTH_ANCHORS.shape[0])
    index = np.arange(256, dtype=np.float64)
    channels = [np.interp(index, positions, DEPTH_ANCHORS[:, c]) for c in range(3)]
    return np.rint(np.stack(channels, axis=1)).astype(np.uint8)


LUT = colormap_lut()


def colorize_depth(depth_map, max_range: float = 120.0) -> np.ndarray:
    valid = depth_map.valid
    index = np.rint(np.clip(depth_map.depth / max_range, 0.0, 1.0) * 255).astype(np.int64)
    image = LUT[index]
    image[~valid] = 0
    return image


def colorize_normals(normal_map: NormalMap) -> np.ndarray:
    """(n + 1) / 2 scaled to 0..255 per channel; pixels without a normal are black."""
    n = normal_map.normals
    valid = normal_map.valid
    image = np.zeros(n.shape, dtype=np.uint8)
    image[valid] = np.rint((np.clip(n[valid], -1.0, 1.0) + 1.0) / 2.0 * 255).astype(np.uint8)
    return image


def colorize_mask(mask: Union[OutlierMask, np.ndarray]) -> np.ndarray:
    if isinstance(mask, OutlierMask):
        return mask.to_image()
    return np.where(np.asarray(mask, dtype=bool), 255, 0).astype(np.uint8)


def colorize_error(pred, gt: SparseDepthMap, scale: float = ERROR_RANGE) -> np.ndarray:
    """Blue where the prediction is too near, red where too far, white at zero; black without ground truth."""
    if pred.shape != gt.shape:
        raise ConfigError(f"Prediction shape {pred.shape} does not match ground truth {gt.shape}")
    valid = gt.valid & pred.valid
    err = np.clip((pred.depth - gt.depth) / scale, -1.0, 1.0)
    image = np.zeros(gt.shape + (3,), dtype=np.float64)
    fade = 1.0 - np.abs(err)
    image[..., 0] = np.where(err >= 0, 1.0, fade)
    image[..., 1] = fade
    image[..., 2] = np.where(err <= 0, 1.0, fade)
    image = np.rint(image * 255).astype(np.uint8)
    image[~valid] = 0
    return image


def render_colorized(
    data,
    mode: str,
    gt: Optional[SparseDepthMap] = None,
    max_range: float = 120.0,
) -> np.ndarray:
    if mode == "depth":
        return colorize_depth(data, max_range)
    if mode == "normal":
        return colorize_normals(data)
    if mode == "outlier_mask":
        return colorize_mask(data)
    if mode == "error":
        if gt is None:
            raise ConfigError("Error rendering needs ground truth")
        return colorize_error(data, gt)
    raise ConfigError(f"Unknown render mode '{mode}', expected one of {RENDER_MODES}")


def write_image(image: np.ndarray, path: Union[str, Path]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    try:
        Image.fromarray(image).save(path, format="PNG")
    except (OSError, ValueError, TypeError) as e:
        raise DepthFormatError(f"{path}: cannot write image ({e})") from e
