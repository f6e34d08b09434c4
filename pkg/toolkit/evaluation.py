"""Benchmark metrics, line sparsification and nearest-seed statistics.

Errors are reported in millimeters and inverse-depth errors in 1/km
(1000 / depth in meters), following the KITTI devkit conventions.
"""

from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Union

import numpy as np
import pandas as pd
import structlog

from depth_completion.distance_transform import nearest_field
from depth_completion.geometry import LidarScan, SparseDepthMap
from depth_completion.normals import assign_pseudo_lines
from toolkit.errors import ConfigError, DegenerateInputError
from toolkit.settings import DistanceMetric

logger = structlog.get_logger(__name__)

REPORT_COLUMNS = ["frame_id", "rmse", "mae", "irmse", "imae", "density", "keep_ratio"]
DEVKIT_CROP_ROWS = 352
MAX_STATS_DISTANCE = 30


@dataclass
class EvalReport:
    """Error sums and counts behind the reported metrics; reports from different frames merge by addition."""
    sq_err_sum: float = 0.0
    abs_err_sum: float = 0.0
    inv_sq_err_sum: float = 0.0
    inv_abs_err_sum: float = 0.0
    evaluated_pixels: int = 0
    occupied_pixels: int = 0
    total_pixels: int = 0
    kept_points: int = 0
    total_points: int = 0

    @property
    def rmse(self) -> float:
        return float(np.sqrt(self.sq_err_sum / self.evaluated_pixels)) if self.evaluated_pixels else 0.0

    @property
    def mae(self) -> float:
        return self.abs_err_sum / self.evaluated_pixels if self.evaluated_pixels else 0.0

    @property
    def irmse(self) -> float:
        return float(np.sqrt(self.inv_sq_err_sum / self.evaluated_pixels)) if self.evaluated_pixels else 0.0

    @property
    def imae(self) -> float:
        return self.inv_abs_err_sum / self.evaluated_pixels if self.evaluated_pixels else 0.0

    @property
    def density(self) -> float:
        return self.occupied_pixels / self.total_pixels if self.total_pixels else 0.0

    @property
    def keep_ratio(self) -> float:
        return self.kept_points / self.total_points if self.total_points else 1.0

    def merge(self, other: "EvalReport") -> "EvalReport":
        return EvalReport(
            sq_err_sum=self.sq_err_sum + other.sq_err_sum,
            abs_err_sum=self.abs_err_sum + other.abs_err_sum,
            inv_sq_err_sum=self.inv_sq_err_sum + other.inv_sq_err_sum,
            inv_abs_err_sum=self.inv_abs_err_sum + other.inv_abs_err_sum,
            evaluated_pixels=self.evaluated_pixels + other.evaluated_pixels,
            occupied_pixels=self.occupied_pixels + other.occupied_pixels,
            total_pixels=self.total_pixels + other.total_pixels,
            kept_points=self.kept_points + other.kept_points,
            total_points=self.total_points + other.total_points,
        )

    __add__ = merge

    @classmethod
    def merge_all(cls, reports: Iterable["EvalReport"]) -> "EvalReport":
        total = cls()
        for report in reports:
            total = total.merge(report)
        return total

    def as_row(self, frame_id: str) -> Dict[str, Union[str, float]]:
        return {
            "frame_id": frame_id,
            "rmse": self.rmse,
            "mae": self.mae,
            "irmse": self.irmse,
            "imae": self.imae,
            "density": self.density,
            "keep_ratio": self.keep_ratio,
        }

    def summary(self) -> str:
        return (
            f"RMSE {self.rmse:.2f} mm  MAE {self.mae:.2f} mm  "
            f"iRMSE {self.irmse:.2f} 1/km  iMAE {self.imae:.2f} 1/km  "
            f"density {self.density * 100:.2f}%  keep {self.keep_ratio * 100:.2f}%  "
            f"pixels {self.evaluated_pixels}"
        )


def devkit_mask(shape) -> np.ndarray:
    """True below the devkit crop line (the bottom 352 rows)."""
    height, width = shape
    mask = np.ones((height, width), dtype=bool)
    if height > DEVKIT_CROP_ROWS:
        mask[: height - DEVKIT_CROP_ROWS] = False
    return mask


def metrics(pred, gt: SparseDepthMap, devkit_crop: bool = False) -> EvalReport:
    """Compare a sparse or dense prediction with ground truth over pixels valid in both."""
    if pred.shape != gt.shape:
        raise DegenerateInputError(f"Prediction shape {pred.shape} does not match ground truth {gt.shape}")
    if not gt.valid.any():
        raise DegenerateInputError("Ground truth has no valid pixel")
    evaluated = gt.valid & pred.valid
    if devkit_crop:
        evaluated &= devkit_mask(gt.shape)
    if not evaluated.any():
        raise DegenerateInputError("Prediction and ground truth share no valid pixel")

    p = pred.depth[evaluated]
    g = gt.depth[evaluated]
    err = (p - g) * 1000.0
    inv_err = 1000.0 / p - 1000.0 / g
    return EvalReport(
        sq_err_sum=float(np.sum(err ** 2)),
        abs_err_sum=float(np.sum(np.abs(err))),
        inv_sq_err_sum=float(np.sum(inv_err ** 2)),
        inv_abs_err_sum=float(np.sum(np.abs(inv_err))),
        evaluated_pixels=int(evaluated.sum()),
        occupied_pixels=int(np.count_nonzero(pred.valid)),
        total_pixels=int(pred.depth.size),
    )


def report_table(reports: Dict[str, EvalReport]) -> pd.DataFrame:
    """One row per frame in stem order plus a final ALL row with the merged report."""
    rows = [reports[frame_id].as_row(frame_id) for frame_id in sorted(reports)]
    rows.append(EvalReport.merge_all(reports.values()).as_row("ALL"))
    return pd.DataFrame(rows, columns=REPORT_COLUMNS)


def sparsify(scan: LidarScan, target_lines: int, offset: int = 0, allow_binning: bool = True) -> LidarScan:
    """Keep every (L / target)-th line starting at ``offset``; surviving lines are renumbered ``line // step``."""
    if not scan.has_lines:
        if not allow_binning:
            raise ConfigError("Scan has no line indices and elevation binning is disabled")
        scan = assign_pseudo_lines(scan)
    if target_lines <= 0 or target_lines > scan.num_lines or scan.num_lines % target_lines:
        raise ConfigError(f"Cannot sparsify a {scan.num_lines}-line scan to {target_lines} lines")
    step = scan.num_lines // target_lines
    if step == 1:
        return scan
    if not 0 <= offset < step:
        raise ConfigError(f"Sparsify offset must lie in [0, {step}), got {offset}")
    keep = scan.line_index % step == offset
    return LidarScan(scan.points[keep], scan.line_index[keep] // step, target_lines)


@dataclass
class NearestStats:
    """Per L1-distance bin (0..30 plus one overflow bin): pixel count and nearest-initial absolute error sums."""
    counts: np.ndarray = field(default_factory=lambda: np.zeros(MAX_STATS_DISTANCE + 2, dtype=np.int64))
    raw_abs_err_sum: np.ndarray = field(default_factory=lambda: np.zeros(MAX_STATS_DISTANCE + 2))
    substituted_abs_err_sum: np.ndarray = field(default_factory=lambda: np.zeros(MAX_STATS_DISTANCE + 2))

    @property
    def fractions(self) -> np.ndarray:
        total = self.counts.sum()
        return self.counts / total if total else np.zeros(self.counts.shape)

    @property
    def raw_error_mm(self) -> np.ndarray:
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.where(self.counts > 0, self.raw_abs_err_sum / self.counts, np.nan)

    @property
    def substituted_error_mm(self) -> np.ndarray:
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.where(self.counts > 0, self.substituted_abs_err_sum / self.counts, np.nan)

    def merge(self, other: "NearestStats") -> "NearestStats":
        return NearestStats(
            self.counts + other.counts,
            self.raw_abs_err_sum + other.raw_abs_err_sum,
            self.substituted_abs_err_sum + other.substituted_abs_err_sum,
        )

    def to_frame(self) -> pd.DataFrame:
        labels: List[str] = [str(d) for d in range(MAX_STATS_DISTANCE + 1)] + [f">{MAX_STATS_DISTANCE}"]
        return pd.DataFrame({
            "l1_distance": labels,
            "pixels": self.counts,
            "fraction": self.fractions,
            "raw_error_mm": self.raw_error_mm,
            "gt_substituted_error_mm": self.substituted_error_mm,
        })


def nearest_stats(sparse: SparseDepthMap, gt: SparseDepthMap, devkit_crop: bool = False) -> NearestStats:
    """How far ground-truth pixels lie from the nearest seed, and how wrong the seed's depth is there.

    The substituted variant replaces every seed that has ground truth with that
    ground-truth value before measuring.
    """
    if sparse.shape != gt.shape:
        raise DegenerateInputError(f"Sparse map shape {sparse.shape} does not match ground truth {gt.shape}")
    if sparse.occupied == 0:
        raise DegenerateInputError("Nearest statistics need at least one seed")
    evaluated = gt.valid
    if devkit_crop:
        evaluated = evaluated & devkit_mask(gt.shape)

    nearest = nearest_field(sparse, None, DistanceMetric.L1)
    bins = np.minimum(nearest.distance[evaluated].astype(np.int64), MAX_STATS_DISTANCE + 1)
    truth = gt.depth[evaluated]
    raw_err = np.abs(nearest.seed_depth[evaluated] - truth) * 1000.0

    substituted = np.where(sparse.valid & gt.valid, gt.depth, sparse.depth)
    sub_seed = substituted[nearest.seed_row, nearest.seed_col]
    sub_err = np.abs(sub_seed[evaluated] - truth) * 1000.0

    size = MAX_STATS_DISTANCE + 2
    return NearestStats(
        counts=np.bincount(bins, minlength=size).astype(np.int64),
        raw_abs_err_sum=np.bincount(bins, weights=raw_err, minlength=size),
        substituted_abs_err_sum=np.bincount(bins, weights=sub_err, minlength=size),
    )
