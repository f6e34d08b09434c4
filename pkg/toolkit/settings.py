import os
from enum import Enum
from pathlib import Path
from typing import Any, Dict, Mapping, Optional

from dotenv import dotenv_values, load_dotenv
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from toolkit.errors import ConfigError

# repository-level .env, read once at import
env_path = Path(__file__).parent.parent / '.env'
load_dotenv(dotenv_path=env_path)


class DistanceMetric(str, Enum):
    EUCLIDEAN = "euclidean"
    L1 = "l1"


class PipelineConfig(BaseModel):
    """Every knob of the completion pipeline.

    Defaults are the published settings: epsilon 1.0 m, Euclidean distance
    transform, 5 px / sigma 1.0 Gaussian smoothing and 512 range-image columns.
    """
    model_config = ConfigDict(frozen=True, extra="forbid", use_enum_values=False)

    epsilon: float = Field(default=1.0, gt=0.0, description="Outlier depth margin, meters")
    outlier_removal: bool = Field(default=True, description="Run the occlusion outlier filter")
    dt_metric: DistanceMetric = Field(default=DistanceMetric.EUCLIDEAN)
    smooth_kernel: int = Field(default=5, ge=1, description="Gaussian kernel size, odd, pixels")
    smooth_sigma: float = Field(default=1.0, gt=0.0, description="Gaussian sigma, pixels")
    preserve_seeds: bool = Field(default=False, description="Rewrite kept seeds after smoothing")
    denom_guard: float = Field(default=1e-6, gt=0.0)
    max_range: float = Field(default=120.0, gt=0.0, description="Meters")
    lidar_lines: int = Field(default=64, ge=1, description="Scan lines of the LiDAR, used when scans carry no ring index")
    range_image_cols: int = Field(default=512, ge=4)
    normal_max_gap: int = Field(default=3, ge=1, description="Neighbour search gap in range-image cells")
    normal_smoothing: bool = Field(default=True, description="3x3 box smoothing of range derivatives")
    fill_normals_in_range_image: bool = False
    pole_tolerance: float = Field(default=1e-12, ge=0.0, description="Relative horizontal norm below which a point counts as on the pole")
    devkit_crop: bool = Field(default=False, description="Evaluate only below the KITTI devkit crop line")
    sparsify_offset: int = Field(default=0, ge=0, description="First kept line when sparsifying")

    @field_validator("smooth_kernel")
    @classmethod
    def kernel_must_be_odd(cls, v: int) -> int:
        if v % 2 == 0:
            raise ValueError("smooth_kernel must be odd")
        return v

    def snapshot(self) -> Dict[str, Any]:
        """JSON-ready copy of the configuration for run manifests."""
        return self.model_dump(mode="json")

    def with_overrides(self, **overrides: Any) -> "PipelineConfig":
        values = self.model_dump()
        values.update({k: v for k, v in overrides.items() if v is not None})
        return build_config(values)


def build_config(values: Mapping[str, Any]) -> PipelineConfig:
    try:
        return PipelineConfig(**values)
    except ValidationError as e:
        raise ConfigError(f"Invalid pipeline configuration: {e}") from e


def load_pipeline_config(path: Optional[Path] = None, **overrides: Any) -> PipelineConfig:
    """Read a key-value config file (``EPSILON=1.0`` style) and apply CLI overrides.

    Precedence is defaults < file < overrides. Keys are case-insensitive.
    """
    values: Dict[str, Any] = {}
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"Config file not found: {path}")
        raw = dotenv_values(path)
        known = set(PipelineConfig.model_fields)
        for key, value in raw.items():
            name = key.strip().lower()
            if name not in known:
                raise ConfigError(f"Unknown config key '{key}' in {path}")
            if value is None:
                raise ConfigError(f"Config key '{key}' in {path} has no value")
            values[name] = value
    values.update({k: v for k, v in overrides.items() if v is not None})
    return build_config(values)


class Settings:
    """Process-wide settings read from the environment"""
    def __init__(self):
        self.log_level = os.getenv("SURFACEFILL_LOG_LEVEL", "INFO").upper()
        self.log_json = os.getenv("SURFACEFILL_LOG_JSON", "true").lower() == "true"
        self.workers = int(os.getenv("SURFACEFILL_WORKERS", "1"))
        config_path = os.getenv("SURFACEFILL_CONFIG", "").strip()
        self.config_path: Optional[Path] = Path(config_path) if config_path else None
        kitti_root = os.getenv("SURFACEFILL_KITTI_ROOT", "").strip()
        self.kitti_root: Optional[Path] = Path(kitti_root) if kitti_root else None
        self.run_benchmarks = os.getenv("SURFACEFILL_RUN_BENCHMARKS", "0") == "1"


settings = Settings()
