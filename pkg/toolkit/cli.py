"""Batch command line: ``python main.py <command> [options]``.

Exit codes: 0 success, 1 some frames failed, 2 configuration or format error.
"""

import argparse
import statistics
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import pandas as pd
import structlog
from dotenv import set_key
from pydantic import BaseModel, Field
from tqdm import tqdm

from dataset_io.calibration import read_calibration, write_calibration
from dataset_io.depth_png import read_depth_png, write_depth_png
from dataset_io.frames import list_frames, pair_frames
from dataset_io.lidar_bin import read_lidar_bin, write_lidar_bin
from dataset_io.render import RENDER_MODES, render_colorized, write_image
from depth_completion.geometry import project_scan
from depth_completion.pipeline import ablation_trace, clean_sparse, complete
from toolkit.errors import ConfigError, SurfaceFillError
from toolkit.evaluation import (
    REPORT_COLUMNS,
    EvalReport,
    NearestStats,
    metrics,
    nearest_stats,
    report_table,
    sparsify,
)
from toolkit.logging_config import configure_logging
from toolkit.settings import DistanceMetric, PipelineConfig, build_config, load_pipeline_config, settings
from toolkit.synthscene import load_scene_spec, render_scan, render_truth

logger = structlog.get_logger(__name__)

EXIT_OK = 0
EXIT_PARTIAL = 1
EXIT_CONFIG = 2

CAM_CALIB = "calib_cam_to_cam.txt"
VELO_CALIB = "calib_velo_to_cam.txt"
PIPELINE_ENV = "pipeline.env"


class RunManifest(BaseModel):
    """Everything needed to reproduce and audit a run."""
    command: str
    config: Dict[str, Any]
    inputs: Dict[str, Optional[str]] = Field(default_factory=dict)
    outputs: Dict[str, Optional[str]] = Field(default_factory=dict)
    frame_times_ms: Dict[str, float] = Field(default_factory=dict)
    failures: Dict[str, str] = Field(default_factory=dict)
    aggregate: Optional[Dict[str, Any]] = None

    def write(self, directory: Path) -> Path:
        directory.mkdir(parents=True, exist_ok=True)
        path = directory / "manifest.json"
        path.write_text(self.model_dump_json(indent=2))
        return path


@dataclass
class FrameJob:
    frame_id: str
    config: Dict[str, Any]
    paths: Dict[str, Optional[str]] = field(default_factory=dict)


@dataclass
class FrameOutcome:
    frame_id: str
    elapsed_ms: float = 0.0
    error: Optional[str] = None
    report: Optional[EvalReport] = None
    extra: Any = None


def resolve_calibration(calib: Path) -> Tuple[Path, Path]:
    """A directory holds the raw-data pair; a single file holds both (object-detection layout)."""
    calib = Path(calib)
    if calib.is_dir():
        return calib / CAM_CALIB, calib / VELO_CALIB
    return calib, calib


def _load_calibration(paths: Dict[str, Optional[str]]):
    return read_calibration(paths["cam_calib"], paths["velo_calib"])


def _run_frame(worker: Callable[[FrameJob], Any], job: FrameJob) -> FrameOutcome:
    start = time.perf_counter()
    try:
        report, extra = worker(job)
    except (SurfaceFillError, OSError, ValueError) as e:
        logger.warning("Frame failed", frame_id=job.frame_id, error=str(e))
        return FrameOutcome(job.frame_id, (time.perf_counter() - start) * 1000.0, error=str(e))
    elapsed = (time.perf_counter() - start) * 1000.0
    logger.info("Frame done", frame_id=job.frame_id, elapsed_ms=round(elapsed, 3))
    return FrameOutcome(job.frame_id, elapsed, report=report, extra=extra)


def _complete_worker(job: FrameJob):
    cfg = build_config(job.config)
    intr, extrinsics = _load_calibration(job.paths)
    scan = read_lidar_bin(job.paths["scan"], cfg.lidar_lines)
    result = complete(scan, extrinsics, intr, cfg)
    write_depth_png(result.dense, job.paths["out"])
    if job.paths.get("mask_out"):
        write_image(render_colorized(result.mask, "outlier_mask"), job.paths["mask_out"])
    if job.paths.get("normal_out"):
        write_image(render_colorized(result.normals, "normal"), job.paths["normal_out"])
    report = None
    if job.paths.get("gt"):
        report = metrics(result.dense, read_depth_png(job.paths["gt"]), devkit_crop=cfg.devkit_crop)
    return report, None


def _clean_worker(job: FrameJob):
    cfg = build_config(job.config)
    intr, extrinsics = _load_calibration(job.paths)
    scan = read_lidar_bin(job.paths["scan"], cfg.lidar_lines)
    cleaned, mask = clean_sparse(scan, extrinsics, intr, cfg)
    write_depth_png(cleaned, job.paths["out"])
    if job.paths.get("mask_out"):
        write_image(mask.to_image(), job.paths["mask_out"])
    report = EvalReport(
        occupied_pixels=cleaned.occupied,
        total_pixels=cleaned.depth.size,
        kept_points=mask.num_points - mask.removed,
        total_points=mask.num_points,
    )
    return report, None


def _evaluate_worker(job: FrameJob):
    cfg = build_config(job.config)
    return metrics(read_depth_png(job.paths["pred"]), read_depth_png(job.paths["gt"]), cfg.devkit_crop), None


def _ablate_worker(job: FrameJob):
    cfg = build_config(job.config)
    intr, extrinsics = _load_calibration(job.paths)
    scan = read_lidar_bin(job.paths["scan"], cfg.lidar_lines)
    rows = ablation_trace(scan, extrinsics, intr, cfg, read_depth_png(job.paths["gt"]))
    return None, [(row.step, row.report) for row in rows]


def _sparsify_worker(job: FrameJob):
    cfg = build_config(job.config)
    scan = read_lidar_bin(job.paths["scan"], cfg.lidar_lines)
    reduced = sparsify(scan, int(job.paths["lines"]), offset=cfg.sparsify_offset)
    write_lidar_bin(reduced, job.paths["out"])
    return None, len(reduced)


def _stats_worker(job: FrameJob):
    cfg = build_config(job.config)
    return None, nearest_stats(read_depth_png(job.paths["sparse"]), read_depth_png(job.paths["gt"]), cfg.devkit_crop)


def _render_worker(job: FrameJob):
    cfg = build_config(job.config)
    mode = job.paths["mode"]
    if mode in ("depth", "error"):
        data = read_depth_png(job.paths["input"])
        gt = read_depth_png(job.paths["gt"]) if job.paths.get("gt") else None
        image = render_colorized(data, mode, gt=gt, max_range=cfg.max_range)
    else:
        intr, extrinsics = _load_calibration(job.paths)
        scan = read_lidar_bin(job.paths["input"], cfg.lidar_lines)
        if mode == "outlier_mask":
            _, mask = clean_sparse(scan, extrinsics, intr, cfg)
            image = render_colorized(mask, mode)
        else:
            image = render_colorized(complete(scan, extrinsics, intr, cfg).normals, mode)
    write_image(image, job.paths["out"])
    return None, None


def run_frames(
    worker: Callable[[FrameJob], Any],
    jobs: Sequence[FrameJob],
    workers: int,
    desc: str,
) -> List[FrameOutcome]:
    """Run one worker per frame, in input order regardless of the pool size."""
    if workers <= 1 or len(jobs) <= 1:
        return [_run_frame(worker, job) for job in tqdm(jobs, desc=desc, disable=None)]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        outcomes = pool.map(_run_frame, [worker] * len(jobs), jobs)
        return list(tqdm(outcomes, total=len(jobs), desc=desc, disable=None))


def _pipeline_config(args: argparse.Namespace) -> PipelineConfig:
    overrides: Dict[str, Any] = {}
    if getattr(args, "no_outlier_removal", False):
        overrides["outlier_removal"] = False
    if getattr(args, "no_smooth", False):
        overrides["smooth_kernel"] = 1
    if getattr(args, "dt_metric", None):
        overrides["dt_metric"] = DistanceMetric(args.dt_metric)
    config_path = args.config or settings.config_path
    return load_pipeline_config(config_path, **overrides)


def _manifest(args, cfg: PipelineConfig, outcomes: List[FrameOutcome], **paths) -> RunManifest:
    manifest = RunManifest(
        command=args.command,
        config=cfg.snapshot(),
        inputs={k: str(v) if v is not None else None for k, v in paths.items() if k != "out"},
        outputs={"out": str(paths["out"]) if paths.get("out") else None},
    )
    for outcome in outcomes:
        if outcome.error is None:
            manifest.frame_times_ms[outcome.frame_id] = round(outcome.elapsed_ms, 3)
        else:
            manifest.failures[outcome.frame_id] = outcome.error
    reports = [o.report for o in outcomes if o.report is not None]
    if reports:
        aggregate = EvalReport.merge_all(reports)
        manifest.aggregate = aggregate.as_row("ALL")
    return manifest


def _finish(outcomes: List[FrameOutcome]) -> int:
    times = [o.elapsed_ms for o in outcomes if o.error is None]
    if times:
        print(f"frames: {len(times)}  mean {statistics.mean(times):.1f} ms  median {statistics.median(times):.1f} ms")
    failed = [o for o in outcomes if o.error is not None]
    for outcome in failed:
        print(f"FAILED {outcome.frame_id}: {outcome.error}", file=sys.stderr)
    return EXIT_PARTIAL if failed else EXIT_OK


def _write_reports(outcomes: List[FrameOutcome], out: Optional[Path]) -> None:
    reports = {o.frame_id: o.report for o in outcomes if o.report is not None}
    if not reports:
        return
    table = report_table(reports)
    print(table.to_string(index=False))
    if out is not None:
        out.parent.mkdir(parents=True, exist_ok=True)
        table.to_csv(out, index=False, columns=REPORT_COLUMNS)


def _check_calibration(calib: Path) -> Tuple[Path, Path]:
    cam_file, velo_file = resolve_calibration(calib)
    read_calibration(cam_file, velo_file)
    return cam_file, velo_file


def _scan_jobs(args, cfg: PipelineConfig, **extra_dirs) -> Tuple[List[FrameJob], Dict[str, Path]]:
    scans = list_frames(args.input, ".bin")
    cam_file, velo_file = _check_calibration(args.calib)
    jobs = []
    for frame_id in sorted(scans):
        paths: Dict[str, Optional[str]] = {
            "scan": str(scans[frame_id]),
            "cam_calib": str(cam_file),
            "velo_calib": str(velo_file),
        }
        jobs.append(FrameJob(frame_id, cfg.snapshot(), paths))
    return jobs, scans


def cmd_complete(args: argparse.Namespace) -> int:
    cfg = _pipeline_config(args)
    jobs, _ = _scan_jobs(args, cfg)
    gt_frames = list_frames(args.gt, ".png") if args.gt else {}
    if args.gt:
        pair_frames({j.frame_id: None for j in jobs}, gt_frames, names=("input", "gt"))
    for job in jobs:
        job.paths["out"] = str(args.out / f"{job.frame_id}.png")
        if args.mask_out:
            job.paths["mask_out"] = str(args.mask_out / f"{job.frame_id}.png")
        if args.normal_out:
            job.paths["normal_out"] = str(args.normal_out / f"{job.frame_id}.png")
        if args.gt:
            job.paths["gt"] = str(gt_frames[job.frame_id])
    outcomes = run_frames(_complete_worker, jobs, args.workers, "complete")
    _write_reports(outcomes, args.out / "report.csv" if args.gt else None)
    _manifest(args, cfg, outcomes, input=args.input, calib=args.calib, gt=args.gt, out=args.out).write(args.out)
    return _finish(outcomes)


def cmd_clean(args: argparse.Namespace) -> int:
    cfg = _pipeline_config(args)
    jobs, _ = _scan_jobs(args, cfg)
    for job in jobs:
        job.paths["out"] = str(args.out / f"{job.frame_id}.png")
        if args.mask_out:
            job.paths["mask_out"] = str(args.mask_out / f"{job.frame_id}.png")
    outcomes = run_frames(_clean_worker, jobs, args.workers, "clean")
    manifest = _manifest(args, cfg, outcomes, input=args.input, calib=args.calib, out=args.out)
    manifest.write(args.out)
    if manifest.aggregate:
        print(f"keep ratio {manifest.aggregate['keep_ratio'] * 100:.2f}%")
    return _finish(outcomes)


def cmd_evaluate(args: argparse.Namespace) -> int:
    cfg = _pipeline_config(args)
    preds = list_frames(args.input, ".png")
    gts = list_frames(args.gt, ".png")
    stems = pair_frames(preds, gts, names=("predictions", "ground truth"))
    jobs = [FrameJob(s, cfg.snapshot(), {"pred": str(preds[s]), "gt": str(gts[s])}) for s in stems]
    outcomes = run_frames(_evaluate_worker, jobs, args.workers, "evaluate")
    _write_reports(outcomes, args.out)
    return _finish(outcomes)


def cmd_ablate(args: argparse.Namespace) -> int:
    cfg = _pipeline_config(args)
    jobs, scans = _scan_jobs(args, cfg)
    gts = list_frames(args.gt, ".png")
    pair_frames(scans, gts, names=("input", "gt"))
    for job in jobs:
        job.paths["gt"] = str(gts[job.frame_id])
    outcomes = run_frames(_ablate_worker, jobs, args.workers, "ablate")

    per_step: Dict[str, EvalReport] = {}
    for outcome in outcomes:
        for step, report in outcome.extra or []:
            per_step[step] = per_step.get(step, EvalReport()).merge(report)
    rows = [dict(step=step, **{k: v for k, v in r.as_row(step).items() if k != "frame_id"})
            for step, r in per_step.items()]
    table = pd.DataFrame(rows, columns=["step"] + REPORT_COLUMNS[1:])
    if not table.empty:
        table["density"] = table["density"] * 100.0
    print(table.to_string(index=False))
    if args.out:
        args.out.parent.mkdir(parents=True, exist_ok=True)
        table.to_csv(args.out, index=False)
    return _finish(outcomes)


def cmd_sparsify(args: argparse.Namespace) -> int:
    cfg = _pipeline_config(args)
    scans = list_frames(args.input, ".bin")
    jobs = [
        FrameJob(s, cfg.snapshot(), {"scan": str(p), "lines": str(args.lines), "out": str(args.out / p.name)})
        for s, p in sorted(scans.items())
    ]
    outcomes = run_frames(_sparsify_worker, jobs, args.workers, "sparsify")
    env_path = args.out / PIPELINE_ENV
    env_path.parent.mkdir(parents=True, exist_ok=True)
    env_path.touch()
    set_key(str(env_path), "LIDAR_LINES", str(args.lines), quote_mode="never")
    _manifest(args, cfg, outcomes, input=args.input, out=args.out).write(args.out)
    return _finish(outcomes)


def cmd_stats(args: argparse.Namespace) -> int:
    cfg = _pipeline_config(args)
    sparse = list_frames(args.input, ".png")
    gts = list_frames(args.gt, ".png")
    stems = pair_frames(sparse, gts, names=("sparse", "ground truth"))
    jobs = [FrameJob(s, cfg.snapshot(), {"sparse": str(sparse[s]), "gt": str(gts[s])}) for s in stems]
    outcomes = run_frames(_stats_worker, jobs, args.workers, "stats")
    total = NearestStats()
    for outcome in outcomes:
        if outcome.extra is not None:
            total = total.merge(outcome.extra)
    table = total.to_frame()
    print(table.to_string(index=False))
    if args.out:
        args.out.parent.mkdir(parents=True, exist_ok=True)
        table.to_csv(args.out, index=False)
    return _finish(outcomes)


def cmd_render(args: argparse.Namespace) -> int:
    cfg = _pipeline_config(args)
    needs_scan = args.mode in ("normal", "outlier_mask")
    inputs = list_frames(args.input, ".bin" if needs_scan else ".png")
    gts = {}
    if args.mode == "error":
        if not args.gt:
            raise ConfigError("render --mode error needs --gt")
        gts = list_frames(args.gt, ".png")
        pair_frames(inputs, gts, names=("input", "gt"))
    if needs_scan and args.calib is None:
        raise ConfigError(f"render --mode {args.mode} needs --calib")
    calib_files = _check_calibration(args.calib) if needs_scan else (None, None)
    jobs = []
    for frame_id, path in sorted(inputs.items()):
        paths = {
            "input": str(path),
            "mode": args.mode,
            "out": str(args.out / f"{frame_id}.png"),
            "gt": str(gts[frame_id]) if gts else None,
            "cam_calib": str(calib_files[0]) if needs_scan else None,
            "velo_calib": str(calib_files[1]) if needs_scan else None,
        }
        jobs.append(FrameJob(frame_id, cfg.snapshot(), paths))
    outcomes = run_frames(_render_worker, jobs, args.workers, "render")
    return _finish(outcomes)


def cmd_synth(args: argparse.Namespace) -> int:
    scene = load_scene_spec(args.scene)
    cfg = _pipeline_config(args)
    out: Path = args.out
    write_calibration(scene.intrinsics, scene.spec.extrinsics, out / "calib" / CAM_CALIB, out / "calib" / VELO_CALIB)
    for index in tqdm(range(scene.frames), desc="synth", disable=None):
        frame_id = f"{index:010d}"
        spec = scene.frame(index)
        rendered = render_scan(spec)
        write_lidar_bin(rendered.scan, out / "velodyne" / f"{frame_id}.bin")
        truth = render_truth(spec, scene.intrinsics, max_range=cfg.max_range)
        write_depth_png(truth.as_sparse(), out / "groundtruth" / f"{frame_id}.png")
        sparse = project_scan(rendered.scan, spec.extrinsics, scene.intrinsics, cfg.max_range)
        write_depth_png(sparse, out / "sparse" / f"{frame_id}.png")
        logger.info("Synthesized frame", frame_id=frame_id, points=len(rendered.scan),
                    occluded=int((~rendered.visible).sum()))
    env_path = out / PIPELINE_ENV
    env_path.touch()
    set_key(str(env_path), "LIDAR_LINES", str(scene.spec.pattern.num_lines), quote_mode="never")
    print(f"wrote {scene.frames} frame(s) to {out}")
    return EXIT_OK


def _add_pipeline_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", type=Path, default=None, help="Key-value pipeline config file")
    parser.add_argument("--workers", type=int, default=settings.workers, help="Frame-parallel worker processes")
    parser.add_argument("--no-outlier-removal", action="store_true", help="Skip the occlusion outlier filter")
    parser.add_argument("--no-smooth", action="store_true", help="Skip the final Gaussian smoothing")
    parser.add_argument("--dt-metric", choices=[m.value for m in DistanceMetric], default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="surfacefill", description="Learning-free LiDAR depth completion toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("complete", help="Complete LiDAR scans into dense depth PNGs")
    p.add_argument("--input", type=Path, required=True, help="Directory of velodyne .bin scans")
    p.add_argument("--calib", type=Path, required=True, help="Calibration directory or single calib file")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--gt", type=Path, default=None, help="Optional ground-truth PNG directory to evaluate against")
    p.add_argument("--mask-out", type=Path, default=None, help="Write outlier masks here")
    p.add_argument("--normal-out", type=Path, default=None, help="Write normal renders here")
    _add_pipeline_flags(p)
    p.set_defaults(handler=cmd_complete)

    p = sub.add_parser("clean", help="Write outlier-free sparse depth PNGs")
    p.add_argument("--input", type=Path, required=True)
    p.add_argument("--calib", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--mask-out", type=Path, default=None)
    _add_pipeline_flags(p)
    p.set_defaults(handler=cmd_clean)

    p = sub.add_parser("evaluate", help="Compare predicted depth PNGs with ground truth")
    p.add_argument("--input", type=Path, required=True, help="Prediction PNG directory")
    p.add_argument("--gt", type=Path, required=True)
    p.add_argument("--out", type=Path, default=None, help="CSV report path")
    _add_pipeline_flags(p)
    p.set_defaults(handler=cmd_evaluate)

    p = sub.add_parser("ablate", help="Per-step metrics of the completion pipeline")
    p.add_argument("--input", type=Path, required=True)
    p.add_argument("--calib", type=Path, required=True)
    p.add_argument("--gt", type=Path, required=True)
    p.add_argument("--out", type=Path, default=None, help="CSV report path")
    _add_pipeline_flags(p)
    p.set_defaults(handler=cmd_ablate)

    p = sub.add_parser("sparsify", help="Simulate a LiDAR with fewer lines")
    p.add_argument("--input", type=Path, required=True)
    p.add_argument("--lines", type=int, choices=[64, 32, 16], required=True)
    p.add_argument("--out", type=Path, required=True)
    _add_pipeline_flags(p)
    p.set_defaults(handler=cmd_sparsify)

    p = sub.add_parser("stats", help="Nearest-seed distance statistics of sparse depth")
    p.add_argument("--input", type=Path, required=True, help="Sparse depth PNG directory")
    p.add_argument("--gt", type=Path, required=True)
    p.add_argument("--out", type=Path, default=None, help="CSV table path")
    _add_pipeline_flags(p)
    p.set_defaults(handler=cmd_stats)

    p = sub.add_parser("render", help="Colourized renders for inspection")
    p.add_argument("--input", type=Path, required=True)
    p.add_argument("--mode", choices=RENDER_MODES, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--gt", type=Path, default=None)
    p.add_argument("--calib", type=Path, default=None)
    _add_pipeline_flags(p)
    p.set_defaults(handler=cmd_render)

    p = sub.add_parser("synth", help="Generate a synthetic KITTI-style dataset from a scene file")
    p.add_argument("--scene", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    _add_pipeline_flags(p)
    p.set_defaults(handler=cmd_synth)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    configure_logging(settings.log_level, settings.log_json)
    args = build_parser().parse_args(argv)
    try:
        return args.handler(args)
    except SurfaceFillError as e:
        logger.error("Run aborted", command=args.command, error=str(e))
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
