"""End-to-end reconstruction with every stage's output written to disk.

Artifacts are plain CSV/JSON so any stage can be re-run from its inputs via
the matching CLI subcommand.
"""

from __future__ import annotations

import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import calibration, evaluation, geometry, voxel_ops
from .config import PipelineConfig, config_to_text, validate_config
from .errors import ConfigError, ReconError, StageError
from .rasterizer import VoxelGrid, differential_voxelization, rasterize_layers, write_grid_csv
from .segmentation import LayerBoundaries, SegmentationConfig, segment_layers, write_layer_csv
from .signal_prep import FilterSpec, HysteresisThresholds, lowpass_filter, normalize_laser
from .trace_io import PointCloud, SignalTrace, TraceSchema, load_stl, load_trace_csv, write_point_cloud_csv, write_trace_csv

logger = logging.getLogger(__name__)

# column name of the binarised laser channel in preprocessed traces
PREPROCESSED_SCHEMA = TraceSchema(laser="laser_on")


@dataclass(frozen=True)
class Preprocessed:
    laser_on: np.ndarray
    galvo_x: np.ndarray
    galvo_y: np.ndarray
    sample_rate_hz: float


@dataclass
class PipelineResult:
    cloud: PointCloud
    grid: VoxelGrid
    artifacts: dict[str, Path] = field(default_factory=dict)
    distortion: geometry.DistortionModel | None = None
    calibration: dict | None = None
    report: evaluation.EvaluationReport | None = None


@contextmanager
def stage(name: str):
    t0 = time.perf_counter()
    try:
        yield
    except StageError:
        raise
    except (ReconError, OSError) as exc:
        raise StageError(name, exc) from exc
    logger.info("stage %s done in %.2f s", name, time.perf_counter() - t0)


def trace_schema(cfg: PipelineConfig) -> TraceSchema:
    return TraceSchema(cfg.laser_column, cfg.galvo_x_column, cfg.galvo_y_column)


def preprocess(trace: SignalTrace, cfg: PipelineConfig) -> Preprocessed:
    on = normalize_laser(trace.laser, HysteresisThresholds(cfg.threshold_on, cfg.threshold_off))
    if cfg.apply_lpf:
        spec = FilterSpec(cfg.lpf_order, cfg.lpf_cutoff_hz, trace.sample_rate_hz)
        gx, gy = lowpass_filter(trace.galvo_x, spec), lowpass_filter(trace.galvo_y, spec)
    else:
        gx, gy = np.array(trace.galvo_x), np.array(trace.galvo_y)
    return Preprocessed(on, gx, gy, trace.sample_rate_hz)


def write_preprocessed(p: Preprocessed, path) -> None:
    write_trace_csv(SignalTrace(p.sample_rate_hz, p.laser_on.astype(float), p.galvo_x, p.galvo_y), path, PREPROCESSED_SCHEMA)


def load_preprocessed(path) -> Preprocessed:
    t = load_trace_csv(path, PREPROCESSED_SCHEMA)
    return Preprocessed(t.laser > 0.5, np.array(t.galvo_x), np.array(t.galvo_y), t.sample_rate_hz)


def calibrate(p: Preprocessed, boundaries: LayerBoundaries, cfg: PipelineConfig) -> dict:
    """Swing of the calibration layer and the cubical raster it implies (reported, not adopted)."""
    n = len(boundaries)
    layer = calibration.default_calibration_layer(n) if cfg.calibration_layer is None else cfg.calibration_layer
    if not 0 <= layer < n:
        raise ConfigError(f"calibration_layer {layer} outside [0, {n})")
    s, e = boundaries[layer]
    spec = FilterSpec(cfg.lpf_order, cfg.calibration_lpf_cutoff_hz, p.sample_rate_hz)
    swing = calibration.measure_swing(p.galvo_x[s : e + 1], p.galvo_y[s : e + 1], spec)
    return {
        "calibration_layer": layer,
        "layer_count": n,
        "max_delta_x": swing.max_delta_x,
        "max_delta_y": swing.max_delta_y,
        "combined_swing": swing.combined,
        "derived_raster": calibration.derive_raster_size(swing, n),
        "operational_raster": cfg.raster_size,
    }


def fit_distortion(grid: VoxelGrid, cfg: PipelineConfig) -> geometry.DistortionModel:
    """Ellipse through the top-projected columns, mapped back to a circle of ``reference_radius``."""
    proj = voxel_ops.project_columns(grid, voxel_ops.Direction.UP, cfg.projection_min_hit)
    xy = proj.upper.xy.astype(float)
    model = geometry.derive_xy_distortion(geometry.fit_ellipse_pca(xy), cfg.reference_radius)
    z = cfg.z_factor
    if z is None and cfg.fit_z_factor:
        cloud = geometry.grid_to_cloud(grid)
        z = geometry.derive_z_factor(cloud, geometry.fit_axis_line(xy))
    return geometry.DistortionModel(model.xy_matrix, model.xy_center, z or 1.0, cfg.reference_radius)


def correct(cloud: PointCloud, model: geometry.DistortionModel) -> PointCloud:
    return geometry.apply_z_correction(geometry.apply_xy_correction(cloud, model), model.z_factor)


def evaluate(cloud: PointCloud, stl_path, cfg: PipelineConfig) -> evaluation.VoxelComparison:
    reference = evaluation.voxelize_mesh(load_stl(stl_path), cfg.eval_grid, padding=2)
    aligned = evaluation.align_and_scale(cloud, reference, cfg.scale_rule)
    return evaluation.compare_voxels(reference, evaluation.revoxelize_cloud(aligned, reference))


def write_comparison(cmp: evaluation.VoxelComparison, out: Path, prefix: str = "eval") -> dict[str, Path]:
    paths = {"report": out / f"{prefix}_report.json"}
    paths["report"].write_text(json.dumps(cmp.report.to_json(), indent=2) + "\n", encoding="utf-8")
    for name in ("true_pos", "false_pos", "false_neg"):
        paths[name] = out / f"{prefix}_{name}.csv"
        write_point_cloud_csv(getattr(cmp, name), paths[name])
    return paths


def run_pipeline(cfg: PipelineConfig) -> PipelineResult:
    """preprocess, segment, (calibrate), rasterize, (merge), prune, fill, correct, proportion, (evaluate)."""
    problems = validate_config(cfg)
    if problems:
        raise ConfigError("invalid configuration:\n  " + "\n  ".join(problems))
    if not cfg.inputs:
        raise ConfigError("inputs: no trace files given")
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    art: dict[str, Path] = {"config": out / "config.cfg"}
    art["config"].write_text(config_to_text(cfg), encoding="utf-8")

    inputs = cfg.inputs if cfg.mode == "differential" else cfg.inputs[:1]
    if cfg.mode == "simple" and len(cfg.inputs) > 1:
        logger.warning("simple mode uses only the first of %d inputs", len(cfg.inputs))

    def load_one(path):
        with stage("preprocess"):
            return preprocess(load_trace_csv(path, trace_schema(cfg)), cfg)

    # traces are independent until the merge; the filter and CSV parsing release the GIL
    with ThreadPoolExecutor(max_workers=min(len(inputs), 4)) as pool:
        prepared = list(pool.map(load_one, inputs))

    grids, calib = [], None
    for i, (path, p) in enumerate(zip(inputs, prepared)):
        with stage("preprocess"):
            art[f"preprocessed_{i}"] = out / f"preprocessed_{i}.csv"
            write_preprocessed(p, art[f"preprocessed_{i}"])
        with stage("segment"):
            b = segment_layers(p.laser_on, SegmentationConfig(cfg.off_run_threshold))
            art[f"layers_{i}"] = out / f"layers_{i}.csv"
            write_layer_csv(b, p.sample_rate_hz, art[f"layers_{i}"])
            logger.info("%s: %d layers", path, len(b))
        if cfg.calibrate and i == 0:
            with stage("calibrate"):
                calib = calibrate(p, b, cfg)
                art["calibration"] = out / "calibration.json"
                art["calibration"].write_text(json.dumps(calib, indent=2) + "\n", encoding="utf-8")
        with stage("rasterize"):
            g = rasterize_layers(p.laser_on, p.galvo_x, p.galvo_y, b, cfg.raster_size)
            art[f"grid_{i}"] = out / f"grid_{i}.csv"
            write_grid_csv(g, art[f"grid_{i}"])
            grids.append(g)

    if len(grids) > 1:
        with stage("diff"):
            grid = differential_voxelization(grids)
            art["grid_merged"] = out / "grid_merged.csv"
            write_grid_csv(grid, art["grid_merged"])
    else:
        grid = grids[0]

    with stage("prune"):
        grid = voxel_ops.prune(grid, cfg.prune_config())
        art["grid_pruned"] = out / "grid_pruned.csv"
        write_grid_csv(grid, art["grid_pruned"])
    with stage("fill"):
        grid, _ = voxel_ops.fill_with_strategy(grid, cfg.fill_strategy, cfg.projection_min_hit, cfg.middle_layer)
        art["grid_filled"] = out / "grid_filled.csv"
        write_grid_csv(grid, art["grid_filled"])

    model = None
    with stage("fit-distortion"):
        if cfg.fit_distortion:
            model = fit_distortion(grid, cfg)
            art["distortion"] = Path(cfg.distortion_model) if cfg.distortion_model else out / "distortion.json"
            model.save(art["distortion"])
        elif cfg.distortion_model:
            model = geometry.DistortionModel.load(cfg.distortion_model)
        elif cfg.z_factor is not None:
            model = geometry.DistortionModel(np.eye(2), (0.0, 0.0), cfg.z_factor)
    with stage("correct"):
        cloud = geometry.grid_to_cloud(grid, cfg.cloud_subdivisions)
        if model is not None:
            cloud = correct(cloud, model)
        art["cloud_corrected"] = out / "cloud_corrected.csv"
        write_point_cloud_csv(cloud, art["cloud_corrected"])
    with stage("proportion"):
        if cfg.proportion_ratio is not None:
            cloud = geometry.proportion_correction(cloud, cfg.proportion_ratio, cfg.proportion_kind)
        art["cloud"] = out / "cloud.csv"
        write_point_cloud_csv(cloud, art["cloud"])

    report = None
    if cfg.reference_stl:
        with stage("evaluate"):
            cmp = evaluate(cloud, cfg.reference_stl, cfg)
            report = cmp.report
            art.update({f"eval_{k}": v for k, v in write_comparison(cmp, out).items()})
    return PipelineResult(cloud, grid, art, model, calib, report)
