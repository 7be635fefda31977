"""Command-line entry point: one subcommand per pipeline stage plus ``run``.

Exit codes: 0 success, 2 configuration error, 3 data error.
"""

from __future__ import annotations

import argparse
import json
import logging
import re
import sys
from pathlib import Path

import numpy as np

from . import calibration, geometry, pipeline, synth, voxel_ops
from .config import load_config
from .errors import ConfigError, DataError, ReconError, StageError
from .evaluation import SCALE_RULES
from .rasterizer import differential_voxelization, load_grid_csv, rasterize_layers, write_grid_csv
from .segmentation import SegmentationConfig, layer_statistics, load_layer_csv, segment_layers, write_layer_csv
from .trace_io import PointCloud, load_point_cloud_csv, load_trace_csv, read_csv_metadata, write_point_cloud_csv, write_stl, write_trace_csv

logger = logging.getLogger("pbf_recon")

EXIT_OK, EXIT_CONFIG, EXIT_DATA = 0, 2, 3


def _config(args):
    return load_config(args.config, args.profile, args.set)


def _print_hist(title: str, hist: dict, key: str = "value") -> None:
    print(f"# {title}")
    print(f"{key},count")
    for k, v in hist.items():
        print(f"{k},{v}")


_SHAPE_RE = re.compile(r"^\s*([a-z_]+)\s*(?:\(([^)]*)\))?\s*$")


def parse_model(spec: str, raster: float):
    """A procedural shape such as ``gear(12)`` / ``cylinder(40,20)``, or a grid CSV path."""
    m = _SHAPE_RE.match(spec)
    if m and m.group(1) in synth.SHAPES:
        args = [a.strip() for a in (m.group(2) or "").split(",") if a.strip()]
        try:
            nums = [int(a) if re.fullmatch(r"-?\d+", a) else float(a) for a in args]
        except ValueError:
            raise ConfigError(f"bad shape arguments in {spec!r}") from None
        try:
            return synth.SHAPES[m.group(1)](*nums, raster=raster)
        except TypeError as exc:
            raise ConfigError(f"{spec!r}: {exc}") from None
    path = Path(spec)
    if not path.exists():
        raise ConfigError(f"model {spec!r} is neither a shape ({', '.join(synth.SHAPES)}) nor an existing file")
    return load_grid_csv(path, raster if "raster" not in read_csv_metadata(path) else None)


def _floats(text: str, n: int, name: str) -> tuple[float, ...]:
    try:
        vals = tuple(float(v) for v in text.split(","))
    except ValueError:
        raise ConfigError(f"{name}: expected {n} comma-separated numbers, got {text!r}") from None
    if len(vals) != n:
        raise ConfigError(f"{name}: expected {n} numbers, got {len(vals)}")
    return vals


def cmd_simulate(args) -> int:
    model = parse_model(args.model, args.raster)
    sim = synth.SimConfig(
        raster_size_volts=args.raster,
        samples_per_cell=args.samples_per_cell,
        seesaw_axis=args.seesaw_axis,
        layer_gap_samples=args.layer_gap,
        noise_sigma_volts=args.noise,
        spike_rate=args.spike_rate,
        xy_distortion=np.reshape(_floats(args.distortion, 4, "--distortion"), (2, 2)) if args.distortion else None,
        z_stretch=args.z_stretch,
        timing_jitter_samples=args.jitter,
    )
    trace, truth = synth.simulate_print_trace(model, sim, args.seed)
    write_trace_csv(trace, args.out)
    write_grid_csv(truth, args.truth)
    if args.stl:
        write_stl(synth.voxel_surface_mesh(truth), args.stl)
    print(f"{len(trace)} samples, {truth.layer_count} layers, {len(truth)} ground-truth voxels")
    return EXIT_OK


def cmd_preprocess(args) -> int:
    cfg = _config(args)
    p = pipeline.preprocess(load_trace_csv(args.trace, pipeline.trace_schema(cfg)), cfg)
    pipeline.write_preprocessed(p, args.out)
    print(f"{int(p.laser_on.sum())} of {len(p.laser_on)} samples laser-on")
    return EXIT_OK


def cmd_segment(args) -> int:
    cfg = _config(args)
    p = pipeline.load_preprocessed(args.preprocessed)
    b = segment_layers(p.laser_on, SegmentationConfig(cfg.off_run_threshold))
    write_layer_csv(b, p.sample_rate_hz, args.out)
    stats = layer_statistics(b, p.sample_rate_hz)
    print(f"{len(b)} layers")
    if len(b):
        print(f"mean layer duration {stats.durations_s.mean():.4f} s")
    return EXIT_OK


def cmd_calibrate(args) -> int:
    cfg = _config(args)
    p = pipeline.load_preprocessed(args.preprocessed)
    report = pipeline.calibrate(p, load_layer_csv(args.layers), cfg)
    print(json.dumps(report, indent=2))
    if args.grid:
        _print_hist("hit count histogram", calibration.hit_count_histogram(load_grid_csv(args.grid)), "hits")
    return EXIT_OK


def cmd_rasterize(args) -> int:
    cfg = _config(args)
    p = pipeline.load_preprocessed(args.preprocessed)
    g = rasterize_layers(p.laser_on, p.galvo_x, p.galvo_y, load_layer_csv(args.layers), cfg.raster_size)
    write_grid_csv(g, args.out)
    print(f"{len(g)} voxels, {g.total_hits} hits")
    return EXIT_OK


def cmd_diff(args) -> int:
    g = differential_voxelization([load_grid_csv(p) for p in args.grids])
    write_grid_csv(g, args.out)
    print(f"{len(g)} voxels from {len(args.grids)} grids")
    return EXIT_OK


def cmd_prune(args) -> int:
    cfg = _config(args)
    g = load_grid_csv(args.grid)
    pruned = voxel_ops.prune(g, cfg.prune_config())
    write_grid_csv(pruned, args.out)
    print(f"kept {len(pruned)} of {len(g)} voxels")
    return EXIT_OK


def cmd_stats(args) -> int:
    cfg = _config(args)
    g = load_grid_csv(args.grid)
    print(f"# voxels={len(g)} layers={g.layer_count} single_hit_fraction={calibration.single_hit_fraction(g):.4f}")
    _print_hist("hit count histogram", calibration.hit_count_histogram(g), "hits")
    _print_hist("gap stretch histogram", voxel_ops.gap_stretch_histogram(g), "gap")
    _print_hist(
        "neighbour count histogram",
        voxel_ops.neighbor_count_histogram(g, cfg.prune_config().neighbor_range),
        "neighbors",
    )
    return EXIT_OK


def cmd_fill(args) -> int:
    cfg = _config(args)
    g = load_grid_csv(args.grid)
    filled, _ = voxel_ops.fill_with_strategy(g, cfg.fill_strategy, cfg.projection_min_hit, cfg.middle_layer)
    write_grid_csv(filled, args.out)
    print(f"{len(filled) - len(g)} voxels filled")
    return EXIT_OK


def cmd_fit_distortion(args) -> int:
    cfg = _config(args)
    model = pipeline.fit_distortion(load_grid_csv(args.grid), cfg)
    model.save(args.out)
    print(json.dumps(model.to_json(), indent=2))
    return EXIT_OK


def _load_cloud(path, subdivisions: int = 1) -> PointCloud:
    if "raster" in read_csv_metadata(path):
        return geometry.grid_to_cloud(load_grid_csv(path), subdivisions)
    return load_point_cloud_csv(path)


def cmd_correct(args) -> int:
    cfg = _config(args)
    cloud = pipeline.correct(_load_cloud(args.input, cfg.cloud_subdivisions), geometry.DistortionModel.load(args.model))
    write_point_cloud_csv(cloud, args.out)
    print(f"{len(cloud)} points corrected")
    return EXIT_OK


def cmd_proportion(args) -> int:
    cfg = _config(args)
    ratio = args.ratio if args.ratio is not None else cfg.proportion_ratio
    if ratio is None:
        raise ConfigError("proportion: give --ratio or set proportion_ratio")
    kind = args.kind or cfg.proportion_kind
    cloud = _load_cloud(args.input)
    before = geometry.measure_ratio(cloud, kind)
    out = geometry.proportion_correction(cloud, ratio, kind)
    write_point_cloud_csv(out, args.out)
    print(f"{kind}: {before:.4f} -> {geometry.measure_ratio(out, kind):.4f}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    cfg = _config(args)
    if args.grid is not None:
        cfg.eval_grid = args.grid
    if args.scale_rule is not None:
        rule = args.scale_rule
        cfg.scale_rule = rule if rule in SCALE_RULES else _floats(rule, 3, "--scale-rule")
    cmp = pipeline.evaluate(_load_cloud(args.cloud), args.stl, cfg)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    pipeline.write_comparison(cmp, out)
    print(json.dumps(cmp.report.to_json(), indent=2))
    return EXIT_OK


def cmd_run(args) -> int:
    overrides = list(args.set or [])
    if args.inputs:
        overrides.append("inputs=" + ",".join(args.inputs))
    if args.output_dir:
        overrides.append(f"output_dir={args.output_dir}")
    cfg = load_config(args.config, args.profile, overrides)
    result = pipeline.run_pipeline(cfg)
    print(f"{len(result.cloud)} points -> {result.artifacts['cloud']}")
    if result.report is not None:
        print(json.dumps(result.report.to_json(), indent=2))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="config file (key = value lines or JSON)")
    common.add_argument("--profile", choices=("simple", "differential"), help="shipped parameter profile")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="pbf-recon", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, help_):
        p = sub.add_parser(name, parents=[common], help=help_)
        p.set_defaults(func=func)
        return p

    p = add("simulate", cmd_simulate, "synthesise a trace and its ground truth")
    p.add_argument("--model", required=True, help="shape, e.g. gear(12), cylinder(40,20), box(8,8,4), astm_bar, or grid CSV")
    p.add_argument("--raster", type=float, default=0.25, help="simulator raster in volts")
    p.add_argument("--samples-per-cell", type=int, default=6)
    p.add_argument("--seesaw-axis", choices=("X", "Y"), default="X")
    p.add_argument("--layer-gap", type=int, default=3000)
    p.add_argument("--noise", type=float, default=0.0)
    p.add_argument("--spike-rate", type=float, default=0.0)
    p.add_argument("--distortion", help="forward XY matrix a,b,c,d (row-major)")
    p.add_argument("--z-stretch", type=float)
    p.add_argument("--jitter", type=int, default=0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="trace CSV")
    p.add_argument("--truth", required=True, help="ground-truth grid CSV")
    p.add_argument("--stl", help="also write the ground truth as a surface mesh (one unit per cell)")

    p = add("preprocess", cmd_preprocess, "binarise laser, low-pass galvo channels")
    p.add_argument("trace")
    p.add_argument("-o", "--out", required=True)

    p = add("segment", cmd_segment, "split a preprocessed trace into layers")
    p.add_argument("preprocessed")
    p.add_argument("-o", "--out", required=True)

    p = add("calibrate", cmd_calibrate, "galvo swing and derived raster size")
    p.add_argument("preprocessed")
    p.add_argument("--layers", required=True)
    p.add_argument("--grid", help="also print the hit histogram of this grid")

    p = add("rasterize", cmd_rasterize, "bin laser-on samples into a voxel grid")
    p.add_argument("preprocessed")
    p.add_argument("--layers", required=True)
    p.add_argument("-o", "--out", required=True)

    p = add("diff", cmd_diff, "sum hit counters of several grids")
    p.add_argument("grids", nargs="+")
    p.add_argument("-o", "--out", required=True)

    for name, func, help_ in (
        ("prune", cmd_prune, "remove low-confidence voxels"),
        ("fill", cmd_fill, "fill column gaps"),
        ("fit-distortion", cmd_fit_distortion, "derive the XY distortion model"),
    ):
        p = add(name, func, help_)
        p.add_argument("grid")
        p.add_argument("-o", "--out", required=True)

    p = add("stats", cmd_stats, "hit, gap-stretch and neighbour histograms")
    p.add_argument("grid")

    p = add("correct", cmd_correct, "apply a distortion model")
    p.add_argument("input", help="grid or point-cloud CSV")
    p.add_argument("--model", required=True)
    p.add_argument("-o", "--out", required=True)

    p = add("proportion", cmd_proportion, "rescale to a known ratio")
    p.add_argument("input")
    p.add_argument("--ratio", type=float)
    p.add_argument("--kind", choices=[k.value for k in geometry.RatioKind])
    p.add_argument("-o", "--out", required=True)

    p = add("evaluate", cmd_evaluate, "TP/FP/FN against a reference STL")
    p.add_argument("--stl", required=True)
    p.add_argument("--cloud", required=True)
    p.add_argument("--grid", type=float, help="evaluation cell size")
    p.add_argument("--scale-rule", help=f"one of {SCALE_RULES} or sx,sy,sz")
    p.add_argument("--out-dir", default=".")

    p = add("run", cmd_run, "full pipeline")
    p.add_argument("inputs", nargs="*")
    p.add_argument("--output-dir")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s"
    )
    try:
        return args.func(args)
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG if isinstance(exc.cause, ConfigError) else EXIT_DATA
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, ReconError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
