"""Sweep raster subdivision and galvo noise; report hit statistics and scores.

Mirrors the raster-choice study on a simulated print: finer rasters leave
more cells with a single hit and more gaps, which pruning then has to absorb.
"""

import argparse

import numpy as np

from pbf_recon import evaluation as ev
from pbf_recon import synth
from pbf_recon.calibration import single_hit_fraction
from pbf_recon.rasterizer import rasterize_layers
from pbf_recon.segmentation import segment_layers
from pbf_recon.signal_prep import lowpass_filter, normalize_laser
from pbf_recon.voxel_ops import SIMPLE_PRUNE, gap_stretch_histogram, prune


def score(grid, truth, sub):
    # collapse the fine raster back onto the design cells before comparing
    coarse = np.column_stack([grid.coords[:, 1] // sub, grid.coords[:, 2] // sub, grid.coords[:, 0]])
    ref = ev.occupancy_from_voxels(truth, padding=5)
    idx = np.unique(coarse - np.floor(ref.origin + 0.5).astype(np.int64), axis=0)
    inside = ((idx >= 0) & (idx < np.array(ref.dims))).all(axis=1)
    rep = ev.compare_voxels(ref, ref.with_occupied(idx[inside])).report
    return rep.percent_true_pos, (rep.false_pos + int((~inside).sum())) / rep.reference_count * 100


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--subs", type=int, nargs="+", default=[1, 2, 4, 8])
    ap.add_argument("--noise", type=float, nargs="+", default=[0.0, 0.02, 0.05])
    ap.add_argument("--diameter", type=int, default=30)
    ap.add_argument("--height", type=int, default=10)
    args = ap.parse_args()

    model = synth.cylinder_model(args.diameter, args.height)
    print(f"{'noise':>6} {'sub':>4} {'voxels':>8} {'single%':>8} {'gap<5%':>7} {'TP%':>7} {'FP%':>7}")
    for sigma in args.noise:
        cfg = synth.SimConfig(noise_sigma_volts=sigma, spike_rate=1e-4 if sigma else 0.0)
        trace, truth = synth.simulate_print_trace(model, cfg, seed=1)
        on = normalize_laser(trace.laser)
        layers = segment_layers(on)
        gx, gy = lowpass_filter(trace.galvo_x), lowpass_filter(trace.galvo_y)
        for sub in args.subs:
            grid = rasterize_layers(on, gx, gy, layers, cfg.raster_size_volts / sub)
            gaps = gap_stretch_histogram(grid)
            short = 100 * sum(v for k, v in gaps.items() if k < 5) / max(sum(gaps.values()), 1)
            tp, fp = score(prune(grid, SIMPLE_PRUNE), truth, sub)
            print(f"{sigma:6.3f} {sub:4d} {len(grid):8d} {100 * single_hit_fraction(grid):8.2f} "
                  f"{short:7.1f} {tp:7.2f} {fp:7.2f}")


if __name__ == "__main__":
    main()
