"""Simulate a print of a solid cylinder, reconstruct it and score the result.

    python scripts/synthetic_reconstruction.py --noise 0.02 --spikes 1e-4 --sub 4
"""

import argparse
import logging
import time

import numpy as np

from pbf_recon import evaluation as ev
from pbf_recon import geometry as geo
from pbf_recon import synth
from pbf_recon.rasterizer import rasterize_layers
from pbf_recon.segmentation import segment_layers
from pbf_recon.signal_prep import lowpass_filter, normalize_laser
from pbf_recon.voxel_ops import SIMPLE_PRUNE, fill_with_strategy, prune

# injected in-plane distortion, the matrix measured on the real printer
PRINTER_MATRIX = ((0.9556, 0.4137), (0.4137, 1.2881))


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--diameter", type=int, default=40)
    ap.add_argument("--height", type=int, default=20)
    ap.add_argument("--noise", type=float, default=0.02, help="galvo noise sigma in volts")
    ap.add_argument("--spikes", type=float, default=1e-4, help="laser spike rate per sample")
    ap.add_argument("--sub", type=int, default=4, help="reconstruction raster = simulated raster / sub")
    ap.add_argument("--no-distortion", action="store_true")
    ap.add_argument("--seed", type=int, default=3)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    log = logging.getLogger("synthetic")

    t0 = time.perf_counter()
    cfg = synth.SimConfig(
        noise_sigma_volts=args.noise,
        spike_rate=args.spikes,
        xy_distortion=None if args.no_distortion else PRINTER_MATRIX,
    )
    trace, truth = synth.simulate_print_trace(synth.cylinder_model(args.diameter, args.height), cfg, seed=args.seed)
    log.info("simulated %d samples, %d truth voxels", len(trace), len(truth))

    on = normalize_laser(trace.laser)
    layers = segment_layers(on)
    grid = rasterize_layers(on, lowpass_filter(trace.galvo_x), lowpass_filter(trace.galvo_y), layers,
                            cfg.raster_size_volts / args.sub)
    log.info("%d layers, %d raw voxels", len(layers), len(grid))
    grid, proj = fill_with_strategy(prune(grid, SIMPLE_PRUNE), "gear_up", 20)
    log.info("%d voxels after pruning and filling", len(grid))

    cloud = geo.grid_to_cloud(grid)
    cloud = cloud.with_xyz(cloud.xyz + [0.5, 0.5, 0.0])
    if not args.no_distortion:
        xy = geo.grid_to_cloud(truth).xyz[:, :2]
        radius = np.hypot(*(xy - xy.mean(axis=0)).T).max() * args.sub
        model = geo.derive_xy_distortion(geo.fit_ellipse_pca(proj.upper.xy + 0.5), radius)
        log.info("fitted matrix %s", np.round(model.xy_matrix, 4).tolist())
        cloud = geo.apply_xy_correction(cloud, model)
    target = geo.measure_ratio(geo.grid_to_cloud(truth), "diameter_over_height")
    cloud = geo.proportion_correction(cloud, target, "diameter_over_height")

    ref = ev.occupancy_from_voxels(truth, padding=5)
    rec = ev.revoxelize_cloud(ev.align_and_scale(cloud, ref, "gear_base_diameter"), ref)
    rep = ev.compare_voxels(ref, rec).report
    tp, fp, fn = rep.percentages
    print(f"TP {tp:.2f}%  FP {fp:.2f}%  FN {fn:.2f}%  ({time.perf_counter() - t0:.1f} s)")


if __name__ == "__main__":
    main()
