"""Synthetic laser/galvo traces with known ground truth.

A voxel model is "printed" layer by layer with a boustrophedon scan: the laser
holds on each solid cell for a few samples, ramps to an adjacent cell with the
laser still on, and jumps with the laser off (plus a settle delay) everywhere
else. Long laser-off gaps separate layers.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DataError
from .rasterizer import VoxelGrid
from .trace_io import SignalTrace, TriangleMesh


@dataclass(frozen=True)
class SimConfig:
    sample_rate_hz: float = 20000.0
    raster_size_volts: float = 0.25
    samples_per_cell: int = 6
    seesaw_axis: str = "X"
    # must stay above the segmentation off_run_threshold used downstream
    layer_gap_samples: int = 3000
    noise_sigma_volts: float = 0.0
    laser_on_volts: float = 2.5
    laser_off_volts: float = 0.5
    spike_rate: float = 0.0
    xy_distortion: tuple | None = None
    distortion_center: tuple | None = None
    z_stretch: float | None = None
    timing_jitter_samples: int = 0
    ramp_samples: int = 2
    jump_samples_per_cell: float = 1.0
    settle_samples: int = 8

    def __post_init__(self):
        if not self.raster_size_volts > 0:
            raise ConfigError(f"raster_size_volts must be > 0, got {self.raster_size_volts}")
        if not self.sample_rate_hz > 0:
            raise ConfigError(f"sample_rate_hz must be > 0, got {self.sample_rate_hz}")
        if self.samples_per_cell < 1 or self.layer_gap_samples < 1:
            raise ConfigError("samples_per_cell and layer_gap_samples must be >= 1")
        if self.seesaw_axis not in ("X", "Y"):
            raise ConfigError(f"seesaw_axis must be 'X' or 'Y', got {self.seesaw_axis!r}")
        if not self.laser_on_volts > self.laser_off_volts:
            raise ConfigError("laser_on_volts must exceed laser_off_volts")
        if self.noise_sigma_volts < 0 or not 0 <= self.spike_rate <= 1:
            raise ConfigError("noise_sigma_volts must be >= 0 and spike_rate in [0, 1]")
        if self.z_stretch is not None and not self.z_stretch > 0:
            raise ConfigError(f"z_stretch must be > 0, got {self.z_stretch}")
        if self.timing_jitter_samples < 0 or self.ramp_samples < 0 or self.settle_samples < 0:
            raise ConfigError("jitter, ramp and settle sample counts must be >= 0")
        if self.xy_distortion is not None and abs(np.linalg.det(np.asarray(self.xy_distortion, float))) <= 1e-12:
            raise ConfigError("xy_distortion matrix is singular")


def _printed_layers(model: VoxelGrid, z_stretch: float | None) -> tuple[int, np.ndarray]:
    """Number of printed layers and, for each, the model layer it reproduces."""
    n = model.layer_count
    if z_stretch is None or z_stretch == 1:
        return n, np.arange(n)
    printed = max(int(round(n * z_stretch)), 1)
    return printed, np.minimum(np.floor(np.arange(printed) / z_stretch).astype(int), n - 1)


def _layer_path(cells: np.ndarray, cfg: SimConfig, flip: bool):
    """Scan order for one layer as (fast, slow) cell indices, rows alternating direction."""
    fast_col, slow_col = (1, 2) if cfg.seesaw_axis == "X" else (2, 1)
    order = np.lexsort((cells[:, fast_col], cells[:, slow_col]))
    c = cells[order]
    rows = np.split(c, np.flatnonzero(np.diff(c[:, slow_col])) + 1)
    path = []
    for k, row in enumerate(rows):
        if (k % 2 == 1) != flip:
            row = row[::-1]
        path.append(row[:, [fast_col, slow_col]])
    return np.concatenate(path)


def _layer_segments(path: np.ndarray, cfg: SimConfig) -> np.ndarray:
    """Segments for one layer: per cell the move from its predecessor, a settle, the hold."""
    n = len(path)
    prev = np.vstack([path[:1], path[:-1]])
    d = np.hypot(*(path - prev).T)
    adjacent = d <= 1.0 + 1e-9
    move_n = np.where(adjacent, cfg.ramp_samples, np.maximum(np.ceil(d * cfg.jump_samples_per_cell), 1))
    move_n[0] = 0
    settle_n = np.where(adjacent, 0, cfg.settle_samples)
    settle_n[0] = 0
    out = np.zeros((n, 3, 7))
    out[:, 0, :2], out[:, 0, 2:4] = prev, path
    out[:, 0, 4], out[:, 0, 5], out[:, 0, 6] = move_n, adjacent, 1
    out[:, 1, :2], out[:, 1, 2:4] = path, path
    out[:, 1, 4] = settle_n
    out[:, 2, :2], out[:, 2, 2:4] = path, path
    out[:, 2, 4], out[:, 2, 5] = cfg.samples_per_cell, 1
    return out.reshape(-1, 7)


def simulate_print_trace(model: VoxelGrid, cfg: SimConfig | None = None, seed: int = 0) -> tuple[SignalTrace, VoxelGrid]:
    """Render ``model`` into a trace; returns the trace and the printed ground truth.

    Deterministic for a given (model, cfg, seed).
    """
    cfg = cfg or SimConfig()
    if len(model) == 0:
        raise DataError("model has no voxels")
    rng = np.random.default_rng(seed)
    n_print, source = _printed_layers(model, cfg.z_stretch)
    jitter = rng.integers(0, cfg.timing_jitter_samples + 1, size=n_print)

    # one row per segment: x0, y0, x1, y1, samples, laser on, interpolate between
    blocks = []

    def seg(p, q, n, on, interp):
        blocks.append(np.array([[p[0], p[1], q[0], q[1], n, on, interp]], dtype=float))

    gt = []
    pos = None
    by_layer = {int(m): model.coords[model.coords[:, 0] == m] for m in np.unique(source)}
    for layer in range(n_print):
        cells = by_layer[int(source[layer])]
        if len(cells) == 0:
            continue
        gt.append(np.column_stack([np.full(len(cells), layer), cells[:, 1], cells[:, 2]]))
        path = _layer_path(cells, cfg, flip=bool(layer % 2)) + 0.5
        if cfg.seesaw_axis == "Y":
            path = path[:, ::-1]
        start = tuple(path[0])
        gap = cfg.layer_gap_samples + int(jitter[layer])
        if pos is None:
            seg(start, start, gap, False, False)
        else:
            # the settle is part of the gap so the OFF run between layers is exactly ``gap``
            settle = min(cfg.settle_samples, gap - 1)
            seg(pos, start, gap - settle, False, True)
            seg(start, start, settle, False, False)
        blocks.append(_layer_segments(path, cfg))
        pos = tuple(path[-1])
    seg(pos, pos, cfg.layer_gap_samples, False, False)

    segs = np.concatenate(blocks)
    segs = segs[segs[:, 4] > 0]
    counts = segs[:, 4].astype(np.int64)
    total = int(counts.sum())
    sid = np.repeat(np.arange(len(counts)), counts)
    k = np.arange(total) - np.repeat(np.cumsum(counts) - counts, counts) + 1
    frac = np.where(segs[sid, 6] > 0, k / (counts[sid] + 1), 1.0)
    px = segs[sid, 0] + (segs[sid, 2] - segs[sid, 0]) * frac
    py = segs[sid, 1] + (segs[sid, 3] - segs[sid, 1]) * frac
    on = segs[sid, 5] > 0

    gx, gy = px * cfg.raster_size_volts, py * cfg.raster_size_volts
    if cfg.xy_distortion is not None:
        m = np.asarray(cfg.xy_distortion, dtype=float).reshape(2, 2)
        if cfg.distortion_center is None:
            lo = model.coords[:, 1:].min(axis=0)
            hi = model.coords[:, 1:].max(axis=0) + 1
            c = (lo + hi) / 2 * cfg.raster_size_volts
        else:
            c = np.asarray(cfg.distortion_center, dtype=float)
        g = np.column_stack([gx - c[0], gy - c[1]]) @ m.T + c
        gx, gy = g[:, 0], g[:, 1]

    laser = np.where(on, cfg.laser_on_volts, cfg.laser_off_volts)
    if cfg.spike_rate > 0:
        # spikes only while a layer is being sintered, never in the idle gaps
        on_idx = np.flatnonzero(on)
        breaks = np.flatnonzero(np.diff(on_idx) >= cfg.layer_gap_samples)
        firsts = np.r_[on_idx[0], on_idx[breaks + 1]]
        lasts = np.r_[on_idx[breaks], on_idx[-1]]
        edges = np.zeros(total + 1, dtype=np.int64)
        np.add.at(edges, firsts, 1)
        np.add.at(edges, lasts + 1, -1)
        in_window = np.cumsum(edges[:-1]) > 0
        spikes = (rng.random(total) < cfg.spike_rate) & in_window
        laser = np.where(spikes, np.where(on, cfg.laser_off_volts, cfg.laser_on_volts), laser)
    if cfg.noise_sigma_volts > 0:
        noise = rng.normal(0.0, cfg.noise_sigma_volts, size=(3, total))
        laser, gx, gy = laser + noise[0], gx + noise[1], gy + noise[2]

    truth = VoxelGrid.from_cells(np.concatenate(gt), 1, cfg.raster_size_volts, n_print)
    return SignalTrace(cfg.sample_rate_hz, laser, gx, gy), truth


# -- procedural models -----------------------------------------------------


def _grid_from_mask(mask: np.ndarray, raster: float) -> VoxelGrid:
    """``mask`` is indexed [layer, rx, ry]."""
    coords = np.argwhere(mask)
    return VoxelGrid.from_cells(coords, 1, raster, mask.shape[0])


def box_model(nx: int, ny: int, nz: int, raster: float = 0.25) -> VoxelGrid:
    return _grid_from_mask(np.ones((nz, nx, ny), dtype=bool), raster)


def _disk(diameter: int) -> tuple[np.ndarray, np.ndarray]:
    c = (np.arange(diameter) + 0.5) - diameter / 2
    return np.meshgrid(c, c, indexing="ij")


def cylinder_model(diameter: int = 40, height: int = 20, raster: float = 0.25) -> VoxelGrid:
    x, y = _disk(diameter)
    disk = x**2 + y**2 <= (diameter / 2) ** 2
    return _grid_from_mask(np.broadcast_to(disk, (height, diameter, diameter)), raster)


def gear_model(
    n_teeth: int = 12,
    diameter: int = 40,
    height: int = 20,
    tooth_depth: float = 4.0,
    hole_diameter: float = 0.0,
    raster: float = 0.25,
) -> VoxelGrid:
    """Spur gear: root circle plus ``n_teeth`` rectangular-profile teeth, optional bore."""
    if n_teeth < 1:
        raise ConfigError("gear needs at least one tooth")
    x, y = _disk(diameter)
    r = np.hypot(x, y)
    ang = np.arctan2(y, x)
    tip = diameter / 2
    root = tip - tooth_depth
    tooth = np.cos(n_teeth * ang) >= 0
    solid = (r <= root) | ((r <= tip) & tooth)
    if hole_diameter > 0:
        solid &= r >= hole_diameter / 2
    return _grid_from_mask(np.broadcast_to(solid, (height, diameter, diameter)), raster)


def astm_bar_model(
    length: int = 120,
    grip_diameter: int = 20,
    gauge_diameter: int = 12,
    grip_length: int = 25,
    taper_length: int = 10,
    angle_rad: float = 0.0,
    raster: float = 0.25,
) -> VoxelGrid:
    """Round tensile bar lying on its side: the bar axis is in XY, layers cut across it."""
    half_len = length / 2
    reach = int(math.ceil(half_len * abs(math.cos(angle_rad)) + grip_diameter / 2 * abs(math.sin(angle_rad)))) + 1
    side = int(math.ceil(half_len * abs(math.sin(angle_rad)) + grip_diameter / 2 * abs(math.cos(angle_rad)))) + 1
    xs = np.arange(-reach, reach) + 0.5
    ys = np.arange(-side, side) + 0.5
    zs = np.arange(grip_diameter) + 0.5 - grip_diameter / 2
    z, x, y = np.meshgrid(zs, xs, ys, indexing="ij")
    u = x * math.cos(angle_rad) + y * math.sin(angle_rad)
    v = -x * math.sin(angle_rad) + y * math.cos(angle_rad)
    d = np.abs(u)
    g0 = half_len - grip_length
    g1 = g0 - taper_length
    t = np.clip((d - g1) / max(taper_length, 1e-9), 0, 1)
    radius = np.where(d > g0, grip_diameter / 2, gauge_diameter / 2 + t * (grip_diameter - gauge_diameter) / 2)
    solid = (d <= half_len) & (v**2 + z**2 <= radius**2)
    return _grid_from_mask(solid, raster)


# unit-square quads (two triangles each) for the face of a cell towards +axis
_FACE_QUADS = {
    0: np.array([[[1, 0, 0], [1, 1, 0], [1, 1, 1]], [[1, 0, 0], [1, 1, 1], [1, 0, 1]]], dtype=float),
    1: np.array([[[0, 1, 0], [0, 1, 1], [1, 1, 1]], [[0, 1, 0], [1, 1, 1], [1, 1, 0]]], dtype=float),
    2: np.array([[[0, 0, 1], [1, 0, 1], [1, 1, 1]], [[0, 0, 1], [1, 1, 1], [0, 1, 1]]], dtype=float),
}


def voxel_surface_mesh(model: VoxelGrid, cell_size: float = 1.0) -> TriangleMesh:
    """Closed, outward-oriented boundary of the voxel model in (x=rx, y=ry, z=layer).

    Cells are centred on their integer coordinates, so the mesh lines up with
    :func:`pbf_recon.geometry.grid_to_cloud` when ``cell_size`` is 1.
    """
    if len(model) == 0:
        raise DataError("model has no voxels")
    xyz = np.column_stack([model.coords[:, 1], model.coords[:, 2], model.coords[:, 0]])
    lo = xyz.min(axis=0) - 1
    occ = np.zeros(tuple(xyz.max(axis=0) - lo + 2), dtype=bool)
    occ[tuple((xyz - lo).T)] = True
    tris = []
    for axis in range(3):
        d = np.diff(occ.astype(np.int8), axis=axis)
        quad = _FACE_QUADS[axis]
        for sign in (1, -1):
            # +1: solid then empty along +axis, the face points forward; -1 flips it
            cells = np.argwhere(d == -sign).astype(float)
            if sign == -1:
                cells[:, axis] += 1
            q = quad if sign == 1 else quad[:, ::-1] - np.eye(3)[axis]
            tris.append(cells[:, None, None, :] + q[None])
    t = np.concatenate(tris).reshape(-1, 3, 3) + lo - 0.5
    return TriangleMesh(t * cell_size)


SHAPES = {
    "box": box_model,
    "cylinder": cylinder_model,
    "gear": gear_model,
    "astm_bar": astm_bar_model,
}
