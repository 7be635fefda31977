"""Slow, obviously-correct reference implementations used only by the tests."""

import itertools
import math

import numpy as np


def hysteresis_replay(raw, on_th, off_th):
    state = False
    out = []
    for v in raw:
        if v >= on_th:
            state = True
        elif v <= off_th:
            state = False
        out.append(state)
    return out


def rle_merge_layers(states, threshold):
    """Maximal ON runs, merged across OFF runs no longer than ``threshold``."""
    runs = []
    i = 0
    for value, group in itertools.groupby(states):
        n = len(list(group))
        if value:
            runs.append([i, i + n - 1])
        i += n
    merged = []
    for s, e in runs:
        if merged and s - merged[-1][1] - 1 <= threshold:
            merged[-1][1] = e
        else:
            merged.append([s, e])
    return [tuple(r) for r in merged]


def butterworth_gain(f, cutoff, fs, order):
    """Digital Butterworth magnitude after the prewarped bilinear transform."""
    w = math.tan(math.pi * f / fs) / math.tan(math.pi * cutoff / fs)
    return 1 / math.sqrt(1 + w ** (2 * order))


def steady_amplitude(y, freq, fs, skip):
    """Least-squares amplitude of a sinusoid of known frequency in ``y[skip:]``."""
    t = np.arange(len(y))[skip:] / fs
    a = np.column_stack([np.sin(2 * np.pi * freq * t), np.cos(2 * np.pi * freq * t)])
    coef, *_ = np.linalg.lstsq(a, y[skip:], rcond=None)
    return float(np.hypot(*coef))


def brute_neighbors(cells, r_layer, r_xy):
    cells = list(cells)
    occupied = set(cells)
    out = []
    for l, x, y in cells:
        n = 0
        for dl in range(-r_layer, r_layer + 1):
            for dx in range(-r_xy, r_xy + 1):
                for dy in range(-r_xy, r_xy + 1):
                    if (dl, dx, dy) != (0, 0, 0) and (l + dl, x + dx, y + dy) in occupied:
                        n += 1
        out.append(n)
    return out


def dense_rasterize(on, gx, gy, intervals, raster):
    """Dense array indexed by floor volts; returns {(layer, rx, ry): hits}."""
    if not any(on):
        return {}
    rx = [math.floor(v / raster) for v in gx]
    ry = [math.floor(v / raster) for v in gy]
    x0, y0 = min(rx), min(ry)
    arr = np.zeros((max(len(intervals), 1), max(rx) - x0 + 1, max(ry) - y0 + 1), dtype=int)
    for layer, (s, e) in enumerate(intervals):
        for i in range(s, e + 1):
            if on[i]:
                arr[layer, rx[i] - x0, ry[i] - y0] += 1
    return {(int(l), int(x) + x0, int(y) + y0): int(arr[l, x, y]) for l, x, y in zip(*np.nonzero(arr))}


def brute_compare(ref_cells, rec_cells, dims):
    tp = fp = fn = 0
    for i in range(dims[0]):
        for j in range(dims[1]):
            for k in range(dims[2]):
                a = (i, j, k) in ref_cells
                b = (i, j, k) in rec_cells
                tp += a and b
                fn += a and not b
                fp += b and not a
    return tp, fp, fn


def shifted_neighbors(cells, r_layer, r_xy):
    """Same counts as :func:`brute_neighbors`, looping over box offsets on a dense array."""
    c = np.asarray(cells, dtype=np.int64).reshape(-1, 3)
    if len(c) == 0:
        return np.empty(0, dtype=np.int64)
    pad = np.array([r_layer, r_xy, r_xy])
    lo = c.min(axis=0) - pad
    occ = np.zeros(tuple(c.max(axis=0) + pad - lo + 1), dtype=np.int64)
    idx = c - lo
    occ[tuple(idx.T)] = 1
    counts = np.zeros(len(c), dtype=np.int64)
    for dl in range(-r_layer, r_layer + 1):
        for dx in range(-r_xy, r_xy + 1):
            for dy in range(-r_xy, r_xy + 1):
                if (dl, dx, dy) != (0, 0, 0):
                    counts += occ[idx[:, 0] + dl, idx[:, 1] + dx, idx[:, 2] + dy]
    return counts


def random_cells(rng, shape, density):
    mask = rng.random(shape) < density
    return [tuple(map(int, t)) for t in np.argwhere(mask)]
