"""Raster-size calibration from the seesaw swing of a reference layer."""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass

import numpy as np

from .errors import DataError, DegenerateInputError
from .rasterizer import VoxelGrid
from .signal_prep import CALIBRATION_FILTER, FilterSpec, lowpass_filter

# The raster actually used for reconstruction; the derived cubical raster is
# reported next to it but not adopted automatically.
OPERATIONAL_RASTER_VOLTS = 0.0025


@dataclass(frozen=True)
class SwingMeasurement:
    max_delta_x: float
    max_delta_y: float

    @property
    def combined(self) -> float:
        return math.hypot(self.max_delta_x, self.max_delta_y)


def _strict_extrema(x: np.ndarray) -> list[tuple[int, float]]:
    change = np.flatnonzero(x[1:] != x[:-1]) + 1
    starts = np.concatenate(([0], change))
    ends = np.concatenate((change, [len(x)])) - 1
    vals = x[starts]
    if len(vals) < 3:
        return []
    mid = vals[1:-1]
    is_max = (mid > vals[:-2]) & (mid > vals[2:])
    is_min = (mid < vals[:-2]) & (mid < vals[2:])
    runs = np.flatnonzero(is_max | is_min) + 1
    centres = (starts[runs] + ends[runs]) // 2
    return [(int(i), float(x[i])) for i in centres]


def _zigzag(x: np.ndarray, extrema, min_swing: float) -> list[tuple[int, float]]:
    """Keep only turning points the signal leaves by at least ``min_swing``."""
    pts = [(0, float(x[0]))] + extrema + [(len(x) - 1, float(x[-1]))]
    out = []
    hi = lo = pts[0]
    trend = 0
    ext = None
    for p in pts[1:]:
        if trend == 0:
            hi = p if p[1] > hi[1] else hi
            lo = p if p[1] < lo[1] else lo
            if hi[1] - lo[1] >= min_swing:
                first, ext = (lo, hi) if lo[0] < hi[0] else (hi, lo)
                trend = 1 if ext is hi else -1
                if first[0] != 0 and abs(first[1] - x[0]) >= min_swing:
                    out.append(first)
        elif trend * (p[1] - ext[1]) > 0:
            ext = p
        elif abs(p[1] - ext[1]) >= min_swing:
            out.append(ext)
            ext, trend = p, -trend
    return [q for q in out if 0 < q[0] < len(x) - 1]


def find_peaks(x, min_swing: float = 0.0) -> list[tuple[int, float]]:
    """Local extrema, alternating max/min, endpoints excluded.

    Runs of equal values are collapsed first; a plateau that forms an extremum
    is reported at its centre index (lower middle for even lengths). With
    ``min_swing > 0`` only turning points that the signal leaves by at least
    that much are kept, which suppresses noise wiggles near the reversals.
    """
    x = np.asarray(x, dtype=float)
    if len(x) < 3:
        return []
    extrema = _strict_extrema(x)
    if min_swing <= 0 or not extrema:
        return extrema
    return _zigzag(x, extrema, min_swing)


def max_consecutive_peak_delta(x, calibration_filter: FilterSpec | None = None, min_swing: float = 0.0) -> float:
    """Largest |difference| between neighbouring peaks of the smoothed signal."""
    y = lowpass_filter(x, calibration_filter or CALIBRATION_FILTER)
    peaks = find_peaks(y, min_swing)
    if len(peaks) < 2:
        return 0.0
    v = np.array([p[1] for p in peaks])
    return float(np.abs(np.diff(v)).max())


def measure_swing(galvo_x, galvo_y, calibration_filter: FilterSpec | None = None) -> SwingMeasurement:
    return SwingMeasurement(
        max_consecutive_peak_delta(galvo_x, calibration_filter),
        max_consecutive_peak_delta(galvo_y, calibration_filter),
    )


def derive_raster_size(swing: SwingMeasurement, layer_count: int) -> float:
    """Raster giving cubical voxels: in-plane diameter swing spread over the layer count."""
    if layer_count < 1:
        raise DataError(f"layer_count must be >= 1, got {layer_count}")
    if swing.combined <= 0:
        raise DegenerateInputError("zero galvanometer swing; wrong calibration layer?")
    return swing.combined / layer_count


def default_calibration_layer(layer_count: int) -> int:
    """0-based index of the middle layer (the 51st of 101)."""
    return max(math.ceil(layer_count / 2) - 1, 0)


def hit_count_histogram(grid: VoxelGrid) -> dict[int, int]:
    return dict(sorted(Counter(grid.hits.tolist()).items()))


def single_hit_fraction(grid: VoxelGrid) -> float:
    return float(np.mean(grid.hits == 1)) if len(grid) else 0.0
