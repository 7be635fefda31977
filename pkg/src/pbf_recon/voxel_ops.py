"""Voxel pruning, neighbourhood/gap diagnostics and projection-based gap filling."""

from __future__ import annotations

import enum
import logging
from collections import Counter
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .errors import ConfigError
from .rasterizer import VoxelGrid

logger = logging.getLogger(__name__)

# above this many cells in the padded bounding box, count neighbours with a k-d tree
_DENSE_CELL_LIMIT = 40_000_000


@dataclass(frozen=True)
class PruneConfig:
    min_hit: int = 1
    neighbor_range: int = 5
    min_neighbors: int = 33

    def __post_init__(self):
        for name in ("min_hit", "neighbor_range"):
            v = getattr(self, name)
            if int(v) != v or v < 1:
                raise ConfigError(f"{name} must be a positive integer, got {v}")
        cap = max_neighbors(self.neighbor_range)
        if int(self.min_neighbors) != self.min_neighbors or not 0 <= self.min_neighbors <= cap:
            raise ConfigError(
                f"min_neighbors {self.min_neighbors} exceeds (2r+1)^2-1 = {cap} for range {self.neighbor_range}"
            )


def max_neighbors(neighbor_range: int) -> int:
    """In-layer neighbour capacity at the given range, (2r+1)^2 - 1."""
    return (2 * neighbor_range + 1) ** 2 - 1


SIMPLE_PRUNE = PruneConfig(1, 5, 33)
DIFFERENTIAL_PRUNE = PruneConfig(3, 4, 22)


def prune_by_hit_count(grid: VoxelGrid, min_hit: int) -> VoxelGrid:
    return grid.subset(grid.hits >= min_hit)


def _dense_box_counts(coords: np.ndarray, radius: np.ndarray) -> np.ndarray:
    lo = coords.min(axis=0) - radius
    shape = coords.max(axis=0) + radius - lo + 1
    occ = np.zeros(tuple(shape + 1), dtype=np.int32)
    c = coords - lo + 1
    occ[c[:, 0], c[:, 1], c[:, 2]] = 1
    # summed-volume table with a zero border at index 0 on every axis
    for ax in range(3):
        np.cumsum(occ, axis=ax, out=occ)
    a = c - radius - 1
    b = c + radius
    total = np.zeros(len(coords), dtype=np.int64)
    for corner in range(8):
        idx = [b[:, k] if (corner >> k) & 1 else a[:, k] for k in range(3)]
        sign = -1 if (3 - bin(corner).count("1")) % 2 else 1
        total += sign * occ[idx[0], idx[1], idx[2]]
    return total


def _tree_box_counts(coords: np.ndarray, radius: np.ndarray) -> np.ndarray:
    # Chebyshev ball of radius R = r_xy + 0.5; the layer axis is stretched so
    # that a layer offset d falls inside iff d <= r_layer.
    r_layer, r_xy = int(radius[0]), int(radius[1])
    R = r_xy + 0.5
    scale = np.array([R / (r_layer + 0.5), 1.0, 1.0])
    pts = coords * scale
    tree = cKDTree(pts)
    return np.asarray(tree.query_ball_point(pts, r=R, p=np.inf, return_length=True), dtype=np.int64)


def box_counts(coords: np.ndarray, layer_range: int, xy_range: int) -> np.ndarray:
    """Occupied cells (self included) in the box ``layer±layer_range, rx±xy_range, ry±xy_range``."""
    coords = np.asarray(coords, dtype=np.int64).reshape(-1, 3)
    if len(coords) == 0:
        return np.empty(0, dtype=np.int64)
    radius = np.array([layer_range, xy_range, xy_range], dtype=np.int64)
    extent = coords.max(axis=0) - coords.min(axis=0) + 2 * radius + 2
    if np.prod(extent.astype(float)) <= _DENSE_CELL_LIMIT:
        return _dense_box_counts(coords, radius)
    return _tree_box_counts(coords, radius)


def neighbor_counts(grid: VoxelGrid, neighbor_range: int, planar: bool = False) -> np.ndarray:
    layer_range = 0 if planar else neighbor_range
    return box_counts(grid.coords, layer_range, neighbor_range) - 1


def prune_by_neighbors(grid: VoxelGrid, neighbor_range: int, min_neighbors: int) -> VoxelGrid:
    """Drop voxels with fewer than ``min_neighbors`` occupied cells in the 3-D box around them.

    Counts are taken on the input grid as a whole (no cascading removals).
    """
    if neighbor_range < 1:
        raise ConfigError(f"neighbor range must be >= 1, got {neighbor_range}")
    if len(grid) == 0:
        return grid
    return grid.subset(neighbor_counts(grid, neighbor_range) >= min_neighbors)


def prune(grid: VoxelGrid, cfg: PruneConfig) -> VoxelGrid:
    g = prune_by_hit_count(grid, cfg.min_hit)
    return prune_by_neighbors(g, cfg.neighbor_range, cfg.min_neighbors)


def neighbor_count_histogram(grid: VoxelGrid, neighbor_range: int) -> dict[int, int]:
    """Histogram of in-layer (2-D) neighbour counts over occupied voxels."""
    counts = neighbor_counts(grid, neighbor_range, planar=True)
    return dict(sorted(Counter(counts.tolist()).items()))


def gap_stretch_histogram(grid: VoxelGrid) -> dict[int, int]:
    """Lengths of empty runs between two occupied cells along rx, per (layer, ry) row."""
    c = grid.coords
    if len(c) < 2:
        return {}
    order = np.lexsort((c[:, 1], c[:, 2], c[:, 0]))
    s = c[order]
    same_row = (s[1:, 0] == s[:-1, 0]) & (s[1:, 2] == s[:-1, 2])
    gaps = (s[1:, 1] - s[:-1, 1] - 1)[same_row]
    gaps = gaps[gaps > 0]
    return dict(sorted(Counter(gaps.tolist()).items()))


class Direction(enum.Enum):
    UP = "up"
    DOWN = "down"
    BIDIRECTIONAL = "bidirectional"


class FillStrategy(enum.Enum):
    GEAR_UP = "gear_up"
    ASTM_BIDIRECTIONAL = "astm_bidirectional"
    NONE = "none"


@dataclass(frozen=True)
class ColumnSurface:
    """Extreme layer and summed hits per surviving ``(rx, ry)`` column."""

    xy: np.ndarray
    layer: np.ndarray
    hits: np.ndarray

    def __len__(self) -> int:
        return len(self.layer)

    def as_dict(self) -> dict[tuple[int, int], int]:
        return {tuple(k): v for k, v in zip(self.xy.tolist(), self.layer.tolist())}

    def hits_dict(self) -> dict[tuple[int, int], int]:
        return {tuple(k): v for k, v in zip(self.xy.tolist(), self.hits.tolist())}


@dataclass(frozen=True)
class ColumnProjection:
    direction: Direction
    min_hit_filter: int
    layer_count: int
    middle_layer: int | None = None
    upper: ColumnSurface | None = None
    lower: ColumnSurface | None = None

    @property
    def surface(self) -> dict[tuple[int, int], int]:
        return (self.lower if self.direction is Direction.DOWN else self.upper).as_dict()

    @property
    def aggregated_hits(self) -> dict[tuple[int, int], int]:
        return (self.lower if self.direction is Direction.DOWN else self.upper).hits_dict()


def default_middle_layer(layer_count: int) -> int:
    return max((layer_count + 1) // 2 - 1, 0)


def _column_surface(coords: np.ndarray, hits: np.ndarray, take_max: bool, min_hit: int) -> ColumnSurface:
    if len(coords) == 0:
        return ColumnSurface(np.empty((0, 2), np.int64), np.empty(0, np.int64), np.empty(0, np.int64))
    xy, inv = np.unique(coords[:, 1:], axis=0, return_inverse=True)
    inv = inv.reshape(-1)
    if take_max:
        layer = np.full(len(xy), -1, dtype=np.int64)
        np.maximum.at(layer, inv, coords[:, 0])
    else:
        layer = np.full(len(xy), np.iinfo(np.int64).max, dtype=np.int64)
        np.minimum.at(layer, inv, coords[:, 0])
    total = np.bincount(inv, weights=hits, minlength=len(xy)).astype(np.int64)
    keep = total >= min_hit
    return ColumnSurface(xy[keep].astype(np.int64), layer[keep], total[keep])


def project_columns(
    grid: VoxelGrid, direction: Direction, min_hit_filter: int = 20, middle_layer: int | None = None
) -> ColumnProjection:
    """Collapse every (rx, ry) column onto its extreme layer, summing the hits.

    Columns whose summed hits fall below ``min_hit_filter`` are dropped. The
    bidirectional form projects layers <= middle down and layers >= middle up.
    """
    direction = Direction(direction)
    if min_hit_filter < 1:
        raise ConfigError(f"min_hit_filter must be >= 1, got {min_hit_filter}")
    c, h = grid.coords, grid.hits
    if direction is Direction.UP:
        return ColumnProjection(direction, min_hit_filter, grid.layer_count, upper=_column_surface(c, h, True, min_hit_filter))
    if direction is Direction.DOWN:
        return ColumnProjection(direction, min_hit_filter, grid.layer_count, lower=_column_surface(c, h, False, min_hit_filter))
    if middle_layer is None:
        middle_layer = default_middle_layer(grid.layer_count)
    if grid.layer_count and not 0 <= middle_layer < grid.layer_count:
        raise ConfigError(f"middle layer {middle_layer} outside [0, {grid.layer_count})")
    top = c[:, 0] >= middle_layer
    bottom = c[:, 0] <= middle_layer
    return ColumnProjection(
        direction,
        min_hit_filter,
        grid.layer_count,
        middle_layer,
        upper=_column_surface(c[top], h[top], True, min_hit_filter),
        lower=_column_surface(c[bottom], h[bottom], False, min_hit_filter),
    )


def _expand(xy: np.ndarray, first: np.ndarray, stop: np.ndarray) -> np.ndarray:
    """All (layer, rx, ry) with ``first <= layer < stop`` for each column."""
    n = np.clip(stop - first, 0, None)
    if n.sum() == 0:
        return np.empty((0, 3), dtype=np.int64)
    col = np.repeat(np.arange(len(n)), n)
    offset = np.arange(n.sum()) - np.repeat(np.cumsum(n) - n, n)
    return np.column_stack([first[col] + offset, xy[col, 0], xy[col, 1]]).astype(np.int64)


def _encode(c: np.ndarray, lo: np.ndarray, span: np.ndarray) -> np.ndarray:
    d = c - lo
    return (d[:, 0] * span[1] + d[:, 1]) * span[2] + d[:, 2]


def fill_gaps(grid: VoxelGrid, proj: ColumnProjection) -> VoxelGrid:
    """Light empty voxels admitted by the projection with hit 1; originals get +1.

    The +1 on original voxels keeps them distinguishable (hit >= 2) from the
    filled ones (hit == 1).
    """
    parts = []
    last = grid.layer_count
    if proj.upper is not None and len(proj.upper):
        floor = proj.middle_layer if proj.direction is Direction.BIDIRECTIONAL else 0
        parts.append(_expand(proj.upper.xy, np.full(len(proj.upper), floor), proj.upper.layer))
    if proj.lower is not None and len(proj.lower):
        ceiling = proj.middle_layer + 1 if proj.direction is Direction.BIDIRECTIONAL else last
        parts.append(_expand(proj.lower.xy, proj.lower.layer + 1, np.full(len(proj.lower), ceiling)))
    cand = np.concatenate(parts) if parts else np.empty((0, 3), dtype=np.int64)
    if len(grid) and len(cand):
        both = np.concatenate([grid.coords, cand])
        lo = both.min(axis=0)
        span = both.max(axis=0) - lo + 1
        cand = cand[~np.isin(_encode(cand, lo, span), _encode(grid.coords, lo, span))]
    if len(cand):
        cand = np.unique(cand, axis=0)
    coords = np.concatenate([grid.coords, cand])
    hits = np.concatenate([grid.hits + 1, np.ones(len(cand), dtype=np.int64)])
    layer_count = max(grid.layer_count, int(coords[:, 0].max()) + 1 if len(coords) else 0)
    logger.debug("gap filling lit %d voxels", len(cand))
    return VoxelGrid.from_cells(coords, hits, grid.raster, layer_count)


def fill_with_strategy(
    grid: VoxelGrid, strategy: FillStrategy, projection_min_hit: int = 20, middle_layer: int | None = None
) -> tuple[VoxelGrid, ColumnProjection | None]:
    strategy = FillStrategy(strategy)
    if strategy is FillStrategy.NONE:
        return grid, None
    direction = Direction.UP if strategy is FillStrategy.GEAR_UP else Direction.BIDIRECTIONAL
    proj = project_columns(grid, direction, projection_min_hit, middle_layer)
    return fill_gaps(grid, proj), proj
