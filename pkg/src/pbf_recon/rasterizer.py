"""Sparse hit-counted voxel grids and rasterisation of sintered samples.

Cells are keyed ``(layer, rx, ry)``. The grid stores only cells with at least
one hit, as two parallel arrays kept in lexicographic key order.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DataError, IncompatibleGridError, ParseError
from .segmentation import LayerBoundaries
from .trace_io import PointCloud, load_point_cloud_csv, read_csv_metadata, write_point_cloud_csv


def _check_raster(raster: float) -> float:
    raster = float(raster)
    if not (raster > 0 and np.isfinite(raster)):
        raise ConfigError(f"raster size must be > 0, got {raster}")
    return raster


def _unique_sum(coords: np.ndarray, hits: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    if len(coords) == 0:
        return np.empty((0, 3), dtype=np.int64), np.empty(0, dtype=np.int64)
    # lexsort plus run boundaries; much faster than np.unique(axis=0) on large inputs
    order = np.lexsort((coords[:, 2], coords[:, 1], coords[:, 0]))
    c = coords[order]
    starts = np.r_[0, np.flatnonzero((c[1:] != c[:-1]).any(axis=1)) + 1]
    summed = np.add.reduceat(np.asarray(hits, dtype=np.int64)[order], starts)
    return c[starts].astype(np.int64), summed


def _strictly_sorted(c: np.ndarray) -> bool:
    if len(c) < 2:
        return True
    d = np.sign(c[1:] - c[:-1])
    # first non-zero component of each consecutive difference must be +1
    first = d[np.arange(len(d)), np.argmax(d != 0, axis=1)]
    return bool((first > 0).all())


@dataclass(frozen=True, eq=False)
class VoxelGrid:
    coords: np.ndarray
    hits: np.ndarray
    raster: float
    layer_count: int

    def __post_init__(self):
        c = np.asarray(self.coords, dtype=np.int64).reshape(-1, 3)
        h = np.asarray(self.hits, dtype=np.int64).reshape(-1)
        if len(c) != len(h):
            raise DataError(f"{len(c)} cells but {len(h)} hit counts")
        if len(h) and h.min() < 1:
            raise DataError("stored hit counts must be >= 1")
        if self.layer_count < 0:
            raise DataError("layer_count must be >= 0")
        if len(c) and (c[:, 0].min() < 0 or c[:, 0].max() >= self.layer_count):
            raise DataError(f"layer index outside [0, {self.layer_count})")
        if not _strictly_sorted(c):
            raise DataError("cells must be unique and in (layer, rx, ry) order; use VoxelGrid.from_cells")
        c.setflags(write=False)
        h.setflags(write=False)
        object.__setattr__(self, "coords", c)
        object.__setattr__(self, "hits", h)
        object.__setattr__(self, "raster", _check_raster(self.raster))

    @classmethod
    def from_cells(cls, coords, hits, raster: float, layer_count: int | None = None) -> "VoxelGrid":
        """Build a grid from possibly repeated, unsorted cells; hits of repeats add up."""
        coords = np.asarray(coords, dtype=np.int64).reshape(-1, 3)
        hits = np.broadcast_to(np.asarray(hits, dtype=np.int64), (len(coords),))
        keep = hits > 0
        c, h = _unique_sum(coords[keep], hits[keep])
        c, h = c[h > 0], h[h > 0]
        if layer_count is None:
            layer_count = int(c[:, 0].max()) + 1 if len(c) else 0
        return cls(c, h, raster, layer_count)

    @classmethod
    def from_dict(cls, cells: dict, raster: float, layer_count: int | None = None) -> "VoxelGrid":
        keys = list(cells)
        return cls.from_cells(np.array(keys, dtype=np.int64).reshape(-1, 3), [cells[k] for k in keys], raster, layer_count)

    @classmethod
    def empty(cls, raster: float, layer_count: int = 0) -> "VoxelGrid":
        return cls(np.empty((0, 3), dtype=np.int64), np.empty(0, dtype=np.int64), raster, layer_count)

    def __len__(self) -> int:
        return len(self.hits)

    def __eq__(self, other) -> bool:
        if not isinstance(other, VoxelGrid):
            return NotImplemented
        return (
            self.raster == other.raster
            and self.layer_count == other.layer_count
            and np.array_equal(self.coords, other.coords)
            and np.array_equal(self.hits, other.hits)
        )

    def as_dict(self) -> dict[tuple[int, int, int], int]:
        return {tuple(k): h for k, h in zip(self.coords.tolist(), self.hits.tolist())}

    def occupied(self) -> set[tuple[int, int, int]]:
        return set(map(tuple, self.coords.tolist()))

    @property
    def total_hits(self) -> int:
        return int(self.hits.sum())

    def subset(self, mask) -> "VoxelGrid":
        mask = np.asarray(mask, dtype=bool)
        return VoxelGrid(self.coords[mask], self.hits[mask], self.raster, self.layer_count)

    def with_hits(self, hits) -> "VoxelGrid":
        return VoxelGrid(self.coords, hits, self.raster, self.layer_count)


def rasterize_layers(laser, galvo_x, galvo_y, boundaries: LayerBoundaries, raster: float) -> VoxelGrid:
    """Bin every ON sample inside a layer interval into ``(layer, rx, ry)``.

    ``rx = floor(gx / raster)``; floor (not truncation) keeps negative volts
    on a consistent lattice anchored at 0 V.
    """
    raster = _check_raster(raster)
    on = np.asarray(laser, dtype=bool)
    gx = np.asarray(galvo_x, dtype=float)
    gy = np.asarray(galvo_y, dtype=float)
    if not (len(on) == len(gx) == len(gy)):
        raise DataError("laser and galvo channels differ in length")
    if len(boundaries) and boundaries.ends[-1] >= len(on):
        raise DataError(f"layer boundary {int(boundaries.ends[-1])} beyond trace length {len(on)}")

    layer_of = np.full(len(on), -1, dtype=np.int64)
    for layer, (s, e) in enumerate(boundaries):
        layer_of[s : e + 1] = layer
    take = on & (layer_of >= 0)
    coords = np.column_stack(
        [
            layer_of[take],
            np.floor(gx[take] / raster).astype(np.int64),
            np.floor(gy[take] / raster).astype(np.int64),
        ]
    )
    return VoxelGrid.from_cells(coords, 1, raster, len(boundaries))


def differential_voxelization(grids) -> VoxelGrid:
    """Cell-wise sum of hit counters over prints of the same object."""
    grids = list(grids)
    if not grids:
        raise DataError("differential_voxelization needs at least one grid")
    first = grids[0]
    for g in grids[1:]:
        if g.raster != first.raster:
            raise IncompatibleGridError(f"raster sizes differ: {first.raster} vs {g.raster}")
        if g.layer_count != first.layer_count:
            raise IncompatibleGridError(f"layer counts differ: {first.layer_count} vs {g.layer_count}")
    coords = np.concatenate([g.coords for g in grids])
    hits = np.concatenate([g.hits for g in grids])
    return VoxelGrid.from_cells(coords, hits, first.raster, first.layer_count)


def write_grid_csv(grid: VoxelGrid, path) -> None:
    """Point-cloud CSV with ``x=rx, y=ry, z=layer, weight=hit``; raster and layer count as metadata."""
    xyz = np.column_stack([grid.coords[:, 1], grid.coords[:, 2], grid.coords[:, 0]])
    meta = {"raster": repr(grid.raster), "layer_count": grid.layer_count}
    write_point_cloud_csv(PointCloud(xyz, grid.hits), path, meta)


def load_grid_csv(path, raster: float | None = None) -> VoxelGrid:
    meta = read_csv_metadata(path)
    try:
        if raster is None:
            if "raster" not in meta:
                raise ParseError(f"{path}: no '# raster=' metadata and no raster given", line=1)
            raster = float(meta["raster"])
        layer_count = int(meta["layer_count"]) if "layer_count" in meta else None
    except ValueError as exc:
        raise ParseError(f"{path}: bad grid metadata ({exc})", line=1) from None
    cloud = load_point_cloud_csv(path)
    idx = np.rint(cloud.xyz).astype(np.int64)
    if not np.array_equal(idx, cloud.xyz):
        raise DataError(f"{path}: grid coordinates must be integers")
    coords = np.column_stack([idx[:, 2], idx[:, 0], idx[:, 1]])
    return VoxelGrid.from_cells(coords, cloud.weights, raster, layer_count)
