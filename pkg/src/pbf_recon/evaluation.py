"""Volumetric comparison of a reconstruction against a reference model."""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DataError, DegenerateInputError, IncompatibleGridError
from .rasterizer import VoxelGrid
from .trace_io import PointCloud, TriangleMesh

logger = logging.getLogger(__name__)

# fixed irrational offsets (in cells) for parity rays so they avoid mesh edges
_RAY_JITTER = (math.sqrt(2) * 1e-6, math.sqrt(3) * 1e-6)


@dataclass(frozen=True, eq=False)
class OccupancyGrid:
    dims: tuple[int, int, int]
    origin: np.ndarray
    cell_size: float
    occupied: np.ndarray = field(default_factory=lambda: np.empty((0, 3), dtype=np.int64))
    out_of_bounds: int = 0

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        if len(dims) != 3 or min(dims) < 1:
            raise ConfigError(f"grid dims must be three positive integers, got {self.dims}")
        if not self.cell_size > 0:
            raise ConfigError(f"cell_size must be > 0, got {self.cell_size}")
        occ = np.asarray(self.occupied, dtype=np.int64).reshape(-1, 3)
        if len(occ):
            occ = np.unique(occ, axis=0)
            if occ.min() < 0 or (occ >= np.array(dims)).any():
                raise DataError("occupied index outside grid dims")
        origin = np.array(self.origin, dtype=float).reshape(3)
        occ.setflags(write=False)
        origin.setflags(write=False)
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "origin", origin)
        object.__setattr__(self, "occupied", occ)
        object.__setattr__(self, "cell_size", float(self.cell_size))

    def __len__(self) -> int:
        return len(self.occupied)

    def centers(self, idx=None) -> np.ndarray:
        idx = self.occupied if idx is None else np.asarray(idx).reshape(-1, 3)
        return self.origin + (idx + 0.5) * self.cell_size

    def same_lattice(self, other: "OccupancyGrid") -> bool:
        return (
            self.dims == other.dims
            and self.cell_size == other.cell_size
            and np.array_equal(self.origin, other.origin)
        )

    def with_occupied(self, occupied, out_of_bounds: int = 0) -> "OccupancyGrid":
        return OccupancyGrid(self.dims, self.origin, self.cell_size, occupied, out_of_bounds)

    def keys(self) -> np.ndarray:
        nx, ny, nz = self.dims
        o = self.occupied
        return (o[:, 0] * ny + o[:, 1]) * nz + o[:, 2]


def occupancy_from_voxels(grid: VoxelGrid, padding: int = 0) -> OccupancyGrid:
    """Ground-truth voxels as an occupancy grid with x = rx, y = ry, z = layer.

    Cell centres sit on integer coordinates, matching :func:`grid_to_cloud`.
    """
    if len(grid) == 0:
        raise DataError("empty voxel grid")
    xyz = np.column_stack([grid.coords[:, 1], grid.coords[:, 2], grid.coords[:, 0]])
    lo = xyz.min(axis=0) - padding
    dims = tuple((xyz.max(axis=0) + padding - lo + 1).tolist())
    return OccupancyGrid(dims, lo - 0.5, 1.0, xyz - lo)


# -- mesh voxelisation ----------------------------------------------------


def _edge_counts_ok(tris: np.ndarray) -> bool:
    v = tris.reshape(-1, 3)
    scale = max(float(np.abs(v).max()), 1.0)
    q = np.rint(v / (scale * 1e-9)).astype(np.int64)
    _, vid = np.unique(q, axis=0, return_inverse=True)
    vid = vid.reshape(-1, 3)
    edges = np.concatenate([vid[:, [0, 1]], vid[:, [1, 2]], vid[:, [2, 0]]])
    edges.sort(axis=1)
    _, counts = np.unique(edges, axis=0, return_counts=True)
    return bool((counts % 2 == 0).all())


def _tri_box_overlap(tris: np.ndarray, centers: np.ndarray, half: float) -> np.ndarray:
    """Separating-axis test of triangle k against the cube at ``centers[k]``; touching does not count."""
    r0 = half * (1 - 1e-7)
    v = tris - centers[:, None, :]
    e = np.stack([tris[:, 1] - tris[:, 0], tris[:, 2] - tris[:, 1], tris[:, 0] - tris[:, 2]], axis=1)
    eye = np.eye(3)
    axes = [np.broadcast_to(eye[k], (len(tris), 3)) for k in range(3)]
    axes.append(np.cross(e[:, 0], e[:, 1]))
    for k in range(3):
        for j in range(3):
            axes.append(np.cross(eye[k], e[:, j]))
    hit = np.ones(len(tris), dtype=bool)
    for a in axes:
        # zero axes (parallel edges) project everything to 0 and never separate
        p = np.einsum("kvc,kc->kv", v, a)
        r = r0 * np.abs(a).sum(axis=1)
        hit &= ~((p.min(axis=1) > r) | (p.max(axis=1) < -r))
    return hit


def voxelize_mesh(mesh: TriangleMesh, cell_size: float, padding: int = 0) -> OccupancyGrid:
    """Solid voxelisation: cells whose centre is inside (ray parity along +x)
    plus cells whose interior the surface passes through.

    A mesh that is not closed falls back to surface cells only.
    """
    if not cell_size > 0:
        raise ConfigError(f"cell_size must be > 0, got {cell_size}")
    tris = mesh.triangles
    area2 = np.linalg.norm(np.cross(tris[:, 1] - tris[:, 0], tris[:, 2] - tris[:, 0]), axis=1)
    degenerate = area2 <= 1e-14 * max(float(np.abs(tris).max()), 1.0) ** 2
    if degenerate.any():
        warnings.warn(f"skipped {int(degenerate.sum())} degenerate triangles", stacklevel=2)
        tris = tris[~degenerate]
    if len(tris) == 0:
        raise DegenerateInputError("mesh has only degenerate triangles")

    lo, hi = tris.reshape(-1, 3).min(axis=0), tris.reshape(-1, 3).max(axis=0)
    n = np.maximum(np.ceil((hi - lo) / cell_size - 1e-9), 1).astype(np.int64)
    origin = lo - padding * cell_size
    dims = n + 2 * padding
    occupied = [_surface_cells(tris, origin, dims, cell_size)]

    if _edge_counts_ok(tris):
        occupied.append(_parity_cells(tris, origin, dims, cell_size))
    else:
        msg = "mesh is not watertight; voxelising the surface only"
        logger.warning(msg)
        warnings.warn(msg, stacklevel=2)
    occ = np.unique(np.concatenate(occupied), axis=0)
    return OccupancyGrid(tuple(dims.tolist()), origin, cell_size, occ)


def _cell_range(lo, hi, origin, dims, cell):
    a = np.clip(np.floor((lo - origin) / cell).astype(np.int64), 0, dims - 1)
    b = np.clip(np.floor((hi - origin) / cell).astype(np.int64), 0, dims - 1)
    return a, b


def _surface_cells(tris, origin, dims, cell, chunk: int = 1 << 20) -> np.ndarray:
    lo, hi = _cell_range(tris.min(axis=1), tris.max(axis=1), origin, dims, cell)
    span = hi - lo + 1
    per_tri = span.prod(axis=1)
    out = []
    # candidate (triangle, cell) pairs from each bounding box, tested in bounded batches
    batch = (np.cumsum(per_tri) - per_tri) // chunk
    for idx in np.split(np.arange(len(tris)), np.flatnonzero(np.diff(batch)) + 1):
        tri_of = np.repeat(idx, per_tri[idx])
        k = np.arange(len(tri_of)) - np.repeat(np.cumsum(per_tri[idx]) - per_tri[idx], per_tri[idx])
        s = span[tri_of]
        off = np.column_stack([k // (s[:, 1] * s[:, 2]), (k // s[:, 2]) % s[:, 1], k % s[:, 2]])
        grid = lo[tri_of] + off
        centers = origin + (grid + 0.5) * cell
        out.append(grid[_tri_box_overlap(tris[tri_of], centers, cell / 2)])
    return np.concatenate(out) if out else np.empty((0, 3), dtype=np.int64)


def _parity_cells(tris, origin, dims, cell) -> np.ndarray:
    nx, ny, nz = (int(d) for d in dims)
    jy, jz = _RAY_JITTER[0] * cell, _RAY_JITTER[1] * cell
    rows, xs = [], []
    for tri in tris:
        y, z = tri[:, 1], tri[:, 2]
        iy0 = max(int(math.ceil((y.min() - jy - origin[1]) / cell - 0.5)), 0)
        iy1 = min(int(math.floor((y.max() - jy - origin[1]) / cell - 0.5)), ny - 1)
        iz0 = max(int(math.ceil((z.min() - jz - origin[2]) / cell - 0.5)), 0)
        iz1 = min(int(math.floor((z.max() - jz - origin[2]) / cell - 0.5)), nz - 1)
        if iy1 < iy0 or iz1 < iz0:
            continue
        iy, iz = np.meshgrid(np.arange(iy0, iy1 + 1), np.arange(iz0, iz1 + 1), indexing="ij")
        iy, iz = iy.ravel(), iz.ravel()
        py = origin[1] + (iy + 0.5) * cell + jy
        pz = origin[2] + (iz + 0.5) * cell + jz
        # barycentric coordinates in the yz projection
        d = (y[1] - y[0]) * (z[2] - z[0]) - (y[2] - y[0]) * (z[1] - z[0])
        if d == 0:
            continue
        w1 = ((py - y[0]) * (z[2] - z[0]) - (y[2] - y[0]) * (pz - z[0])) / d
        w2 = ((y[1] - y[0]) * (pz - z[0]) - (py - y[0]) * (z[1] - z[0])) / d
        w0 = 1 - w1 - w2
        inside = (w0 >= 0) & (w1 >= 0) & (w2 >= 0)
        if not inside.any():
            continue
        x = w0 * tri[0, 0] + w1 * tri[1, 0] + w2 * tri[2, 0]
        rows.append((iy[inside] * nz + iz[inside]))
        xs.append(x[inside])
    if not rows:
        return np.empty((0, 3), dtype=np.int64)
    rows = np.concatenate(rows)
    xs = np.concatenate(xs)
    order = np.lexsort((xs, rows))
    rows, xs = rows[order], xs[order]
    cx = origin[0] + (np.arange(nx) + 0.5) * cell
    out = []
    bounds = np.flatnonzero(np.diff(rows)) + 1
    for seg in np.split(np.arange(len(rows)), bounds):
        row = int(rows[seg[0]])
        crossings = len(seg) - np.searchsorted(xs[seg], cx, side="right")
        ix = np.flatnonzero(crossings % 2 == 1)
        if len(ix):
            out.append(np.column_stack([ix, np.full(len(ix), row // nz), np.full(len(ix), row % nz)]))
    return np.concatenate(out) if out else np.empty((0, 3), dtype=np.int64)


# -- alignment ------------------------------------------------------------

SCALE_RULES = ("gear_base_diameter", "astm_mean_axis")


def estimate_scale(cloud: PointCloud, reference: OccupancyGrid, scale_rule) -> np.ndarray:
    """Per-axis scale factors taking the cloud to the reference size.

    Sizes are compared through standard deviations, which do not depend on
    whether a model is sampled at cell centres or more densely.
    """
    if len(cloud) == 0 or len(reference) == 0:
        raise DataError("alignment needs a non-empty cloud and reference")
    if not isinstance(scale_rule, str):
        s = np.asarray(scale_rule, dtype=float).reshape(3)
        if not (s > 0).all():
            raise ConfigError(f"explicit scale factors must be > 0, got {s.tolist()}")
        return s
    ref = reference.centers()
    sd_ref = ref.std(axis=0)
    sd_rec = cloud.xyz.std(axis=0)
    if scale_rule == "gear_base_diameter":
        rec_r = math.hypot(sd_rec[0], sd_rec[1])
        if rec_r <= 0:
            raise DegenerateInputError("cloud has no XY extent")
        return np.full(3, math.hypot(sd_ref[0], sd_ref[1]) / rec_r)
    if scale_rule == "astm_mean_axis":
        if (sd_rec <= 0).any():
            raise DegenerateInputError("cloud has zero extent along an axis")
        return np.full(3, float(np.mean(sd_ref / sd_rec)))
    raise ConfigError(f"unknown scale rule {scale_rule!r}; expected one of {SCALE_RULES} or (sx, sy, sz)")


def align_and_scale(cloud: PointCloud, reference: OccupancyGrid, scale_rule="astm_mean_axis") -> PointCloud:
    """Scale about the cloud centroid, then move the centroid onto the reference's."""
    s = estimate_scale(cloud, reference, scale_rule)
    c = cloud.xyz.mean(axis=0)
    xyz = (cloud.xyz - c) * s + reference.centers().mean(axis=0)
    return cloud.with_xyz(xyz)


def refine_translation(cloud: PointCloud, reference: OccupancyGrid, search_cells: int = 2, step: float = 0.5) -> PointCloud:
    """Grid search over XYZ shifts (in cells) maximising true positives.

    Not part of the default evaluation; the default is centroid alignment only.
    """
    best, best_tp = np.zeros(3), -1
    ref_keys = reference.keys()
    offsets = np.arange(-search_cells, search_cells + step / 2, step)
    for dx in offsets:
        for dy in offsets:
            for dz in offsets:
                shift = np.array([dx, dy, dz]) * reference.cell_size
                rec = revoxelize_cloud(cloud.with_xyz(cloud.xyz + shift), reference)
                tp = int(np.isin(rec.keys(), ref_keys).sum())
                if tp > best_tp:
                    best, best_tp = shift, tp
    return cloud.with_xyz(cloud.xyz + best)


def revoxelize_cloud(cloud: PointCloud, template: OccupancyGrid) -> OccupancyGrid:
    """Occupy every template cell containing at least one point."""
    if len(cloud) == 0:
        return template.with_occupied(np.empty((0, 3), dtype=np.int64))
    idx = np.floor((cloud.xyz - template.origin) / template.cell_size).astype(np.int64)
    ok = ((idx >= 0) & (idx < np.array(template.dims))).all(axis=1)
    dropped = int((~ok).sum())
    if dropped:
        logger.info("%d of %d points fall outside the evaluation grid", dropped, len(cloud))
    return template.with_occupied(np.unique(idx[ok], axis=0), out_of_bounds=dropped)


# -- comparison -----------------------------------------------------------


@dataclass(frozen=True)
class EvaluationReport:
    true_pos: int
    false_pos: int
    false_neg: int
    reference_count: int

    def __post_init__(self):
        if self.reference_count < 1:
            raise DataError("reference model has no voxels")
        if self.true_pos + self.false_neg != self.reference_count:
            raise DataError(
                f"TP ({self.true_pos}) + FN ({self.false_neg}) != reference count ({self.reference_count})"
            )

    @classmethod
    def from_counts(cls, true_pos: int, false_pos: int, false_neg: int) -> "EvaluationReport":
        return cls(true_pos, false_pos, false_neg, true_pos + false_neg)

    @property
    def percent_true_pos(self) -> float:
        return self.true_pos / self.reference_count * 100

    @property
    def percent_false_pos(self) -> float:
        return self.false_pos / self.reference_count * 100

    @property
    def percent_false_neg(self) -> float:
        return self.false_neg / self.reference_count * 100

    @property
    def percentages(self) -> tuple[float, float, float]:
        return self.percent_true_pos, self.percent_false_pos, self.percent_false_neg

    def to_json(self) -> dict:
        return {
            "true_pos": self.true_pos,
            "false_pos": self.false_pos,
            "false_neg": self.false_neg,
            "reference_count": self.reference_count,
            "percent_true_pos": self.percent_true_pos,
            "percent_false_pos": self.percent_false_pos,
            "percent_false_neg": self.percent_false_neg,
        }


@dataclass(frozen=True)
class VoxelComparison:
    report: EvaluationReport
    true_pos: PointCloud
    false_pos: PointCloud
    false_neg: PointCloud


def compare_voxels(reference: OccupancyGrid, reconstructed: OccupancyGrid) -> VoxelComparison:
    if not reference.same_lattice(reconstructed):
        raise IncompatibleGridError("reference and reconstruction are on different grids")
    rk, ck = reference.keys(), reconstructed.keys()
    in_rec = np.isin(rk, ck)
    in_ref = np.isin(ck, rk)
    tp = reference.occupied[in_rec]
    fn = reference.occupied[~in_rec]
    fp = reconstructed.occupied[~in_ref]
    report = EvaluationReport(len(tp), len(fp), len(fn), len(reference))

    def cloud(idx):
        return PointCloud(reference.centers(idx))

    return VoxelComparison(report, cloud(tp), cloud(fp), cloud(fn))
