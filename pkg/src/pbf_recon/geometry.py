"""Affine XY distortion, Z elongation and proportion correction of point clouds."""

from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError, DegenerateInputError
from .rasterizer import VoxelGrid
from .trace_io import PointCloud


def rotation(theta: float) -> np.ndarray:
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[c, -s], [s, c]])


def _normalize_angle(theta: float) -> float:
    """Map an axis direction to (-pi/2, pi/2]."""
    theta = math.fmod(theta, math.pi)
    if theta <= -math.pi / 2:
        theta += math.pi
    elif theta > math.pi / 2:
        theta -= math.pi
    return theta


@dataclass(frozen=True)
class EllipseFit:
    center: tuple[float, float]
    major_axis_length: float
    minor_axis_length: float
    orientation_rad: float


def fit_ellipse_pca(points) -> EllipseFit:
    """Ellipse aligned with the principal axes of the centred points.

    The axis lengths are the largest absolute principal coordinate along each
    axis, so the ellipse just reaches the extreme points in both directions.
    """
    p = np.asarray(points, dtype=float).reshape(-1, 2)
    if len(p) < 3:
        raise DegenerateInputError(f"ellipse fit needs >= 3 points, got {len(p)}")
    center = p.mean(axis=0)
    q = p - center
    cov = q.T @ q / len(q)
    evals, evecs = np.linalg.eigh(cov)
    if evals[1] <= 0 or evals[0] <= 1e-12 * evals[1]:
        raise DegenerateInputError("points are collinear; covariance is singular")
    major = evecs[:, 1]
    theta = _normalize_angle(math.atan2(major[1], major[0]))
    proj = q @ rotation(theta)
    a = float(np.abs(proj[:, 0]).max())
    b = float(np.abs(proj[:, 1]).max())
    if b > a:
        # extreme-point extents can invert the variance ordering
        a, b = b, a
        theta = _normalize_angle(theta + math.pi / 2)
    return EllipseFit((float(center[0]), float(center[1])), a, b, theta)


@dataclass(frozen=True)
class DistortionModel:
    xy_matrix: np.ndarray
    xy_center: tuple[float, float] = (0.0, 0.0)
    z_factor: float = 1.0
    reference_radius: float = 100.0

    def __post_init__(self):
        m = np.array(self.xy_matrix, dtype=float).reshape(2, 2)
        if abs(np.linalg.det(m)) <= 1e-9:
            raise DegenerateInputError("distortion matrix is singular")
        if not self.z_factor > 0:
            raise ConfigError(f"z_factor must be > 0, got {self.z_factor}")
        if not self.reference_radius > 0:
            raise ConfigError(f"reference_radius must be > 0, got {self.reference_radius}")
        m.setflags(write=False)
        object.__setattr__(self, "xy_matrix", m)
        object.__setattr__(self, "xy_center", (float(self.xy_center[0]), float(self.xy_center[1])))

    @property
    def inverse_matrix(self) -> np.ndarray:
        return np.linalg.inv(self.xy_matrix)

    def to_json(self) -> dict:
        return {
            "xy_matrix": self.xy_matrix.tolist(),
            "xy_center": list(self.xy_center),
            "z_factor": self.z_factor,
            "reference_radius": self.reference_radius,
        }

    @classmethod
    def from_json(cls, doc: dict) -> "DistortionModel":
        try:
            return cls(
                doc["xy_matrix"],
                tuple(doc.get("xy_center", (0.0, 0.0))),
                float(doc.get("z_factor", 1.0)),
                float(doc.get("reference_radius", 100.0)),
            )
        except KeyError as exc:
            raise DataError(f"distortion model lacks {exc}") from None

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "DistortionModel":
        return cls.from_json(json.loads(Path(path).read_text(encoding="utf-8")))


def derive_xy_distortion(fit: EllipseFit, reference_radius: float = 100.0) -> DistortionModel:
    """Linear map taking a circle of ``reference_radius`` onto the fitted ellipse."""
    if reference_radius <= 0:
        raise ConfigError(f"reference_radius must be > 0, got {reference_radius}")
    if fit.major_axis_length <= 0 or fit.minor_axis_length <= 0:
        raise DegenerateInputError("ellipse has a zero-length axis")
    R = rotation(fit.orientation_rad)
    m = R @ np.diag([fit.major_axis_length / reference_radius, fit.minor_axis_length / reference_radius]) @ R.T
    return DistortionModel(m, fit.center, 1.0, reference_radius)


def distort_xy(cloud: PointCloud, matrix, center) -> PointCloud:
    """Forward map ``M (p - C) + C``; the inverse of :func:`apply_xy_correction`."""
    m = np.asarray(matrix, dtype=float)
    c = np.asarray(center, dtype=float)
    xyz = cloud.xyz.copy()
    xyz[:, :2] = (xyz[:, :2] - c) @ m.T + c
    return cloud.with_xyz(xyz)


def apply_xy_correction(cloud: PointCloud, model: DistortionModel) -> PointCloud:
    return distort_xy(cloud, model.inverse_matrix, model.xy_center)


def fit_axis_line(points) -> float:
    """Inclination of the least-squares line through the points, in radians."""
    p = np.asarray(points, dtype=float).reshape(-1, 2)
    if len(np.unique(p[:, 0])) < 2:
        raise DegenerateInputError("need at least two distinct x values (vertical point set has angle pi/2)")
    slope, _ = np.polyfit(p[:, 0], p[:, 1], 1)
    return math.atan(slope)


def derive_z_factor(cloud: PointCloud, theta: float) -> float:
    """Elongation of Z relative to the cross-section width of a round bar.

    The cloud is turned by -theta so the bar lies along X; width is the span of
    rotated y, height the number of layers spanned.
    """
    if len(cloud) == 0:
        raise DataError("empty cloud")
    y = cloud.xyz[:, :2] @ rotation(-theta).T
    delta_y = float(np.ptp(y[:, 1]))
    delta_z = float(np.ptp(cloud.z)) + 1.0
    if delta_y <= 0:
        raise DegenerateInputError("zero cross-section width after rotation")
    return delta_z / delta_y


def apply_z_correction(cloud: PointCloud, factor: float) -> PointCloud:
    if not factor > 0:
        raise ConfigError(f"z factor must be > 0, got {factor}")
    xyz = cloud.xyz.copy()
    xyz[:, 2] = xyz[:, 2] / factor
    return cloud.with_xyz(xyz)


class RatioKind(enum.Enum):
    LENGTH_OVER_DIAMETER = "length_over_diameter"
    DIAMETER_OVER_HEIGHT = "diameter_over_height"


def principal_xy_angle(cloud: PointCloud) -> float:
    q = cloud.xyz[:, :2] - cloud.xyz[:, :2].mean(axis=0)
    evals, evecs = np.linalg.eigh(q.T @ q)
    major = evecs[:, 1]
    return _normalize_angle(math.atan2(major[1], major[0]))


def measure_extents(cloud: PointCloud) -> tuple[float, float, float, float]:
    """``(major, minor, height, angle)``: spans in the cloud's principal XY frame and along Z."""
    if len(cloud) == 0:
        raise DataError("empty cloud")
    theta = principal_xy_angle(cloud)
    local = cloud.xyz[:, :2] @ rotation(theta)
    return float(np.ptp(local[:, 0])), float(np.ptp(local[:, 1])), float(np.ptp(cloud.z)), theta


def measure_ratio(cloud: PointCloud, kind: RatioKind) -> float:
    major, minor, height, _ = measure_extents(cloud)
    if RatioKind(kind) is RatioKind.LENGTH_OVER_DIAMETER:
        if minor <= 0:
            raise DegenerateInputError("zero diameter")
        return major / minor
    if height <= 0:
        raise DegenerateInputError("zero height")
    return (major + minor) / 2 / height


def proportion_correction(cloud: PointCloud, target_ratio: float, ratio_kind: RatioKind) -> PointCloud:
    """Stretch one set of axes so the measured ratio hits ``target_ratio``.

    length/diameter scales the long principal XY axis (diameter kept);
    diameter/height scales both XY axes evenly (height kept).
    """
    kind = RatioKind(ratio_kind)
    if not target_ratio > 0:
        raise ConfigError(f"target ratio must be > 0, got {target_ratio}")
    major, minor, height, theta = measure_extents(cloud)
    if minor <= 0 or (kind is RatioKind.DIAMETER_OVER_HEIGHT and height <= 0):
        raise DegenerateInputError("cloud has no extent along a ratio axis")
    R = rotation(theta)
    center = cloud.xyz[:, :2].mean(axis=0)
    local = (cloud.xyz[:, :2] - center) @ R
    if kind is RatioKind.LENGTH_OVER_DIAMETER:
        local[:, 0] *= target_ratio / (major / minor)
    else:
        local *= target_ratio / ((major + minor) / 2 / height)
    xyz = cloud.xyz.copy()
    xyz[:, :2] = local @ R.T + center
    return cloud.with_xyz(xyz)


def grid_to_cloud(grid: VoxelGrid, subdivisions: int = 1) -> PointCloud:
    """One point per occupied cell at ``(rx, ry, layer)``, weight = hits.

    With ``subdivisions = n > 1`` each cell becomes n^3 points spread evenly over
    the cell footprint, all centred on the same ``(rx, ry, layer)``; useful
    before non-rigid transforms that would otherwise open holes on revoxelising.
    """
    c = grid.coords
    xyz = np.column_stack([c[:, 1], c[:, 2], c[:, 0]]).astype(float)
    if subdivisions <= 1 or len(c) == 0:
        return PointCloud(xyz, grid.hits)
    n = int(subdivisions)
    o = (np.arange(n) + 0.5) / n - 0.5
    offsets = np.stack(np.meshgrid(o, o, o, indexing="ij"), axis=-1).reshape(-1, 3)
    pts = (xyz[:, None, :] + offsets[None, :, :]).reshape(-1, 3)
    return PointCloud(pts, np.repeat(grid.hits, len(offsets)))


def cloud_to_grid(cloud: PointCloud, raster: float, layer_count: int | None = None) -> VoxelGrid:
    """Inverse of :func:`grid_to_cloud` for clouds whose coordinates are integral."""
    idx = np.rint(cloud.xyz).astype(np.int64)
    coords = np.column_stack([idx[:, 2], idx[:, 0], idx[:, 1]])
    return VoxelGrid.from_cells(coords, cloud.weights, raster, layer_count)
