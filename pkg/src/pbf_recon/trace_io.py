"""File boundaries: trace CSV ingestion, point-cloud CSV, STL meshes."""

from __future__ import annotations

import logging
import re
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

from .errors import (
    ConfigError,
    DataError,
    EmptyInputError,
    MalformedFileError,
    ParseError,
    SchemaError,
)

logger = logging.getLogger(__name__)

DEFAULT_SAMPLE_RATE_HZ = 20_000.0

_META_RE = re.compile(r"^#\s*([A-Za-z_][A-Za-z0-9_]*)\s*[=:]\s*(.+?)\s*$")


def _readonly(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class SignalTrace:
    """Three uniformly sampled channels: laser, galvo X and galvo Y (volts)."""

    sample_rate_hz: float
    laser: np.ndarray
    galvo_x: np.ndarray
    galvo_y: np.ndarray

    def __post_init__(self):
        if not (self.sample_rate_hz > 0 and np.isfinite(self.sample_rate_hz)):
            raise ConfigError(f"sample_rate_hz must be > 0, got {self.sample_rate_hz}")
        chans = []
        for name in ("laser", "galvo_x", "galvo_y"):
            a = np.array(getattr(self, name), dtype=float)
            if a.ndim != 1:
                raise DataError(f"{name} must be one-dimensional")
            if not np.isfinite(a).all():
                bad = int(np.flatnonzero(~np.isfinite(a))[0])
                raise DataError(f"{name} has a non-finite sample at index {bad}")
            object.__setattr__(self, name, _readonly(a))
            chans.append(a)
        n = {len(a) for a in chans}
        if len(n) != 1:
            raise DataError(f"channel lengths differ: {sorted(n)}")
        if len(chans[0]) == 0:
            raise EmptyInputError("trace has no samples")

    def __len__(self) -> int:
        return len(self.laser)

    @property
    def duration_s(self) -> float:
        return len(self) / self.sample_rate_hz


@dataclass(frozen=True)
class TraceSchema:
    """Column names of the trace CSV; the sample rate may also come from the file."""

    laser: str = "laser"
    galvo_x: str = "galvo_x"
    galvo_y: str = "galvo_y"
    sample_rate_hz: float | None = None


def _read_metadata(path: Path) -> tuple[dict[str, str], int]:
    meta: dict[str, str] = {}
    skip = 0
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if not line.startswith("#"):
                break
            skip += 1
            m = _META_RE.match(line.strip())
            if m:
                meta[m.group(1).lower()] = m.group(2)
    return meta, skip


def load_trace_csv(path, schema: TraceSchema | None = None) -> SignalTrace:
    """Load laser/galvo channels from a CSV with a header row.

    Leading ``# key=value`` lines are metadata; ``sample_rate_hz`` is honoured
    when the schema does not fix the rate. Columns other than the three mapped
    channels (``time``, stepper probes, ...) are ignored.
    """
    schema = schema or TraceSchema()
    path = Path(path)
    meta, skip = _read_metadata(path)
    try:
        df = pd.read_csv(path, skiprows=skip, float_precision="round_trip", skipinitialspace=True)
    except pd.errors.EmptyDataError:
        raise EmptyInputError(f"{path}: empty file") from None
    except pd.errors.ParserError as exc:
        raise ParseError(f"{path}: {exc}") from None
    df.columns = [str(c).strip() for c in df.columns]
    for col in (schema.laser, schema.galvo_x, schema.galvo_y):
        if col not in df.columns:
            raise SchemaError(col, path)
    if len(df) == 0:
        raise EmptyInputError(f"{path}: no data rows")

    # header line number + metadata lines, 1-based
    first_data_line = skip + 2
    channels = {}
    for key, col in (("laser", schema.laser), ("galvo_x", schema.galvo_x), ("galvo_y", schema.galvo_y)):
        s = df[col]
        if s.dtype == object:
            values = pd.to_numeric(s, errors="coerce")
            bad = values.isna() | ~np.isfinite(values.to_numpy(dtype=float, na_value=np.nan))
            if bad.any():
                row = int(np.flatnonzero(bad.to_numpy())[0])
                raise ParseError(
                    f"non-numeric value {s.iloc[row]!r} in column {col!r}", line=first_data_line + row
                )
            arr = values.to_numpy(dtype=float)
        else:
            arr = s.to_numpy(dtype=float)
        finite = np.isfinite(arr)
        if not finite.all():
            row = int(np.flatnonzero(~finite)[0])
            raise ParseError(f"missing or non-finite value in column {col!r}", line=first_data_line + row)
        channels[key] = arr

    rate = schema.sample_rate_hz
    if rate is None:
        raw = meta.get("sample_rate_hz")
        try:
            rate = float(raw) if raw is not None else DEFAULT_SAMPLE_RATE_HZ
        except ValueError:
            raise ParseError(f"{path}: bad sample_rate_hz metadata {raw!r}", line=1) from None
    return SignalTrace(sample_rate_hz=rate, **channels)


def write_trace_csv(trace: SignalTrace, path, schema: TraceSchema | None = None) -> None:
    """Write a trace so that :func:`load_trace_csv` reads back identical floats."""
    schema = schema or TraceSchema()
    path = Path(path)
    data = np.column_stack([trace.laser, trace.galvo_x, trace.galvo_y])
    try:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write(f"# sample_rate_hz={trace.sample_rate_hz!r}\n")
            fh.write(f"{schema.laser},{schema.galvo_x},{schema.galvo_y}\n")
            np.savetxt(fh, data, fmt="%.17g", delimiter=",")
    except OSError as exc:
        raise OSError(f"cannot write trace to {path}: {exc}") from exc


@dataclass(frozen=True)
class PointCloud:
    """Points ``(x, y, z)`` with a positive integer weight each."""

    xyz: np.ndarray = field(default_factory=lambda: np.empty((0, 3)))
    weights: np.ndarray | None = None

    def __post_init__(self):
        xyz = np.array(self.xyz, dtype=float).reshape(-1, 3)
        if not np.isfinite(xyz).all():
            raise DataError("point cloud has non-finite coordinates")
        if self.weights is None:
            w = np.ones(len(xyz), dtype=np.int64)
        else:
            w = np.array(self.weights, dtype=np.int64).reshape(-1)
        if len(w) != len(xyz):
            raise DataError(f"{len(xyz)} points but {len(w)} weights")
        if len(w) and w.min() < 1:
            raise DataError("point weights must be >= 1")
        object.__setattr__(self, "xyz", _readonly(xyz))
        object.__setattr__(self, "weights", _readonly(w))

    def __len__(self) -> int:
        return len(self.xyz)

    @property
    def x(self) -> np.ndarray:
        return self.xyz[:, 0]

    @property
    def y(self) -> np.ndarray:
        return self.xyz[:, 1]

    @property
    def z(self) -> np.ndarray:
        return self.xyz[:, 2]

    def with_xyz(self, xyz) -> "PointCloud":
        return PointCloud(xyz, self.weights)


def write_point_cloud_csv(cloud: PointCloud, path, metadata: dict | None = None) -> None:
    """``x,y,z,weight`` rows; ``metadata`` goes into leading ``# key=value`` lines."""
    path = Path(path)
    data = np.column_stack([cloud.xyz, cloud.weights])
    try:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            for key, value in (metadata or {}).items():
                fh.write(f"# {key}={value}\n")
            fh.write("x,y,z,weight\n")
            np.savetxt(fh, data, fmt=["%.17g", "%.17g", "%.17g", "%d"], delimiter=",")
    except OSError as exc:
        raise OSError(f"cannot write point cloud to {path}: {exc}") from exc


def read_csv_metadata(path) -> dict[str, str]:
    return _read_metadata(Path(path))[0]


def load_point_cloud_csv(path) -> PointCloud:
    path = Path(path)
    _, skip = _read_metadata(path)
    try:
        df = pd.read_csv(path, skiprows=skip, float_precision="round_trip", skipinitialspace=True)
    except pd.errors.EmptyDataError:
        raise EmptyInputError(f"{path}: empty file") from None
    except pd.errors.ParserError as exc:
        raise ParseError(f"{path}: {exc}") from None
    df.columns = [str(c).strip() for c in df.columns]
    for col in ("x", "y", "z"):
        if col not in df.columns:
            raise SchemaError(col, path)
    try:
        xyz = df[["x", "y", "z"]].to_numpy(dtype=float)
        weights = df["weight"].to_numpy(dtype=np.int64) if "weight" in df.columns else None
    except (ValueError, TypeError) as exc:
        raise ParseError(f"{path}: {exc}") from None
    return PointCloud(xyz, weights)


@dataclass(frozen=True)
class TriangleMesh:
    """Triangle soup, shape ``(n, 3, 3)``: triangle, vertex, coordinate."""

    triangles: np.ndarray

    def __post_init__(self):
        t = np.array(self.triangles, dtype=float).reshape(-1, 3, 3)
        if len(t) == 0:
            raise EmptyInputError("mesh has no triangles")
        if not np.isfinite(t).all():
            raise DataError("mesh has non-finite vertices")
        object.__setattr__(self, "triangles", _readonly(t))

    def __len__(self) -> int:
        return len(self.triangles)

    @property
    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        v = self.triangles.reshape(-1, 3)
        return v.min(axis=0), v.max(axis=0)


_FACET = np.dtype([("normal", "<f4", 3), ("vertices", "<f4", (3, 3)), ("attr", "<u2")])


def _looks_binary(data: bytes) -> bool:
    if len(data) < 84:
        return False
    (count,) = struct.unpack_from("<I", data, 80)
    if len(data) == 84 + 50 * count:
        return True
    return not data.lstrip()[:5].lower() == b"solid"


def load_stl(path) -> TriangleMesh:
    """Read a binary or ASCII STL; the format is detected from the content."""
    path = Path(path)
    data = path.read_bytes()
    if not data:
        raise EmptyInputError(f"{path}: empty file")
    if _looks_binary(data):
        return _parse_binary_stl(data, path)
    return _parse_ascii_stl(data.decode("utf-8", errors="replace"), path)


def _parse_binary_stl(data: bytes, path: Path) -> TriangleMesh:
    if len(data) < 84:
        raise MalformedFileError(f"{path}: truncated binary STL header")
    (count,) = struct.unpack_from("<I", data, 80)
    need = 84 + 50 * count
    if len(data) < need:
        have = (len(data) - 84) // 50
        raise MalformedFileError(f"{path}: header declares {count} facets, only {have} present")
    facets = np.frombuffer(data, dtype=_FACET, count=count, offset=84)
    return TriangleMesh(facets["vertices"].astype(float))


def _parse_ascii_stl(text: str, path: Path) -> TriangleMesh:
    tris: list[list[list[float]]] = []
    current: list[list[float]] | None = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        tok = raw.split()
        if not tok:
            continue
        kw = tok[0].lower()
        if kw == "facet":
            if current is not None:
                raise ParseError(f"{path}: nested facet", line=lineno)
            current = []
        elif kw == "vertex":
            if current is None or len(tok) != 4:
                raise ParseError(f"{path}: unexpected vertex", line=lineno)
            try:
                current.append([float(v) for v in tok[1:]])
            except ValueError:
                raise ParseError(f"{path}: bad vertex coordinates {raw.strip()!r}", line=lineno) from None
        elif kw == "endfacet":
            if current is None or len(current) != 3:
                raise ParseError(f"{path}: facet without exactly 3 vertices", line=lineno)
            tris.append(current)
            current = None
        elif kw in ("solid", "endsolid", "outer", "endloop"):
            continue
        else:
            raise ParseError(f"{path}: unknown keyword {tok[0]!r}", line=lineno)
    if current is not None:
        raise ParseError(f"{path}: unterminated facet at end of file")
    if not tris:
        raise EmptyInputError(f"{path}: no facets")
    return TriangleMesh(np.array(tris))


def _normals(tris: np.ndarray) -> np.ndarray:
    n = np.cross(tris[:, 1] - tris[:, 0], tris[:, 2] - tris[:, 0])
    norm = np.linalg.norm(n, axis=1, keepdims=True)
    return np.divide(n, norm, out=np.zeros_like(n), where=norm > 0)


def write_stl(mesh: TriangleMesh, path, binary: bool = True, name: str = "mesh") -> None:
    path = Path(path)
    tris = mesh.triangles
    normals = _normals(tris)
    if binary:
        facets = np.zeros(len(tris), dtype=_FACET)
        facets["normal"] = normals
        facets["vertices"] = tris
        header = name.encode("ascii", errors="replace")[:80].ljust(80, b" ")
        with open(path, "wb") as fh:
            fh.write(header)
            fh.write(struct.pack("<I", len(tris)))
            fh.write(facets.tobytes())
        return
    with open(path, "w", encoding="ascii") as fh:
        fh.write(f"solid {name}\n")
        for n, t in zip(normals.tolist(), tris.tolist()):
            fh.write(f"  facet normal {n[0]!r} {n[1]!r} {n[2]!r}\n    outer loop\n")
            for v in t:
                fh.write(f"      vertex {v[0]!r} {v[1]!r} {v[2]!r}\n")
            fh.write("    endloop\n  endfacet\n")
        fh.write(f"endsolid {name}\n")
