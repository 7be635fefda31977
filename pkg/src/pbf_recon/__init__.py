"""Reconstruct powder-bed-fusion prints from laser and galvanometer power traces."""

from .errors import (
    ConfigError,
    DataError,
    DegenerateInputError,
    EmptyInputError,
    IncompatibleGridError,
    MalformedFileError,
    ParseError,
    ReconError,
    SchemaError,
    StageError,
)
from .trace_io import PointCloud, SignalTrace, TraceSchema, TriangleMesh
from .rasterizer import VoxelGrid

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "DataError",
    "DegenerateInputError",
    "EmptyInputError",
    "IncompatibleGridError",
    "MalformedFileError",
    "ParseError",
    "PointCloud",
    "ReconError",
    "SchemaError",
    "SignalTrace",
    "StageError",
    "TraceSchema",
    "TriangleMesh",
    "VoxelGrid",
]
