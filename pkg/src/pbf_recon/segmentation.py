"""Layer-sintering interval detection on the normalised laser signal.

Three states: LT (layer transition, laser idle), LSI (sintering layer i) and
LS2LT (laser went OFF, not yet sure the layer is finished). Only an OFF run
longer than ``off_run_threshold`` ends a layer.
"""

from __future__ import annotations

import csv
import enum
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError, ParseError, SchemaError


class FsmState(enum.Enum):
    LT = "LT"
    LSI = "LSi"
    LS2LT = "LS2LT"


@dataclass(frozen=True)
class SegmentationConfig:
    off_run_threshold: int = 1000

    def __post_init__(self):
        if int(self.off_run_threshold) != self.off_run_threshold or self.off_run_threshold < 1:
            raise ConfigError(f"off_run_threshold must be a positive integer, got {self.off_run_threshold}")


@dataclass(frozen=True)
class LayerBoundaries:
    """Inclusive ``[start, end]`` sample intervals, one per layer, in order."""

    starts: np.ndarray
    ends: np.ndarray

    def __post_init__(self):
        s = np.asarray(self.starts, dtype=np.int64).reshape(-1)
        e = np.asarray(self.ends, dtype=np.int64).reshape(-1)
        if len(s) != len(e):
            raise DataError("starts and ends differ in length")
        if len(s):
            if (s < 0).any() or (e < s).any():
                raise DataError("layer interval with start > end or negative index")
            if (s[1:] <= e[:-1]).any():
                raise DataError("layer intervals overlap or are out of order")
        s.setflags(write=False)
        e.setflags(write=False)
        object.__setattr__(self, "starts", s)
        object.__setattr__(self, "ends", e)

    def __len__(self) -> int:
        return len(self.starts)

    def __iter__(self):
        return iter(zip(self.starts.tolist(), self.ends.tolist()))

    def __getitem__(self, i) -> tuple[int, int]:
        return int(self.starts[i]), int(self.ends[i])

    @classmethod
    def from_pairs(cls, pairs) -> "LayerBoundaries":
        pairs = list(pairs)
        return cls([p[0] for p in pairs], [p[1] for p in pairs])

    def select(self, layers) -> "LayerBoundaries":
        idx = np.asarray(layers, dtype=np.int64)
        return LayerBoundaries(self.starts[idx], self.ends[idx])


def _runs(states: np.ndarray):
    """Yield ``(start, end, value)`` for each maximal constant run."""
    change = np.flatnonzero(states[1:] != states[:-1]) + 1
    starts = np.concatenate(([0], change))
    ends = np.concatenate((change, [len(states)])) - 1
    return zip(starts.tolist(), ends.tolist(), states[starts].tolist())


def segment_layers(laser, cfg: SegmentationConfig | None = None) -> LayerBoundaries:
    """Run the LT/LSi/LS2LT automaton over a bool laser signal.

    The automaton consumes whole constant runs at a time, which is equivalent
    to stepping sample by sample because state only changes at run edges.
    A layer still open at end-of-signal is closed at its last ON sample.
    """
    cfg = cfg or SegmentationConfig()
    states = np.asarray(laser, dtype=bool)
    if states.ndim != 1 or len(states) == 0:
        raise DataError("segment_layers needs a non-empty 1-D laser signal")

    state = FsmState.LT
    starts: list[int] = []
    ends: list[int] = []
    last_on = -1
    for lo, hi, on in _runs(states):
        if on:
            if state is FsmState.LT:
                starts.append(lo)
            state = FsmState.LSI
            last_on = hi
        elif state is not FsmState.LT:
            # Ctr counts every OFF sample since leaving LSi
            ctr = hi - lo + 1
            if ctr > cfg.off_run_threshold:
                ends.append(last_on)
                state = FsmState.LT
            else:
                state = FsmState.LS2LT
    if state is not FsmState.LT:
        ends.append(last_on)
    return LayerBoundaries(starts, ends)


@dataclass(frozen=True)
class LayerStatistics:
    durations_samples: np.ndarray
    durations_s: np.ndarray
    gaps_samples: np.ndarray
    gaps_s: np.ndarray


def layer_statistics(b: LayerBoundaries, sample_rate_hz: float) -> LayerStatistics:
    if sample_rate_hz <= 0:
        raise ConfigError(f"sample_rate_hz must be > 0, got {sample_rate_hz}")
    dur = b.ends - b.starts + 1
    gaps = b.starts[1:] - b.ends[:-1] - 1
    return LayerStatistics(dur, dur / sample_rate_hz, gaps, gaps / sample_rate_hz)


def write_layer_csv(b: LayerBoundaries, sample_rate_hz: float, path) -> None:
    """One row per layer; layers are numbered from 1 in the file."""
    stats = layer_statistics(b, sample_rate_hz)
    with open(Path(path), "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["layer", "start", "end", "duration_samples", "duration_s"])
        for i, (s, e) in enumerate(b):
            w.writerow([i + 1, s, e, int(stats.durations_samples[i]), repr(float(stats.durations_s[i]))])


def load_layer_csv(path) -> LayerBoundaries:
    path = Path(path)
    with open(path, encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        for col in ("start", "end"):
            if col not in (reader.fieldnames or ()):
                raise SchemaError(col, path)
        starts, ends = [], []
        for row in reader:
            try:
                starts.append(int(row["start"]))
                ends.append(int(row["end"]))
            except (TypeError, ValueError):
                raise ParseError(f"{path}: bad layer row {row}", line=reader.line_num) from None
    return LayerBoundaries(starts, ends)
