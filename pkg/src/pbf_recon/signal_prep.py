"""Laser ON/OFF normalisation and galvanometer low-pass filtering."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import signal

from .errors import ConfigError, DataError

LASER_ON = True
LASER_OFF = False


@dataclass(frozen=True)
class HysteresisThresholds:
    threshold_on: float = 2.2
    threshold_off: float = 1.1

    def __post_init__(self):
        if not self.threshold_on > self.threshold_off:
            raise ConfigError(
                f"threshold_on ({self.threshold_on}) must exceed threshold_off ({self.threshold_off})"
            )


@dataclass(frozen=True)
class FilterSpec:
    order: int = 4
    cutoff_hz: float = 6000.0
    sample_rate_hz: float = 20000.0

    def __post_init__(self):
        if int(self.order) != self.order or self.order < 1:
            raise ConfigError(f"filter order must be a positive integer, got {self.order}")
        if self.sample_rate_hz <= 0:
            raise ConfigError(f"sample_rate_hz must be > 0, got {self.sample_rate_hz}")
        if not 0 < self.cutoff_hz < self.sample_rate_hz / 2:
            raise ConfigError(
                f"cutoff {self.cutoff_hz} Hz must lie in (0, Nyquist={self.sample_rate_hz / 2} Hz)"
            )

    def sos(self) -> np.ndarray:
        return signal.butter(int(self.order), self.cutoff_hz, btype="low", output="sos", fs=self.sample_rate_hz)


RECONSTRUCTION_FILTER = FilterSpec(4, 6000.0, 20000.0)
CALIBRATION_FILTER = FilterSpec(4, 1000.0, 20000.0)


def normalize_laser(raw, thresholds: HysteresisThresholds | None = None) -> np.ndarray:
    """Two-threshold hysteresis: returns a bool array, True where the laser is ON.

    A sample at or above ``threshold_on`` switches ON, at or below
    ``threshold_off`` switches OFF, anything in between keeps the previous
    state. The state before the first sample is OFF.
    """
    th = thresholds or HysteresisThresholds()
    x = np.asarray(raw, dtype=float)
    if not np.isfinite(x).all():
        raise DataError("laser channel contains non-finite samples")
    on = x >= th.threshold_on
    decided = on | (x <= th.threshold_off)
    # index of the most recent sample that broke a threshold
    last = np.maximum.accumulate(np.where(decided, np.arange(len(x)), -1))
    return np.where(last >= 0, on[np.maximum(last, 0)], LASER_OFF)


def lowpass_filter(raw, spec: FilterSpec | None = None) -> np.ndarray:
    """Causal Butterworth low-pass in second-order sections.

    The filter state is primed with the first sample so a trace that starts
    at a steady level produces no start-up transient.
    """
    spec = spec or RECONSTRUCTION_FILTER
    x = np.asarray(raw, dtype=float)
    if x.ndim != 1 or len(x) == 0:
        raise DataError("lowpass_filter needs a non-empty 1-D channel")
    sos = spec.sos()
    zi = signal.sosfilt_zi(sos) * x[0]
    y, _ = signal.sosfilt(sos, x, zi=zi)
    return y
