"""On-node pre-processing: ADC simulation, engineering-unit conversion,
windowed shape features, dominant frequency, event detection, decimation.

These are the algorithms a smart transducer runs right after acquisition
to send information instead of raw samples. All functions are pure.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DsmError, InvariantViolation


class WindowTooShort(DsmError):
    pass


class AllZeroSignal(DsmError):
    pass


class BadThresholds(DsmError):
    pass


class BadFactor(DsmError):
    pass


class CodeOutOfRange(DsmError):
    pass


@dataclass(frozen=True)
class AdcSpec:
    """Ideal ADC: `bits` resolution over the voltage span [v_min, v_max]."""

    bits: int = 12
    v_min: float = 0.0
    v_max: float = 3.3

    def __post_init__(self):
        if not (1 <= self.bits <= 24):
            raise InvariantViolation("bits", "must be in [1, 24]")
        if not (self.v_min < self.v_max):
            raise InvariantViolation("v_min", "v_min must be < v_max")

    @property
    def max_code(self) -> int:
        return (1 << self.bits) - 1


@dataclass(frozen=True)
class Calibration:
    """Straight-line conditioning: engineering value = gain * volts + offset."""

    gain: float = 1.0
    offset: float = 0.0

    def __post_init__(self):
        if self.gain == 0:
            raise InvariantViolation("gain", "must be nonzero")


# Fixed shape-feature set computed on every window. dom_freq is computed
# separately because it needs the sampling rate and a minimum length.
FEATURE_NAMES = ("min", "max", "mean", "rms", "p2p", "std")
DOM_FREQ = "dom_freq"

# A signal whose spectrum never exceeds this magnitude is treated as silent.
NOISE_FLOOR = 1e-12

MIN_DFT_WINDOW = 8


def quantize(analog, spec: AdcSpec) -> np.ndarray:
    """Convert volts to ADC codes: round-half-up on the code grid, clipped."""
    v = np.asarray(analog, dtype=float)
    span = spec.v_max - spec.v_min
    codes = np.floor((v - spec.v_min) / span * spec.max_code + 0.5)
    return np.clip(codes, 0, spec.max_code).astype(np.int64)


def to_engineering_units(codes, spec: AdcSpec, cal: Calibration) -> np.ndarray:
    """Map ADC codes back to engineering units through the calibration line."""
    c = np.asarray(codes)
    if c.size and (c.min() < 0 or c.max() > spec.max_code):
        raise CodeOutOfRange(f"codes outside [0, {spec.max_code}]")
    volts = spec.v_min + c.astype(float) / spec.max_code * (spec.v_max - spec.v_min)
    return cal.gain * volts + cal.offset


def window_features(window) -> dict:
    """Shape features of one window: min, max, mean, rms, p2p, population std."""
    x = np.asarray(window, dtype=float)
    if x.size < 2:
        raise WindowTooShort(f"need >= 2 samples, got {x.size}")
    mn = float(x.min())
    mx = float(x.max())
    mean = float(x.mean())
    rms = float(math.sqrt(float(np.mean(x * x))))
    std = float(x.std())  # population standard deviation
    return {"min": mn, "max": mx, "mean": mean, "rms": rms, "p2p": mx - mn, "std": std}


def dominant_frequency(window, fs_hz: float) -> float:
    """Bin-center frequency of the largest DFT magnitude (DC excluded).

    The window is mean-removed and Hann-weighted before the transform, which
    keeps the peak stable for frequencies that do not land on a bin center.
    Resolution is fs/N.
    """
    x = np.asarray(window, dtype=float)
    n = x.size
    if n < MIN_DFT_WINDOW:
        raise WindowTooShort(f"need >= {MIN_DFT_WINDOW} samples, got {n}")
    if fs_hz <= 0:
        raise InvariantViolation("fs_hz", "must be positive")
    x = (x - x.mean()) * np.hanning(n)
    mags = np.abs(np.fft.rfft(x))
    mags[0] = 0.0  # DC excluded
    k = int(np.argmax(mags))
    if mags[k] <= NOISE_FLOOR:
        raise AllZeroSignal("no spectral bin above the noise floor")
    return k * fs_hz / n


def detect_events(window, rising: float, falling: float) -> list:
    """Hysteresis threshold crossings as (index, kind) with kind in {rising, falling}.

    State starts 'below'. In 'below', the first sample >= rising emits a
    rising event and flips the state; in 'above', the first sample <= falling
    emits a falling event and flips back. One transition per sample at most.
    """
    if rising < falling:
        raise BadThresholds(f"rising {rising} < falling {falling}")
    events = []
    above = False
    for i, v in enumerate(np.asarray(window, dtype=float)):
        if not above and v >= rising:
            events.append((i, "rising"))
            above = True
        elif above and v <= falling:
            events.append((i, "falling"))
            above = False
    return events


def decimate(window, factor: int) -> np.ndarray:
    """Block-average decimation: mean of each consecutive factor-sized block."""
    x = np.asarray(window, dtype=float)
    if not isinstance(factor, int) or factor < 1:
        raise BadFactor(f"factor must be a positive integer, got {factor!r}")
    if x.size % factor != 0:
        raise BadFactor(f"factor {factor} does not divide window length {x.size}")
    if factor == 1:
        return x.copy()
    return x.reshape(-1, factor).mean(axis=1)
