"""Parzen band-pass filters: cosine-modulated compactly supported windows.

A filter is ``phi(t) = cos(2 pi eta t) * k(t)`` with the squared
Epanechnikov window ``k(t) = max(0, 1 - gamma t**2)**2`` (or a Gaussian
``exp(-gamma t**2)`` variant truncated at the tap window). ``eta`` is in Hz,
``gamma`` in 1/s**2, ``t`` in seconds.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

ETA_MIN = 50.0
ETA_MAX = 7950.0
WIDTH_MIN = 0.001
WIDTH_MAX = 0.025
GAMMA_MIN = 4.0 / WIDTH_MAX**2  # 6400
GAMMA_MAX = 4.0 / WIDTH_MIN**2  # 4e6
DEFAULT_FS = 16000.0
DEFAULT_TAPS = 401


class WindowKind(enum.Enum):
    EPANECHNIKOV = "epanechnikov"
    GAUSSIAN = "gaussian"


class FilterConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ParzenFilterParams:
    eta: float
    gamma: float
    window_kind: WindowKind = WindowKind.EPANECHNIKOV

    @property
    def support_width(self):
        """Full support 2/sqrt(gamma) in seconds."""
        return 2.0 / math.sqrt(self.gamma)


@dataclass(frozen=True)
class FilterBank:
    eta: np.ndarray
    gamma: np.ndarray
    sample_rate: float = DEFAULT_FS
    tap_count: int = DEFAULT_TAPS
    window_kind: WindowKind = WindowKind.EPANECHNIKOV

    def __len__(self):
        return len(self.eta)

    def __getitem__(self, i):
        return ParzenFilterParams(float(self.eta[i]), float(self.gamma[i]), self.window_kind)

    def taps(self):
        return bank_taps(self.eta, self.gamma, self.sample_rate, self.tap_count, self.window_kind)


def window(t, gamma, kind=WindowKind.EPANECHNIKOV):
    t = np.asarray(t, dtype=float)
    if kind is WindowKind.GAUSSIAN:
        return np.exp(-gamma * t**2)
    return np.maximum(0.0, 1.0 - gamma * t**2) ** 2


def filter_value(t, p: ParzenFilterParams):
    return np.cos(2.0 * math.pi * p.eta * np.asarray(t, dtype=float)) * window(t, p.gamma, p.window_kind)


def tap_times(fs, n_taps):
    if n_taps < 1 or n_taps % 2 == 0:
        raise FilterConfigError(f"tap count must be odd and positive, got {n_taps}")
    return (np.arange(n_taps) - (n_taps - 1) / 2) / fs


def discretize(p: ParzenFilterParams, fs=DEFAULT_FS, n_taps=DEFAULT_TAPS):
    """Sample the filter on an odd, centred grid; outside the support taps are exactly 0."""
    return filter_value(tap_times(fs, n_taps), p)


def bank_taps(eta, gamma, fs=DEFAULT_FS, n_taps=DEFAULT_TAPS, kind=WindowKind.EPANECHNIKOV):
    """Taps for a whole bank, shape (len(eta), n_taps)."""
    t = tap_times(fs, n_taps)
    eta = np.asarray(eta, dtype=float)[:, None]
    gamma = np.asarray(gamma, dtype=float)[:, None]
    return np.cos(2.0 * math.pi * eta * t) * window(t, gamma, kind)


def bank_tap_grads(eta, gamma, fs=DEFAULT_FS, n_taps=DEFAULT_TAPS, kind=WindowKind.EPANECHNIKOV):
    """Partials of every tap with respect to eta and gamma, each of shape (B, n_taps)."""
    t = tap_times(fs, n_taps)
    eta = np.asarray(eta, dtype=float)[:, None]
    gamma = np.asarray(gamma, dtype=float)[:, None]
    arg = 2.0 * math.pi * eta * t
    k = window(t, gamma, kind)
    d_eta = -2.0 * math.pi * t * np.sin(arg) * k
    if kind is WindowKind.GAUSSIAN:
        dk = -(t**2) * k
    else:
        dk = 2.0 * np.maximum(0.0, 1.0 - gamma * t**2) * -(t**2)
    return d_eta, np.cos(arg) * dk


def filter_param_grads(t, p: ParzenFilterParams):
    """(d phi/d eta, d phi/d gamma) at times ``t``."""
    t = np.asarray(t, dtype=float)
    arg = 2.0 * math.pi * p.eta * t
    k = window(t, p.gamma, p.window_kind)
    if p.window_kind is WindowKind.GAUSSIAN:
        dk = -(t**2) * k
    else:
        dk = 2.0 * np.maximum(0.0, 1.0 - p.gamma * t**2) * -(t**2)
    return -2.0 * math.pi * t * np.sin(arg) * k, np.cos(arg) * dk


def clip_eta(eta):
    return np.clip(eta, ETA_MIN, ETA_MAX)


def clip_gamma(gamma):
    return np.clip(gamma, GAMMA_MIN, GAMMA_MAX)


def clip_params(p: ParzenFilterParams) -> ParzenFilterParams:
    if not (math.isfinite(p.eta) and math.isfinite(p.gamma)):
        raise FilterConfigError(f"non-finite filter parameters: eta={p.eta}, gamma={p.gamma}")
    return ParzenFilterParams(float(clip_eta(p.eta)), float(clip_gamma(p.gamma)), p.window_kind)


# HTK-style mel map
def hz_to_mel(f):
    return 1127.0 * np.log1p(np.asarray(f, dtype=float) / 700.0)


def mel_to_hz(m):
    return 700.0 * np.expm1(np.asarray(m, dtype=float) / 1127.0)


def log_to_hz(m):
    return np.exp(m)


def mel_init(count=40, f_min=ETA_MIN, f_max=ETA_MAX, fs=DEFAULT_FS, n_taps=DEFAULT_TAPS,
             kind=WindowKind.EPANECHNIKOV, scale="mel") -> FilterBank:
    """Centres equidistant on the mel (or log-frequency) scale; widths from neighbour spacing.

    Each filter's full support is ``clamp(2 / df, 1 ms, 25 ms)`` where ``df`` is
    the half distance between its neighbours (the single gap at the ends).
    """
    if count < 2:
        raise FilterConfigError("need at least two filters")
    if not (ETA_MIN <= f_min < f_max <= ETA_MAX):
        raise FilterConfigError(f"need {ETA_MIN} <= f_min < f_max <= {ETA_MAX}")
    if scale == "mel":
        centres = mel_to_hz(np.linspace(hz_to_mel(f_min), hz_to_mel(f_max), count))
    elif scale == "log":
        centres = np.exp(np.linspace(math.log(f_min), math.log(f_max), count))
    else:
        raise FilterConfigError(f"unknown frequency scale {scale!r}")
    centres[0], centres[-1] = f_min, f_max
    gaps = np.diff(centres)
    df = np.empty(count)
    df[0], df[-1] = gaps[0], gaps[-1]
    df[1:-1] = (centres[2:] - centres[:-2]) / 2.0
    width = np.clip(2.0 / df, WIDTH_MIN, WIDTH_MAX)
    gamma = clip_gamma(4.0 / width**2)
    return FilterBank(clip_eta(centres), gamma, fs, n_taps, kind)


def freq_response(taps, n_fft, fs=DEFAULT_FS):
    """Magnitude spectrum over non-negative frequencies and its peak frequency in Hz.

    The peak is ``nan`` for an all-zero (degenerate) filter.
    """
    taps = np.asarray(taps, dtype=float)
    if n_fft < taps.size:
        raise ValueError("n_fft must be at least the filter length")
    mags = np.abs(np.fft.rfft(taps, n_fft))
    if not np.any(mags > 0):
        return mags, float("nan")
    return mags, float(np.argmax(mags) * fs / n_fft)
