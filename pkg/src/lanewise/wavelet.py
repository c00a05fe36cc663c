"""Real-Morlet continuous wavelet transform of 30-sample count windows.

Each count is treated as constant over its own sample cell, so every
coefficient is an exact integral of the piecewise-constant signal against the
scaled wavelet.  The cell integrals have a closed form through the complex
error function, which keeps small scales (periods near 2 samples) free of
point-sampling aliasing.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.special import erf

N_SCALES = 32
N_TIME = 32
SIGNAL_LEN = 30
OMEGA0 = 5.0
MIN_PERIOD = 2.0
MAX_PERIOD = 30.0


def periods(band: tuple[float, float] = (MIN_PERIOD, MAX_PERIOD)) -> np.ndarray:
    """Log-spaced analysis periods in samples, one per spectrogram row."""
    lo, hi = band
    if not 0 < lo < hi:
        raise ValueError("period band must satisfy 0 < min < max")
    return np.geomspace(lo, hi, N_SCALES)


def scales(band: tuple[float, float] = (MIN_PERIOD, MAX_PERIOD)) -> np.ndarray:
    return periods(band) * OMEGA0 / (2 * np.pi)


def morlet(t):
    return np.cos(OMEGA0 * t) * np.exp(-0.5 * np.square(t))


def _morlet_cdf(u: np.ndarray) -> np.ndarray:
    # integral of cos(w0 v) exp(-v^2/2) from -inf to u, up to an additive constant
    z = (u - 1j * OMEGA0) / np.sqrt(2.0)
    return np.real(np.sqrt(np.pi / 2) * np.exp(-OMEGA0**2 / 2) * erf(z))


@lru_cache(maxsize=8)
def _kernel(band: tuple[float, float] = (MIN_PERIOD, MAX_PERIOD)) -> np.ndarray:
    """K[j, b, n]: coefficient weight of sample n at scale j, shift b."""
    a = scales(band)[:, None, None]
    b = np.arange(N_TIME)[None, :, None]
    n = np.arange(N_TIME)[None, None, :]
    hi = _morlet_cdf((n + 0.5 - b) / a)
    lo = _morlet_cdf((n - 0.5 - b) / a)
    k = np.sqrt(a) * (hi - lo)
    k.setflags(write=False)
    return k


def prepare(signal) -> np.ndarray:
    """Mean-subtract a 30-sample signal and zero-pad it to 32 samples."""
    x = np.asarray(signal, dtype=np.float64)
    if x.shape[-1] != SIGNAL_LEN:
        raise ValueError(f"signal length must be {SIGNAL_LEN}, got {x.shape[-1]}")
    x = x - x.mean(axis=-1, keepdims=True)
    pad = [(0, 0)] * (x.ndim - 1) + [(0, N_TIME - SIGNAL_LEN)]
    return np.pad(x, pad)


def cwt_coefficients(signal, band=(MIN_PERIOD, MAX_PERIOD)) -> np.ndarray:
    """Signed coefficients, shape (..., 32 scales, 32 shifts)."""
    x = prepare(signal)
    return np.einsum("jbn,...n->...jb", _kernel(tuple(map(float, band))), x)


def cwt(signal, band=(MIN_PERIOD, MAX_PERIOD)) -> np.ndarray:
    """Magnitude scalogram of one signal (30,) or a batch (m, 30)."""
    return np.abs(cwt_coefficients(signal, band))


@dataclass(frozen=True)
class Spectrogram:
    matrix: np.ndarray
    lane_key: tuple | None = None
    window_start: int | None = None

    @property
    def periods(self) -> np.ndarray:
        return periods()


def fit_normalizer(spectrograms) -> float:
    """Global maximum magnitude over a training corpus."""
    best = 0.0
    for s in spectrograms:
        m = float(np.max(np.asarray(getattr(s, "matrix", s))))
        best = max(best, m)
    if not best > 0.0:
        raise ValueError("degenerate normalizer: corpus has no nonzero coefficient")
    return best


def normalize(raw, constant: float) -> np.ndarray:
    if not constant > 0:
        raise ValueError("normalization constant must be positive")
    return np.minimum(np.asarray(raw) / constant, 1.0)


def dump_text(path, matrix: np.ndarray, band=(MIN_PERIOD, MAX_PERIOD)) -> None:
    """Dense-matrix text dump, first column is the row period."""
    np.savetxt(path, np.column_stack([periods(band), matrix]), fmt="%.8g")
