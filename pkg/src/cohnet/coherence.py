"""Boxcar coherence estimation and decorrelation-budget compensation."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from cohnet.raster import ComplexRaster, DimensionError, ScalarRaster

DEFAULT_WINDOW = 7


@dataclass(frozen=True)
class DecorrelationBudget:
    """Multiplicative coherence-loss factors, each in (0, 1]."""

    gamma_snr: float
    gamma_rg: float
    gamma_quant: float = 1.0
    gamma_temp: float = 1.0
    gamma_sensor: float = 1.0

    def __post_init__(self):
        for name in ("gamma_snr", "gamma_rg", "gamma_quant", "gamma_temp", "gamma_sensor"):
            v = getattr(self, name)
            if not (0.0 < v <= 1.0):
                raise ValueError(f"{name}={v} outside (0, 1]")

    def product(self) -> float:
        return self.gamma_sensor * self.gamma_temp * self.gamma_quant * self.gamma_snr * self.gamma_rg


@dataclass(frozen=True)
class SlcPair:
    s1: ComplexRaster
    s2: ComplexRaster

    def __post_init__(self):
        if self.s1.shape != self.s2.shape:
            raise DimensionError(f"SLC shapes differ: {self.s1.shape} vs {self.s2.shape}")


def snr_decorrelation(snr_linear: float) -> float:
    if not snr_linear > 0:
        raise ValueError(f"SNR must be positive, got {snr_linear}")
    return snr_linear / (1.0 + snr_linear)


def box_sum(a: np.ndarray, window: int) -> np.ndarray:
    """Sum over a centred ``window`` x ``window`` box, truncated at the edges."""
    r = window // 2
    h, w = a.shape
    s = np.zeros((h + 1, w + 1), dtype=a.dtype)
    s[1:, 1:] = a.cumsum(0).cumsum(1)
    i = np.arange(h)
    j = np.arange(w)
    i0, i1 = np.clip(i - r, 0, h), np.clip(i + r + 1, 0, h)
    j0, j1 = np.clip(j - r, 0, w), np.clip(j + r + 1, 0, w)
    return (
        s[np.ix_(i1, j1)] - s[np.ix_(i0, j1)] - s[np.ix_(i1, j0)] + s[np.ix_(i0, j0)]
    )


def estimate_coherence(pair: SlcPair, window: int = DEFAULT_WINDOW) -> ComplexRaster:
    """Maximum-likelihood boxcar estimate of the complex coherence.

    Only valid, in-bounds neighbours enter the window sums. A pixel is
    invalid if it is invalid in either image or either power sum is zero.
    Magnitudes are clamped to 1 with the phase preserved.
    """
    if window < 3 or window % 2 == 0:
        raise ValueError(f"window must be odd and >= 3, got {window}")
    s1, s2 = pair.s1, pair.s2
    both = s1.valid & s2.valid
    a = np.where(both, s1.data, 0)
    b = np.where(both, s2.data, 0)
    cross = box_sum(a * np.conj(b), window)
    p1 = box_sum((a * np.conj(a)).real, window)
    p2 = box_sum((b * np.conj(b)).real, window)
    # cumulative-sum differencing can leave tiny negative residues
    p1 = np.maximum(p1, 0.0)
    p2 = np.maximum(p2, 0.0)
    denom = np.sqrt(p1 * p2)
    valid = both & (p1 > 0) & (p2 > 0)
    gamma = np.zeros_like(cross)
    gamma[valid] = cross[valid] / denom[valid]
    mag = np.abs(gamma)
    over = mag > 1.0
    gamma[over] /= mag[over]
    return ComplexRaster(gamma, valid)


def volume_decorrelation(gamma: ComplexRaster | ScalarRaster, budget: DecorrelationBudget) -> ScalarRaster:
    """Approximate volume decorrelation |gamma| * gamma_rg / gamma_snr, clamped to [0, 1]."""
    mag = np.abs(gamma.data)
    vol = np.clip(mag * budget.gamma_rg / budget.gamma_snr, 0.0, 1.0)
    return ScalarRaster(np.where(gamma.valid, vol, 0.0), gamma.valid, role="coherence")
