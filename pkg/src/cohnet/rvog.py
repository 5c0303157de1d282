"""Random Volume over Ground coherence model and height inversion."""

from __future__ import annotations

import math
import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from cohnet._fileio import atomic_write_bytes
from cohnet.raster import DimensionError, ScalarRaster

DEFAULT_THETA = math.pi / 4
BISECT_TOL = 1e-3
BISECT_MAX_ITER = 200
# slack on the ambiguity-height bound so that 2*pi/kz itself is admissible
_BRANCH_SLACK = 1e-9

LUT_MAGIC = b"CLUT"


def ambiguity_height(kz):
    return 2.0 * np.pi / np.asarray(kz, dtype=np.float64)


@dataclass(frozen=True)
class RvogParams:
    hv: float
    kz: float
    sigma: float = 0.0
    mu: float = 0.0
    z0: float = 0.0
    theta: float = DEFAULT_THETA
    h_cap: float = math.inf

    def __post_init__(self):
        if not self.kz > 0:
            raise ValueError(f"kz must be > 0, got {self.kz}")
        if not (0.0 < self.theta < math.pi / 2):
            raise ValueError(f"theta must lie in (0, pi/2), got {self.theta}")
        if self.sigma < 0 or self.mu < 0:
            raise ValueError("sigma and mu must be non-negative")
        if not math.isfinite(self.z0):
            raise ValueError("z0 must be finite")
        if not (0.0 <= self.hv <= self.h_max):
            raise ValueError(f"hv={self.hv} outside [0, {self.h_max}]")

    @property
    def h_max(self) -> float:
        return min(self.h_cap, float(ambiguity_height(self.kz)) * (1 + _BRANCH_SLACK))


def volume_coherence(hv, kz, sigma=0.0, theta=DEFAULT_THETA, z0=0.0):
    """Vectorised volume coherence for an exponential reflectivity profile.

    The profile ``exp(p z)`` with ``p = 2 sigma / cos(theta)`` is integrated in
    closed form. The ratio is evaluated as
    ``p (e^{i kz hv} - e^{-p hv}) / ((p + i kz)(1 - e^{-p hv}))`` which stays
    finite for large extinction; ``p = 0`` and ``hv = 0`` use their limits.
    No range checks are applied here; see :func:`rvog_volume_coherence`.
    """
    hv, kz, sigma, theta, z0 = np.broadcast_arrays(
        *(np.asarray(v, dtype=np.float64) for v in (hv, kz, sigma, theta, z0))
    )
    p = 2.0 * sigma / np.cos(theta)
    x = kz * hv
    out = np.ones(hv.shape, dtype=np.complex128)

    # near hv = 0 the closed forms lose all precision; first-order series
    small = (hv > 0) & (np.maximum(p, kz) * hv < 1e-6)
    out[small] = np.exp(0.5j * x[small])

    # negligible extinction (p hv < 1e-12) uses the uniform-profile limit
    flat = (p * hv < 1e-12) & (hv > 0) & ~small
    xf = x[flat]
    out[flat] = np.expm1(1j * xf) / (1j * xf) if xf.size else out[flat]

    ext = (p * hv >= 1e-12) & (hv > 0) & ~small
    pe, ke, he = p[ext], kz[ext], hv[ext]
    # e^{ix} - e^{-ph} written as a difference of expm1 terms: no cancellation for small hv
    em = np.expm1(-pe * he)
    num = pe * (np.expm1(1j * ke * he) - em)
    den = (pe + 1j * ke) * (-em)
    out[ext] = num / den
    return np.exp(1j * kz * z0) * out


def total_coherence(hv, kz, sigma=0.0, mu=0.0, theta=DEFAULT_THETA, z0=0.0):
    vol = volume_coherence(hv, kz, sigma, theta, 0.0)
    mu = np.asarray(mu, dtype=np.float64)
    return np.exp(1j * np.asarray(kz) * np.asarray(z0)) * ((vol + mu) / (1.0 + mu))


def rvog_volume_coherence(params: RvogParams) -> complex:
    return complex(volume_coherence(params.hv, params.kz, params.sigma, params.theta, params.z0))


def rvog_total_coherence(params: RvogParams) -> complex:
    """Two-layer coherence ``e^{i kz z0} (gamma_v + mu) / (1 + mu)``."""
    return complex(
        total_coherence(params.hv, params.kz, params.sigma, params.mu, params.theta, params.z0)
    )


# ---------------------------------------------------------------------------
# sinc (coherence amplitude) inversion
# ---------------------------------------------------------------------------


def _sinc_mag(hv, kz):
    # np.sinc is the normalised sinc: sin(pi t)/(pi t)
    return np.abs(np.sinc(kz * hv / (2.0 * np.pi)))


def sinc_magnitude(hv, kz):
    """|sin(kz hv / 2) / (kz hv / 2)| on the first branch ``0 <= hv <= 2 pi / kz``."""
    hv_a = np.asarray(hv, dtype=np.float64)
    kz_a = np.asarray(kz, dtype=np.float64)
    if np.any(kz_a <= 0):
        raise ValueError("kz must be > 0")
    if np.any(hv_a < 0) or np.any(hv_a > ambiguity_height(kz_a) * (1 + _BRANCH_SLACK)):
        raise ValueError("hv outside the first sinc branch [0, 2*pi/kz]")
    out = _sinc_mag(hv_a, kz_a)
    return float(out) if out.ndim == 0 else out


def _bisect_sinc(mag: np.ndarray, kz: np.ndarray, tol: float) -> np.ndarray:
    lo = np.zeros_like(mag)
    hi = ambiguity_height(kz) * np.ones_like(mag)
    for _ in range(BISECT_MAX_ITER):
        if np.all(hi - lo <= tol):
            break
        mid = 0.5 * (lo + hi)
        # magnitude decreases with height on the branch
        above = _sinc_mag(mid, kz) > mag
        lo = np.where(above, mid, lo)
        hi = np.where(above, hi, mid)
    out = 0.5 * (lo + hi)
    out = np.where(mag >= 1.0, 0.0, out)
    out = np.where(mag <= 0.0, ambiguity_height(kz), out)
    return out


def invert_height_sinc(gamma_vol_mag, kz, tol: float = BISECT_TOL):
    """Height whose sinc magnitude equals ``gamma_vol_mag``, by bisection.

    Works elementwise on arrays. The result is within ``tol`` metres of the
    root on ``[0, 2 pi / kz]``.
    """
    mag = np.asarray(gamma_vol_mag, dtype=np.float64)
    kz_a = np.asarray(kz, dtype=np.float64)
    if np.any((mag < 0) | (mag > 1)) or np.any(~np.isfinite(mag)):
        raise ValueError("coherence magnitude must lie in [0, 1]")
    if np.any(kz_a <= 0) or np.any(~np.isfinite(kz_a)):
        raise ValueError("kz must be > 0")
    mag, kz_a = np.broadcast_arrays(mag, kz_a)
    out = _bisect_sinc(mag.astype(np.float64), kz_a.astype(np.float64), tol)
    return float(out) if out.ndim == 0 else out


# ---------------------------------------------------------------------------
# look-up-table inversion
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class InversionLut:
    kz: float
    theta: float
    mu: float
    hv_grid: np.ndarray
    sigma_grid: np.ndarray
    table: np.ndarray

    def __post_init__(self):
        if self.table.shape != (len(self.hv_grid), len(self.sigma_grid)):
            raise ValueError("table shape does not match grid sizes")


def _check_grid(g, name) -> np.ndarray:
    g = np.asarray(g, dtype=np.float64).ravel()
    if g.size == 0:
        raise ValueError(f"{name} is empty")
    if np.any(np.diff(g) <= 0):
        raise ValueError(f"{name} must be strictly ascending")
    return g


def build_inversion_lut(kz, hv_grid, sigma_grid=(0.0,), theta=DEFAULT_THETA, mu=0.0) -> InversionLut:
    hv = _check_grid(hv_grid, "hv_grid")
    sg = _check_grid(sigma_grid, "sigma_grid")
    table = total_coherence(hv[:, None], kz, sg[None, :], mu, theta, 0.0)
    return InversionLut(float(kz), float(theta), float(mu), hv, sg, table)


def invert_height_lut(gamma_obs: complex, lut: InversionLut) -> tuple[float, float]:
    """Nearest table cell in the complex plane; ties go to smaller hv, then sigma."""
    dist = np.abs(lut.table - gamma_obs)
    # argmin returns the first minimum in row-major (hv-major) order
    i, j = np.unravel_index(int(np.argmin(dist)), dist.shape)
    return float(lut.hv_grid[i]), float(lut.sigma_grid[j])


def invert_magnitude_lut(mag: np.ndarray, lut: InversionLut) -> np.ndarray:
    """Heights for magnitude-only observations (nearest |table| entry)."""
    table_mag = np.abs(lut.table).ravel()
    mag = np.asarray(mag, dtype=np.float64)
    dist = np.abs(mag.reshape(-1, 1) - table_mag[None, :])
    idx = np.argmin(dist, axis=1)
    i = idx // lut.table.shape[1]
    return lut.hv_grid[i].reshape(mag.shape)


def lut_to_bytes(lut: InversionLut) -> bytes:
    nh, ns = lut.table.shape
    head = LUT_MAGIC + struct.pack("<IIddd", nh, ns, lut.kz, lut.theta, lut.mu)
    table = np.stack([lut.table.real, lut.table.imag], axis=-1).astype("<f8")
    return (
        head
        + lut.hv_grid.astype("<f8").tobytes()
        + lut.sigma_grid.astype("<f8").tobytes()
        + table.tobytes()
    )


def lut_from_bytes(buf: bytes) -> InversionLut:
    if buf[:4] != LUT_MAGIC:
        raise ValueError(f"bad LUT magic {bytes(buf[:4])!r}")
    nh, ns, kz, theta, mu = struct.unpack_from("<IIddd", buf, 4)
    off = 4 + struct.calcsize("<IIddd")
    need = off + 8 * (nh + ns + 2 * nh * ns)
    if len(buf) < need:
        raise ValueError("LUT file truncated")
    hv = np.frombuffer(buf, "<f8", nh, off).astype(np.float64)
    sg = np.frombuffer(buf, "<f8", ns, off + 8 * nh).astype(np.float64)
    t = np.frombuffer(buf, "<f8", 2 * nh * ns, off + 8 * (nh + ns)).reshape(nh, ns, 2)
    return InversionLut(kz, theta, mu, hv, sg, t[..., 0] + 1j * t[..., 1])


def save_lut(lut: InversionLut, path: str | os.PathLike) -> None:
    atomic_write_bytes(path, lut_to_bytes(lut))


def load_lut(path: str | os.PathLike) -> InversionLut:
    return lut_from_bytes(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# raster inversion
# ---------------------------------------------------------------------------


def invert_raster(
    gamma_vol: ScalarRaster,
    kz: ScalarRaster,
    mode: str = "sinc",
    *,
    tol: float = BISECT_TOL,
    hv_step: float = 0.1,
    sigma_grid=(0.0,),
    theta: float = DEFAULT_THETA,
    mu: float = 0.0,
) -> ScalarRaster:
    """Pixel-wise height inversion of a volume-decorrelation magnitude map.

    Pixels with invalid inputs or inputs outside the model's domain come
    back invalid. In ``lut`` mode one table is built per distinct kz value
    with heights on a ``hv_step`` grid up to the ambiguity height.
    """
    if gamma_vol.shape != kz.shape:
        raise DimensionError(f"shape mismatch {gamma_vol.shape} vs {kz.shape}")
    g, k = gamma_vol.data, kz.data
    ok = gamma_vol.valid & kz.valid & (g >= 0) & (g <= 1) & (k > 0)
    out = np.zeros(g.shape)
    if mode == "sinc":
        if ok.any():
            out[ok] = _bisect_sinc(g[ok], k[ok], tol)
    elif mode == "lut":
        for kv in np.unique(k[ok]):
            sel = ok & (k == kv)
            grid = np.arange(0.0, float(ambiguity_height(kv)) + hv_step / 2, hv_step)
            lut = build_inversion_lut(kv, grid, sigma_grid, theta, mu)
            out[sel] = invert_magnitude_lut(g[sel], lut)
    else:
        raise ValueError(f"unknown inversion mode {mode!r}")
    return ScalarRaster(out, ok)
