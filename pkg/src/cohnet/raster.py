"""Raster containers, patch tiling and the CHR1 binary format."""

from __future__ import annotations

import math
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from cohnet._fileio import atomic_write_bytes

MAGIC = b"CHR1"
DTYPE_SCALAR = 0
DTYPE_COMPLEX = 1
MAX_DIM = 16384
MAX_PIXELS = MAX_DIM * MAX_DIM
DEFAULT_H_MAX = 60.0

_HEADER = struct.Struct("<4sBBHII")

ROLES = (None, "coherence", "height", "kz")


class RasterError(ValueError):
    """Base class for raster contract violations."""


class BadMagicError(RasterError):
    pass


class TruncatedRasterError(RasterError):
    pass


class DimensionError(RasterError):
    pass


class PatchGridError(RasterError):
    pass


def _as_mask(valid, shape) -> np.ndarray:
    if valid is None:
        return np.ones(shape, dtype=bool)
    valid = np.asarray(valid, dtype=bool)
    if valid.shape != shape:
        raise DimensionError(f"mask shape {valid.shape} does not match data shape {shape}")
    return valid.copy()


def _check_dims(shape) -> None:
    if len(shape) != 2:
        raise DimensionError(f"raster data must be 2-D, got shape {shape}")
    h, w = shape
    if h == 0 or w == 0:
        raise DimensionError("zero-sized raster")
    if h * w > MAX_PIXELS:
        raise DimensionError(f"{w}x{h} exceeds the {MAX_DIM}x{MAX_DIM} cap")


@dataclass(frozen=True, eq=False)
class ScalarRaster:
    """Real-valued 2-D grid with a per-pixel validity mask.

    ``data`` is stored as float64 with shape ``(height, width)``. Non-finite
    samples are marked invalid and zeroed. ``role`` optionally tags the
    raster so that range invariants are checked on construction.
    """

    data: np.ndarray
    valid: np.ndarray = None
    role: str | None = None
    h_max: float = DEFAULT_H_MAX

    def __post_init__(self):
        data = np.array(self.data, dtype=np.float64)
        _check_dims(data.shape)
        valid = _as_mask(self.valid, data.shape)
        bad = ~np.isfinite(data)
        if bad.any():
            valid &= ~bad
            data[bad] = 0.0
        if self.role not in ROLES:
            raise ValueError(f"unknown raster role {self.role!r}")
        v = data[valid]
        if self.role == "coherence" and v.size and (v.min() < 0.0 or v.max() > 1.0):
            raise ValueError("coherence raster has valid samples outside [0, 1]")
        if self.role == "height" and v.size and (v.min() < 0.0 or v.max() > self.h_max):
            raise ValueError(f"height raster has valid samples outside [0, {self.h_max}]")
        if self.role == "kz" and v.size and v.min() <= 0.0:
            raise ValueError("kz raster must be strictly positive")
        data.setflags(write=False)
        valid.setflags(write=False)
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "valid", valid)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    def with_data(self, data, valid=None, role=None) -> "ScalarRaster":
        return ScalarRaster(data, self.valid if valid is None else valid, role=role, h_max=self.h_max)

    def equals(self, other) -> bool:
        return (
            isinstance(other, ScalarRaster)
            and self.shape == other.shape
            and np.array_equal(self.valid, other.valid)
            and np.array_equal(self.data, other.data)
        )


@dataclass(frozen=True, eq=False)
class ComplexRaster:
    """Complex-valued 2-D grid (SLCs, complex coherence) with validity mask."""

    data: np.ndarray
    valid: np.ndarray = None

    def __post_init__(self):
        data = np.array(self.data, dtype=np.complex128)
        _check_dims(data.shape)
        valid = _as_mask(self.valid, data.shape)
        bad = ~np.isfinite(data)
        if bad.any():
            valid &= ~bad
            data[bad] = 0.0
        data.setflags(write=False)
        valid.setflags(write=False)
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "valid", valid)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    def magnitude(self) -> ScalarRaster:
        return ScalarRaster(np.abs(self.data), self.valid)

    def equals(self, other) -> bool:
        return (
            isinstance(other, ComplexRaster)
            and self.shape == other.shape
            and np.array_equal(self.valid, other.valid)
            and np.array_equal(self.data, other.data)
        )


# ---------------------------------------------------------------------------
# file format
# ---------------------------------------------------------------------------


def raster_to_bytes(raster: ScalarRaster | ComplexRaster) -> bytes:
    if isinstance(raster, ComplexRaster):
        code = DTYPE_COMPLEX
        payload = raster.data.astype("<c8").tobytes()
    elif isinstance(raster, ScalarRaster):
        code = DTYPE_SCALAR
        payload = raster.data.astype("<f4").tobytes()
    else:
        raise TypeError(f"not a raster: {type(raster).__name__}")
    header = _HEADER.pack(MAGIC, code, 0, 0, raster.width, raster.height)
    mask = raster.valid.astype(np.uint8).tobytes()
    return header + payload + mask


def raster_from_bytes(buf: bytes, max_pixels: int = MAX_PIXELS) -> ScalarRaster | ComplexRaster:
    if len(buf) < 4 or buf[:4] != MAGIC:
        raise BadMagicError(f"bad magic {bytes(buf[:4])!r}, expected {MAGIC!r}")
    if len(buf) < _HEADER.size:
        raise TruncatedRasterError("file shorter than the CHR1 header")
    _, code, _, _, width, height = _HEADER.unpack_from(buf)
    if code not in (DTYPE_SCALAR, DTYPE_COMPLEX):
        raise RasterError(f"unknown dtype code {code}")
    if width == 0 or height == 0:
        raise DimensionError("zero-sized raster")
    n = width * height
    if n > max_pixels:
        raise DimensionError(f"{width}x{height} exceeds the pixel cap {max_pixels}")
    sample = 8 if code == DTYPE_COMPLEX else 4
    need = _HEADER.size + n * sample + n
    if len(buf) < need:
        raise TruncatedRasterError(f"payload truncated: {len(buf)} of {need} bytes")
    off = _HEADER.size
    dt = "<c8" if code == DTYPE_COMPLEX else "<f4"
    data = np.frombuffer(buf, dtype=dt, count=n, offset=off).reshape(height, width)
    mask = np.frombuffer(buf, dtype=np.uint8, count=n, offset=off + n * sample).reshape(height, width)
    if code == DTYPE_COMPLEX:
        return ComplexRaster(data, mask != 0)
    return ScalarRaster(data, mask != 0)


def write_raster(raster: ScalarRaster | ComplexRaster, path: str | os.PathLike) -> None:
    atomic_write_bytes(path, raster_to_bytes(raster))


def read_raster(path: str | os.PathLike, max_pixels: int = MAX_PIXELS) -> ScalarRaster | ComplexRaster:
    return raster_from_bytes(Path(path).read_bytes(), max_pixels=max_pixels)


# ---------------------------------------------------------------------------
# patches
# ---------------------------------------------------------------------------


def axis_origins(dim: int, patch_size: int, stride: int) -> list[int]:
    """Patch origins along one axis; the last patch is flush with the far edge."""
    if patch_size > dim:
        raise PatchGridError(f"patch size {patch_size} larger than dimension {dim}")
    if stride < 1:
        raise PatchGridError("stride must be >= 1")
    origins = list(range(0, dim - patch_size + 1, stride))
    if origins[-1] != dim - patch_size:
        origins.append(dim - patch_size)
    return origins


def patch_count(dim: int, patch_size: int, stride: int) -> int:
    return 1 + math.ceil((dim - patch_size) / stride)


@dataclass(frozen=True)
class PatchGrid:
    patch_size: int
    stride: int
    height: int
    width: int
    origins: tuple[tuple[int, int], ...] = field(default=())

    @classmethod
    def for_shape(cls, shape, patch_size: int = 64, stride: int = 32) -> "PatchGrid":
        h, w = shape
        rows = axis_origins(h, patch_size, stride)
        cols = axis_origins(w, patch_size, stride)
        return cls(patch_size, stride, h, w, tuple((r, c) for r in rows for c in cols))

    def __len__(self) -> int:
        return len(self.origins)


def extract_patches(raster, patch_size: int = 64, stride: int = 32):
    """Cut ``raster`` into overlapping square patches in row-major origin order."""
    grid = PatchGrid.for_shape(raster.shape, patch_size, stride)
    p = patch_size
    patches = []
    for r, c in grid.origins:
        data = raster.data[r : r + p, c : c + p]
        valid = raster.valid[r : r + p, c : c + p]
        if isinstance(raster, ComplexRaster):
            patches.append(ComplexRaster(data, valid))
        else:
            patches.append(ScalarRaster(data, valid, h_max=raster.h_max))
    return patches, grid


def reassemble_patches(patches, grid: PatchGrid) -> ScalarRaster:
    """Inverse of :func:`extract_patches`; overlaps are averaged over valid contributors."""
    if len(patches) != len(grid.origins):
        raise PatchGridError(f"{len(patches)} patches for a grid of {len(grid.origins)}")
    p = grid.patch_size
    # running mean in fixed patch order: exact when overlapping copies agree
    mean = np.zeros((grid.height, grid.width))
    count = np.zeros((grid.height, grid.width))
    for patch, (r, c) in zip(patches, grid.origins):
        data = patch.data if isinstance(patch, (ScalarRaster, ComplexRaster)) else np.asarray(patch)
        valid = patch.valid if isinstance(patch, (ScalarRaster, ComplexRaster)) else np.isfinite(data)
        if data.shape != (p, p):
            raise PatchGridError(f"patch shape {data.shape} does not match grid patch size {p}")
        if np.iscomplexobj(data):
            raise PatchGridError("reassembly is defined for scalar patches only")
        cnt = count[r : r + p, c : c + p]
        cnt += valid
        m = mean[r : r + p, c : c + p]
        m[valid] += (data[valid] - m[valid]) / cnt[valid]
    return ScalarRaster(mean, count > 0)
