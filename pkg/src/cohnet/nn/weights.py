"""CWT1 weight files.

Layout (little-endian): ``b"CWT1"``, u32 tensor count, then for each tensor
u8 rank, rank x u32 dims and the f32 payload; a trailing u64 FNV-1a hash of
all payload bytes. The first tensor is always a rank-1 metadata vector
(possibly empty) followed by the network parameters in layer order.
"""

from __future__ import annotations

import os
import struct
from pathlib import Path

import numpy as np

from cohnet._fileio import atomic_write_bytes

MAGIC = b"CWT1"
_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3
_MASK64 = 0xFFFFFFFFFFFFFFFF


class WeightFileError(ValueError):
    pass


class BadWeightMagicError(WeightFileError):
    pass


class TruncatedWeightsError(WeightFileError):
    pass


class ChecksumError(WeightFileError):
    pass


class ShapeMismatchError(WeightFileError):
    pass


def fnv1a64(data: bytes) -> int:
    h = _FNV_OFFSET
    for byte in data:
        h ^= byte
        h = (h * _FNV_PRIME) & _MASK64
    return h


def tensors_to_bytes(tensors: list[np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<I", len(tensors))]
    payload = bytearray()
    for t in tensors:
        t = np.asarray(t)
        parts.append(struct.pack("<B", t.ndim))
        parts.append(struct.pack(f"<{t.ndim}I", *t.shape))
        raw = np.ascontiguousarray(t, dtype="<f4").tobytes()
        parts.append(raw)
        payload += raw
    parts.append(struct.pack("<Q", fnv1a64(bytes(payload))))
    return b"".join(parts)


def tensors_from_bytes(buf: bytes) -> list[np.ndarray]:
    if buf[:4] != MAGIC:
        raise BadWeightMagicError(f"bad magic {bytes(buf[:4])!r}, expected {MAGIC!r}")

    def need(off, n):
        if off + n > len(buf):
            raise TruncatedWeightsError(f"weight file truncated at byte {off} (needs {n} more)")

    need(4, 4)
    (count,) = struct.unpack_from("<I", buf, 4)
    off = 8
    tensors = []
    payload = bytearray()
    for _ in range(count):
        need(off, 1)
        rank = buf[off]
        off += 1
        need(off, 4 * rank)
        dims = struct.unpack_from(f"<{rank}I", buf, off)
        off += 4 * rank
        n = int(np.prod(dims, dtype=np.int64)) if rank else 1
        need(off, 4 * n)
        raw = buf[off : off + 4 * n]
        tensors.append(np.frombuffer(raw, dtype="<f4").astype(np.float32).reshape(dims))
        payload += raw
        off += 4 * n
    need(off, 8)
    (stored,) = struct.unpack_from("<Q", buf, off)
    if stored != fnv1a64(bytes(payload)):
        raise ChecksumError("payload checksum mismatch")
    return tensors


def save_weights(net, path: str | os.PathLike, metadata=()) -> None:
    meta = np.asarray(metadata, dtype=np.float32).ravel()
    atomic_write_bytes(path, tensors_to_bytes([meta, *net.parameters()]))


def read_weight_file(path: str | os.PathLike) -> tuple[np.ndarray, list[np.ndarray]]:
    tensors = tensors_from_bytes(Path(path).read_bytes())
    if not tensors or tensors[0].ndim != 1:
        raise WeightFileError("missing metadata tensor")
    return tensors[0], tensors[1:]


def load_weights(path: str | os.PathLike, net) -> np.ndarray:
    """Load parameters into ``net`` (in place); returns the metadata vector."""
    meta, params = read_weight_file(path)
    assign_parameters(net, params)
    return meta


def assign_parameters(net, params: list[np.ndarray]) -> None:
    slots = [(layer, k) for layer in net.layers for k in range(len(layer.params))]
    if len(slots) != len(params):
        raise ShapeMismatchError(f"file holds {len(params)} tensors, network expects {len(slots)}")
    for (layer, k), p in zip(slots, params):
        if layer.params[k].shape != p.shape:
            raise ShapeMismatchError(f"{layer!r}: expected {layer.params[k].shape}, file has {p.shape}")
    for (layer, k), p in zip(slots, params):
        layer.params[k] = p.astype(net.dtype)


def file_checksum(path: str | os.PathLike) -> int:
    """FNV-1a of the whole file, used to check that frozen weights stay put."""
    return fnv1a64(Path(path).read_bytes())
