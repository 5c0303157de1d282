"""Scatter CSV and PGM map exports."""

from __future__ import annotations

import csv
import io
import math

import numpy as np

from cohnet._fileio import atomic_write_bytes, atomic_write_text


def export_scatter(pred, ref, mask, path) -> int:
    """Write ``ref_m,pred_m`` rows for valid pixels in row-major order; returns the row count."""
    p = np.asarray(getattr(pred, "data", pred), dtype=np.float64)
    r = np.asarray(getattr(ref, "data", ref), dtype=np.float64)
    if p.shape != r.shape:
        raise ValueError(f"shape mismatch {p.shape} vs {r.shape}")
    m = np.ones(p.shape, bool) if mask is None else np.asarray(mask, bool)
    for src in (pred, ref):
        if hasattr(src, "valid"):
            m = m & src.valid
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["ref_m", "pred_m"])
    rows = 0
    for a, b in zip(r[m].astype(np.float32), p[m].astype(np.float32)):
        w.writerow([f"{a:.9g}", f"{b:.9g}"])
        rows += 1
    atomic_write_text(path, buf.getvalue())
    return rows


def read_scatter(path) -> np.ndarray:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if rows[0] != ["ref_m", "pred_m"]:
        raise ValueError("not a scatter CSV")
    return np.array([[float(a), float(b)] for a, b in rows[1:]]).reshape(-1, 2)


def pgm_bytes(raster, vmin: float, vmax: float) -> bytes:
    if not (math.isfinite(vmin) and math.isfinite(vmax)) or not vmin < vmax:
        raise ValueError(f"degenerate display range [{vmin}, {vmax}]")
    data = np.asarray(raster.data, dtype=np.float64)
    level = np.floor((data - vmin) / (vmax - vmin) * 255.0)
    level = np.clip(level, 0, 255).astype(np.uint8)
    level[~raster.valid] = 0
    h, w = data.shape
    return f"P5\n{w} {h}\n255\n".encode("ascii") + level.tobytes()


def export_map_pgm(raster, path, value_range=None) -> None:
    """8-bit binary PGM; ``value_range`` defaults to the valid min/max."""
    if value_range is None:
        v = raster.data[raster.valid]
        value_range = (float(v.min()), float(v.max())) if v.size else (0.0, 1.0)
    atomic_write_bytes(path, pgm_bytes(raster, *value_range))
