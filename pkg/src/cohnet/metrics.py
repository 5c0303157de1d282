"""Masked height-error metrics."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np


class EmptyMaskError(ValueError):
    pass


class UndefinedR2Error(ValueError):
    pass


def _masked(pred, ref, mask):
    p = getattr(pred, "data", pred)
    r = getattr(ref, "data", ref)
    p = np.asarray(p, dtype=np.float64)
    r = np.asarray(r, dtype=np.float64)
    if p.shape != r.shape:
        raise ValueError(f"shape mismatch {p.shape} vs {r.shape}")
    m = np.ones(p.shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    if hasattr(pred, "valid"):
        m = m & pred.valid
    if hasattr(ref, "valid"):
        m = m & ref.valid
    return p[m], r[m]


def rmse(pred, ref, mask=None) -> float:
    p, r = _masked(pred, ref, mask)
    if p.size == 0:
        raise EmptyMaskError("no valid pixels")
    return float(np.sqrt(np.mean((r - p) ** 2)))


def r_squared(pred, ref, mask=None) -> float:
    p, r = _masked(pred, ref, mask)
    if p.size < 2:
        raise EmptyMaskError("R^2 needs at least two valid pixels")
    ss_tot = float(np.sum((r - r.mean()) ** 2))
    if ss_tot == 0.0:
        raise UndefinedR2Error("reference is constant; R^2 is undefined")
    return 1.0 - float(np.sum((r - p) ** 2)) / ss_tot


def bias(pred, ref, mask=None) -> float:
    p, r = _masked(pred, ref, mask)
    if p.size == 0:
        raise EmptyMaskError("no valid pixels")
    return float(np.mean(p - r))


@dataclass(frozen=True)
class MetricReport:
    rmse: float
    r2: float
    n_valid: int
    bias: float

    def __post_init__(self):
        if self.n_valid < 1:
            raise ValueError("n_valid must be >= 1")
        if self.rmse < 0:
            raise ValueError("rmse must be >= 0")
        if not (self.r2 <= 1.0 or np.isnan(self.r2)):
            raise ValueError("r2 must be <= 1")

    @classmethod
    def compute(cls, pred, ref, mask=None) -> "MetricReport":
        p, r = _masked(pred, ref, mask)
        if p.size == 0:
            raise EmptyMaskError("no valid pixels")
        try:
            r2 = r_squared(p, r)
        except (UndefinedR2Error, EmptyMaskError):
            r2 = float("nan")
        return cls(rmse=rmse(p, r), r2=r2, n_valid=int(p.size), bias=bias(p, r))

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=1, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "MetricReport":
        return cls(**json.loads(text))
