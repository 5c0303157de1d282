from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class AdamState:
    """Moment accumulators and a linearly decaying learning rate.

    The rate moves from ``lr_start`` at step 1 to ``lr_end`` at step
    ``total_steps`` and stays there afterwards.
    """

    shapes: list[tuple[int, ...]]
    lr_start: float = 1e-3
    lr_end: float = 1e-4
    total_steps: int = 1
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    dtype: np.dtype = np.float32
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)

    def __post_init__(self):
        if not self.m:
            self.m = [np.zeros(s, self.dtype) for s in self.shapes]
            self.v = [np.zeros(s, self.dtype) for s in self.shapes]

    @classmethod
    def for_params(cls, params, **kw) -> "AdamState":
        dtype = params[0].dtype if params else np.float32
        return cls([p.shape for p in params], dtype=dtype, **kw)

    def lr(self, step: int | None = None) -> float:
        t = self.step + 1 if step is None else step
        if self.total_steps <= 1:
            return self.lr_start
        frac = min(max(t - 1, 0) / (self.total_steps - 1), 1.0)
        return self.lr_start + (self.lr_end - self.lr_start) * frac


def adam_step(state: AdamState, params: list[np.ndarray], grads: list[np.ndarray]) -> list[np.ndarray]:
    """One bias-corrected Adam update, applied to ``params`` in place."""
    if len(params) != len(state.m) or len(grads) != len(params):
        raise ValueError("parameter/gradient/state counts differ")
    for p, g, s in zip(params, grads, state.shapes):
        if p.shape != s or g.shape != s:
            raise ValueError(f"shape mismatch: param {p.shape}, grad {g.shape}, state {s}")
    lr = state.lr()
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * (g * g)
        p -= (lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.dtype, copy=False)
    return params
