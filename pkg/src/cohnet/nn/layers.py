"""Layers with explicit forward/backward passes.

Image tensors are kept channel-major, ``(C, N, H, W)``, inside a network so
that 3x3 convolutions become a single matrix product without transposes.
Dense layers take ``(N, F)``.
"""

from __future__ import annotations

import numpy as np


class Layer:
    has_params = False

    def __init__(self):
        self.params: list[np.ndarray] = []
        self.grads: list[np.ndarray] | None = None
        self._cache = None

    def forward(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def backward(self, g: np.ndarray, param_grads: bool = True) -> np.ndarray:
        raise NotImplementedError

    def _cached(self):
        if self._cache is None:
            raise RuntimeError(f"{type(self).__name__}.backward called without a forward cache")
        return self._cache

    def fans(self) -> tuple[int, int]:
        raise TypeError(f"{type(self).__name__} has no weights")

    def clear(self):
        self._cache = None

    def __repr__(self):
        return f"{type(self).__name__}()"


class Dense(Layer):
    has_params = True

    def __init__(self, n_in: int, n_out: int):
        super().__init__()
        self.n_in, self.n_out = n_in, n_out
        self.params = [np.zeros((n_in, n_out), np.float32), np.zeros(n_out, np.float32)]

    def fans(self):
        return self.n_in, self.n_out

    def forward(self, x):
        if x.ndim != 2 or x.shape[1] != self.n_in:
            raise ValueError(f"Dense({self.n_in},{self.n_out}) got input of shape {x.shape}")
        self._cache = x
        w, b = self.params
        return x @ w + b

    def backward(self, g, param_grads=True):
        x = self._cached()
        w, _ = self.params
        self.grads = [x.T @ g, g.sum(axis=0)] if param_grads else None
        return g @ w.T

    def __repr__(self):
        return f"Dense({self.n_in}, {self.n_out})"


class Conv3x3(Layer):
    """3x3 convolution, stride 1, zero padding 1."""

    has_params = True

    def __init__(self, in_ch: int, out_ch: int):
        super().__init__()
        self.in_ch, self.out_ch = in_ch, out_ch
        self.params = [np.zeros((out_ch, in_ch, 3, 3), np.float32), np.zeros(out_ch, np.float32)]

    def fans(self):
        return self.in_ch * 9, self.out_ch * 9

    def forward(self, x):
        if x.ndim != 4 or x.shape[0] != self.in_ch:
            raise ValueError(f"Conv3x3({self.in_ch},{self.out_ch}) got input of shape {x.shape}")
        c, n, h, w = x.shape
        xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
        cols = np.empty((c, 9, n, h, w), dtype=x.dtype)
        for k in range(9):
            dy, dx = divmod(k, 3)
            cols[:, k] = xp[:, :, dy : dy + h, dx : dx + w]
        cols = cols.reshape(c * 9, n * h * w)
        wt, b = self.params
        y = wt.reshape(self.out_ch, c * 9) @ cols
        y += b[:, None]
        self._cache = (cols, x.shape)
        return y.reshape(self.out_ch, n, h, w)

    def backward(self, g, param_grads=True):
        cols, (c, n, h, w) = self._cached()
        wt, _ = self.params
        g2 = g.reshape(self.out_ch, n * h * w)
        if param_grads:
            self.grads = [(g2 @ cols.T).reshape(wt.shape), g2.sum(axis=1)]
        else:
            self.grads = None
        dcols = (wt.reshape(self.out_ch, c * 9).T @ g2).reshape(c, 9, n, h, w)
        dxp = np.zeros((c, n, h + 2, w + 2), dtype=g.dtype)
        for k in range(9):
            dy, dx = divmod(k, 3)
            dxp[:, :, dy : dy + h, dx : dx + w] += dcols[:, k]
        return dxp[:, :, 1:-1, 1:-1]

    def __repr__(self):
        return f"Conv3x3({self.in_ch}, {self.out_ch})"


class ReLU(Layer):
    def forward(self, x):
        self._cache = x > 0
        return np.where(self._cache, x, 0).astype(x.dtype, copy=False)

    def backward(self, g, param_grads=True):
        return np.where(self._cached(), g, 0).astype(g.dtype, copy=False)


class Sigmoid(Layer):
    """Logistic activation whose output stays strictly inside (0, 1).

    Pre-activations are clipped where the dtype would round the output to
    exactly 0 or 1; the clipped region has zero gradient.
    """

    _BOUND = {np.dtype(np.float32): 16.0, np.dtype(np.float64): 36.0}

    def forward(self, x):
        bound = self._BOUND.get(x.dtype, 16.0)
        inside = np.abs(x) <= bound
        xc = np.clip(x, -bound, bound)
        y = 1.0 / (1.0 + np.exp(-xc))
        self._cache = (y, inside)
        return y

    def backward(self, g, param_grads=True):
        y, inside = self._cached()
        return g * y * (1 - y) * inside


class Identity(Layer):
    def forward(self, x):
        self._cache = True
        return x

    def backward(self, g, param_grads=True):
        self._cached()
        return g


class MaxPool2(Layer):
    def forward(self, x):
        c, n, h, w = x.shape
        if h % 2 or w % 2:
            raise ValueError(f"MaxPool2 needs even spatial dims, got {h}x{w}")
        blocks = x.reshape(c, n, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(c, n, h // 2, w // 2, 4)
        idx = blocks.argmax(axis=-1)
        self._cache = (idx, x.shape)
        return np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]

    def backward(self, g, param_grads=True):
        idx, (c, n, h, w) = self._cached()
        d = np.zeros((c, n, h // 2, w // 2, 4), dtype=g.dtype)
        np.put_along_axis(d, idx[..., None], g[..., None], axis=-1)
        return d.reshape(c, n, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(c, n, h, w)


class UpsampleNearest2(Layer):
    def forward(self, x):
        self._cache = x.shape
        return x.repeat(2, axis=-2).repeat(2, axis=-1)

    def backward(self, g, param_grads=True):
        c, n, h, w = self._cached()
        return g.reshape(c, n, h, 2, w, 2).sum(axis=(3, 5))


class SkipConcat(Layer):
    """Concatenate the output of layer ``source`` after the current channels."""

    def __init__(self, source: int):
        super().__init__()
        self.source = source

    def forward(self, x, skip=None):
        if skip is None:
            raise ValueError("SkipConcat needs the source activation")
        if x.shape[1:] != skip.shape[1:]:
            raise ValueError(f"SkipConcat shape mismatch {x.shape} vs {skip.shape}")
        self._cache = x.shape[0]
        return np.concatenate([x, skip], axis=0)

    def backward(self, g, param_grads=True):
        k = self._cached()
        return g[:k], g[k:]

    def __repr__(self):
        return f"SkipConcat(source={self.source})"
