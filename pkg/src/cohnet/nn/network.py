from __future__ import annotations

import numpy as np

from cohnet.nn.layers import (
    Conv3x3,
    Dense,
    Identity,
    Layer,
    MaxPool2,
    ReLU,
    Sigmoid,
    SkipConcat,
    UpsampleNearest2,
)


class NumericalError(FloatingPointError):
    """Raised when a forward or backward pass produces non-finite values."""


def _check_finite(a: np.ndarray, where: str) -> None:
    if not np.all(np.isfinite(a)):
        bad = int(np.count_nonzero(~np.isfinite(a)))
        raise NumericalError(f"{bad} non-finite values in {where}")


class Network:
    """Ordered list of layers with reverse-mode differentiation.

    Image networks (``image=True``) take and return ``(N, C, H, W)`` arrays;
    internally activations are channel-major. A frozen network still
    back-propagates to its input but never produces parameter gradients.
    """

    def __init__(self, layers: list[Layer], image: bool = False, dtype=np.float32, depth: int = 0):
        self.layers = list(layers)
        self.image = image
        self.depth = depth
        self.frozen = False
        self.dtype = np.dtype(dtype)
        self._acts: list[np.ndarray] | None = None
        for i, layer in enumerate(self.layers):
            if isinstance(layer, SkipConcat) and not (0 <= layer.source < i):
                raise ValueError(f"layer {i}: skip source {layer.source} must precede it")
        self.astype(dtype)

    # parameters -----------------------------------------------------------

    def astype(self, dtype) -> "Network":
        self.dtype = np.dtype(dtype)
        for layer in self.layers:
            layer.params = [p.astype(self.dtype) for p in layer.params]
        return self

    def parameters(self) -> list[np.ndarray]:
        return [p for layer in self.layers for p in layer.params]

    def gradients(self) -> list[np.ndarray] | None:
        if self.frozen:
            return None
        out = []
        for layer in self.layers:
            if layer.has_params:
                if layer.grads is None:
                    raise RuntimeError("no gradients; run backward first")
                out.extend(layer.grads)
        return out

    def n_params(self) -> int:
        return sum(p.size for p in self.parameters())

    def freeze(self) -> "Network":
        self.frozen = True
        for layer in self.layers:
            layer.grads = None
        return self

    # passes ---------------------------------------------------------------

    def forward(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=self.dtype)
        _check_finite(x, "forward input")
        if self.image:
            if x.ndim != 4:
                raise ValueError(f"image network expects (N, C, H, W), got {x.shape}")
            check_image_dims(self, x.shape)
            x = np.ascontiguousarray(x.transpose(1, 0, 2, 3))
        acts = [x]
        for i, layer in enumerate(self.layers):
            if isinstance(layer, SkipConcat):
                x = layer.forward(x, acts[layer.source + 1])
            else:
                x = layer.forward(x)
            acts.append(x)
        _check_finite(x, "forward output")
        self._acts = acts
        return x.transpose(1, 0, 2, 3) if self.image else x

    __call__ = forward

    def backward(self, upstream: np.ndarray) -> np.ndarray:
        """Propagate ``upstream`` (d loss / d output) back to the input.

        Parameter gradients are stored on the layers (see :meth:`gradients`).
        """
        if self._acts is None:
            raise RuntimeError("backward called before forward")
        g = np.asarray(upstream, dtype=self.dtype)
        if self.image:
            g = np.ascontiguousarray(g.transpose(1, 0, 2, 3))
        if g.shape != self._acts[-1].shape:
            raise ValueError(f"upstream gradient shape {g.shape} != output shape {self._acts[-1].shape}")
        want = not self.frozen
        extra: dict[int, np.ndarray] = {}
        for i in range(len(self.layers) - 1, -1, -1):
            if i + 1 in extra:
                g = g + extra.pop(i + 1)
            layer = self.layers[i]
            out = layer.backward(g, param_grads=want)
            if isinstance(layer, SkipConcat):
                g, gs = out
                key = layer.source + 1
                extra[key] = extra[key] + gs if key in extra else gs
            else:
                g = out
        _check_finite(g, "input gradient")
        return g.transpose(1, 0, 2, 3) if self.image else g

    def clear(self) -> None:
        self._acts = None
        for layer in self.layers:
            layer.clear()

    def __repr__(self):
        body = ", ".join(repr(layer) for layer in self.layers)
        return f"Network([{body}], image={self.image}, frozen={self.frozen})"


def _philox(seed: int, stream: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed) & (2**64 - 1), stream])))


def init_weights(net: Network, seed: int) -> Network:
    """He-uniform for layers feeding a ReLU, Glorot-uniform otherwise; zero biases."""
    rng = _philox(seed, 0x5EED)
    for i, layer in enumerate(net.layers):
        if not layer.has_params:
            continue
        fan_in, fan_out = layer.fans()
        nxt = net.layers[i + 1] if i + 1 < len(net.layers) else None
        if isinstance(nxt, ReLU):
            bound = np.sqrt(6.0 / fan_in)
        else:
            bound = np.sqrt(6.0 / (fan_in + fan_out))
        w, b = layer.params
        layer.params = [
            rng.uniform(-bound, bound, size=w.shape).astype(net.dtype),
            np.zeros_like(b),
        ]
    return net


def build_mlp(sizes=(2, 64, 64, 1), out_activation: str = "identity") -> Network:
    layers: list[Layer] = []
    for k, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
        layers.append(Dense(a, b))
        if k < len(sizes) - 2:
            layers.append(ReLU())
    layers.append(_head(out_activation))
    return Network(layers)


def _head(name: str) -> Layer:
    name = name.lower()
    if name == "sigmoid":
        return Sigmoid()
    if name == "identity":
        return Identity()
    raise ValueError(f"unknown output activation {name!r}")


def build_unet(in_ch: int = 2, base_ch: int = 8, depth: int = 2, out_activation: str = "sigmoid") -> Network:
    """U-Net with ``depth`` pooled encoder levels and a bottleneck.

    Each level is two Conv3x3+ReLU blocks; channels double per level. Inputs
    must have spatial dims divisible by ``2**depth``.
    """
    if depth < 1:
        raise ValueError("depth must be >= 1")
    layers: list[Layer] = []
    skips = []
    c_in = in_ch
    for level in range(depth):
        c = base_ch * 2**level
        layers += [Conv3x3(c_in, c), ReLU(), Conv3x3(c, c), ReLU()]
        skips.append((len(layers) - 1, c))
        layers.append(MaxPool2())
        c_in = c
    c = base_ch * 2**depth
    layers += [Conv3x3(c_in, c), ReLU(), Conv3x3(c, c), ReLU()]
    c_in = c
    for level in reversed(range(depth)):
        src, c_skip = skips[level]
        c = base_ch * 2**level
        layers += [UpsampleNearest2(), SkipConcat(src), Conv3x3(c_in + c_skip, c), ReLU(), Conv3x3(c, c), ReLU()]
        c_in = c
    layers += [Conv3x3(c_in, 1), _head(out_activation)]
    return Network(layers, image=True, depth=depth)


def check_image_dims(net: Network, shape) -> None:
    depth = net.depth
    h, w = shape[-2:]
    if h % 2**depth or w % 2**depth:
        raise ValueError(f"spatial dims {h}x{w} not divisible by 2**{depth}")
