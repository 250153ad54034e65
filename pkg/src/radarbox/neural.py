"""A small reverse-mode layer library on float64 numpy arrays.

Layers act on the trailing (channel) axis; every leading axis is treated as
batch.  That makes ``Dense`` and ``SharedPointwise`` the same computation: the
former is applied to ``(batch, C)`` rows, the latter to ``(..., points, C)``
clouds with weights shared across points.

Each layer caches what it needs in ``forward`` and consumes it in ``backward``;
parameter gradients accumulate into ``layer.grads`` (call ``zero_grad`` between
steps).
"""

from __future__ import annotations

import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

CHECKPOINT_FORMAT = "radarbox-checkpoint"
CHECKPOINT_VERSION = 1


class ShapeError(ValueError):
    pass


class Layer:
    kind = "layer"

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self.buffers: dict[str, np.ndarray] = {}
        self._cache = None

    def forward(self, x: np.ndarray, train: bool = False) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def zero_grad(self):
        for k, v in self.params.items():
            self.grads[k] = np.zeros_like(v)

    def _need_cache(self):
        if self._cache is None:
            raise RuntimeError(f"{type(self).__name__}.backward called without a forward pass")
        return self._cache

    def spec(self) -> dict:
        return {"kind": self.kind}


# BLAS takes gemv-like paths for narrow outputs whose rounding depends on the
# row's position in the batch; below this width a plain loop keeps each row's
# result independent of its neighbours.
NARROW_OUTPUT = 16


def matmul(x: np.ndarray, W: np.ndarray) -> np.ndarray:
    if W.shape[1] < NARROW_OUTPUT:
        return np.einsum("...i,ij->...j", x, W)
    return x @ W


class Dense(Layer):
    kind = "dense"

    def __init__(self, fan_in: int, fan_out: int, rng: np.random.Generator | None = None):
        super().__init__()
        self.fan_in, self.fan_out = fan_in, fan_out
        rng = rng if rng is not None else np.random.default_rng(0)
        bound = math.sqrt(6.0 / fan_in)
        self.params["W"] = rng.uniform(-bound, bound, size=(fan_in, fan_out))
        self.params["b"] = np.zeros(fan_out)
        self.zero_grad()

    def forward(self, x, train=False):
        if x.shape[-1] != self.fan_in:
            raise ShapeError(f"{self.kind}: expected {self.fan_in} input channels, got {x.shape[-1]}")
        self._cache = x
        return matmul(x, self.params["W"]) + self.params["b"]

    def backward(self, grad):
        x = self._need_cache()
        x2 = x.reshape(-1, self.fan_in)
        g2 = grad.reshape(-1, self.fan_out)
        self.grads["W"] += x2.T @ g2
        self.grads["b"] += g2.sum(axis=0)
        return grad @ self.params["W"].T

    def spec(self):
        return {"kind": self.kind, "fan_in": self.fan_in, "fan_out": self.fan_out}


class SharedPointwise(Dense):
    """Per-point dense layer, weights shared over the point axis."""

    kind = "shared_pointwise"

    def forward(self, x, train=False):
        if x.ndim < 2:
            raise ShapeError("shared_pointwise expects (..., points, channels)")
        return super().forward(x, train)


class MaxPoolPoints(Layer):
    """Max over the point axis: ``(..., K, C) -> (..., C)``.

    The gradient goes to the first arg-max point of each channel only.
    """

    kind = "maxpool_points"

    def forward(self, x, train=False):
        if x.ndim < 2:
            raise ShapeError("maxpool_points expects (..., points, channels)")
        self._cache = x
        return x.max(axis=-2)

    def backward(self, grad):
        x = self._need_cache()
        idx = np.argmax(x, axis=-2)
        out = np.zeros(x.shape)
        np.put_along_axis(out, idx[..., None, :], grad[..., None, :], axis=-2)
        return out


class BatchNorm(Layer):
    """Normalisation over every leading axis; running statistics for eval mode."""

    kind = "batchnorm"

    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        super().__init__()
        self.channels, self.momentum, self.eps = channels, momentum, eps
        self.params["gamma"] = np.ones(channels)
        self.params["beta"] = np.zeros(channels)
        self.buffers["running_mean"] = np.zeros(channels)
        self.buffers["running_var"] = np.ones(channels)
        self.zero_grad()

    def forward(self, x, train=False, weights=None):
        """``weights`` (one per row) make row ``i`` count ``weights[i]`` times in the batch
        statistics, as if it had been repeated; the result equals running the tiled batch.
        """
        if x.shape[-1] != self.channels:
            raise ShapeError(f"batchnorm: expected {self.channels} channels, got {x.shape[-1]}")
        if not train:
            # eval mode is a fixed per-channel affine map
            inv = 1.0 / np.sqrt(self.buffers["running_var"] + self.eps)
            scale = self.params["gamma"] * inv
            shift = self.params["beta"] - self.buffers["running_mean"] * scale
            self._cache = (x, inv, False, None)
            return x * scale + shift
        x2 = x.reshape(-1, self.channels)
        if weights is None:
            n = x2.shape[0]
            mean = x2.mean(axis=0)
            var = x2.var(axis=0)
        else:
            weights = np.asarray(weights, dtype=float).reshape(-1)
            n = float(weights.sum())
            mean = weights @ x2 / n
            var = weights @ (x2 - mean) ** 2 / n
        m = self.momentum
        unbiased = var * n / max(n - 1, 1)
        self.buffers["running_mean"] = (1 - m) * self.buffers["running_mean"] + m * mean
        self.buffers["running_var"] = (1 - m) * self.buffers["running_var"] + m * unbiased
        inv = 1.0 / np.sqrt(var + self.eps)
        xhat = (x - mean) * inv
        self._cache = (xhat, inv, True, weights)
        return xhat * self.params["gamma"] + self.params["beta"]

    def backward(self, grad):
        xhat, inv, train, weights = self._need_cache()
        if not train:
            xhat = (xhat - self.buffers["running_mean"]) * inv  # cached raw input
        c = self.channels
        g2 = grad.reshape(-1, c)
        xh2 = xhat.reshape(-1, c)
        sg = np.einsum("ij,ij->j", g2, xh2)
        sb = g2.sum(axis=0)
        self.grads["gamma"] += sg
        self.grads["beta"] += sb
        k = self.params["gamma"] * inv
        if not train:
            return (g2 * k).reshape(grad.shape)
        if weights is None:
            n = g2.shape[0]
            dx = (g2 - sb / n - xh2 * (sg / n)) * k
        else:
            # gradient summed over the copies a weighted row stands for
            share = (weights / weights.sum())[:, None]
            dx = (g2 - share * (sb + xh2 * sg)) * k
        return dx.reshape(grad.shape)

    def spec(self):
        return {"kind": self.kind, "channels": self.channels, "momentum": self.momentum, "eps": self.eps}


class ReLU(Layer):
    kind = "relu"

    def forward(self, x, train=False):
        mask = x > 0
        self._cache = mask
        return x * mask

    def backward(self, grad):
        return grad * self._need_cache()


def sigmoid(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


class Sigmoid(Layer):
    kind = "sigmoid"

    def forward(self, x, train=False):
        y = sigmoid(x)
        self._cache = y
        return y

    def backward(self, grad):
        y = self._need_cache()
        return grad * y * (1.0 - y)


class Sequential(Layer):
    kind = "sequential"

    def __init__(self, layers: list[Layer]):
        super().__init__()
        self.layers = list(layers)

    def forward(self, x, train=False):
        for layer in self.layers:
            x = layer.forward(x, train)
        return x

    def backward(self, grad):
        for layer in reversed(self.layers):
            grad = layer.backward(grad)
        return grad

    def zero_grad(self):
        for layer in self.layers:
            layer.zero_grad()

    def named_layers(self, prefix: str = ""):
        for i, layer in enumerate(self.layers):
            name = f"{prefix}{i}"
            if isinstance(layer, Sequential):
                yield from layer.named_layers(name + ".")
            else:
                yield name, layer

    def spec(self):
        return {"kind": self.kind, "layers": [l.spec() for l in self.layers]}


def mlp(widths: list[int], rng: np.random.Generator, pointwise: bool = False,
        batchnorm: bool = True, final_activation: bool = True) -> Sequential:
    """Stack of dense (or shared pointwise) layers, each followed by BN and ReLU."""
    cls = SharedPointwise if pointwise else Dense
    layers: list[Layer] = []
    for i, (a, b) in enumerate(zip(widths[:-1], widths[1:])):
        layers.append(cls(a, b, rng))
        last = i == len(widths) - 2
        if last and not final_activation:
            break
        if batchnorm:
            layers.append(BatchNorm(b))
        layers.append(ReLU())
    return Sequential(layers)


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------

PROB_CLAMP = 1e-12


def cross_entropy(p: np.ndarray, y: np.ndarray) -> tuple[float, np.ndarray]:
    """Summed binary cross-entropy and its gradient with respect to ``p``."""
    p = np.clip(np.asarray(p, dtype=float), PROB_CLAMP, 1.0 - PROB_CLAMP)
    y = np.asarray(y, dtype=float)
    loss = float(np.sum(-(y * np.log(p) + (1.0 - y) * np.log1p(-p))))
    grad = -y / p + (1.0 - y) / (1.0 - p)
    return loss, grad


def smooth_l1(r: np.ndarray, r_hat: np.ndarray, delta: float = 1.0) -> tuple[float, np.ndarray]:
    """Summed Smooth-L1 between targets ``r`` and predictions ``r_hat``.

    Returns the loss and its gradient with respect to ``r_hat``.
    """
    d = np.asarray(r, dtype=float) - np.asarray(r_hat, dtype=float)
    ad = np.abs(d)
    quad = ad < 1.0
    loss = float(np.sum(np.where(quad, 0.5 * d * d, delta * ad - 0.5)))
    # d/d r_hat of the per-element loss
    grad = np.where(quad, -d, -delta * np.sign(d))
    return loss, grad


# ---------------------------------------------------------------------------
# Optimiser
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    learning_rate: float = 2e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def adam_step(state: AdamState, params: list[np.ndarray], grads: list[np.ndarray]) -> None:
    """In-place bias-corrected Adam update of ``params``."""
    if len(params) != len(grads):
        raise ShapeError("params and grads differ in length")
    if not state.m:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != g.shape or p.shape != m.shape:
            raise ShapeError(f"shape mismatch {p.shape} vs {g.shape}")
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        p -= state.learning_rate * (m / c1) / (np.sqrt(v / c2) + state.epsilon)


# ---------------------------------------------------------------------------
# Checkpoints: one JSON header line, then a flat little-endian float64 block.
# ---------------------------------------------------------------------------


def save_checkpoint(path: str | Path, tensors: dict[str, np.ndarray], meta: dict) -> None:
    names = list(tensors)
    header = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "meta": meta,
        "tensors": [{"name": n, "shape": list(tensors[n].shape)} for n in names],
    }
    buf = io.BytesIO()
    buf.write(json.dumps(header, sort_keys=True).encode("utf-8") + b"\n")
    for n in names:
        buf.write(np.ascontiguousarray(tensors[n], dtype="<f8").tobytes())
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    raw = Path(path).read_bytes()
    nl = raw.index(b"\n")
    header = json.loads(raw[:nl].decode("utf-8"))
    if header.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: not a radarbox checkpoint")
    if header.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: checkpoint version {header.get('version')} "
                         f"does not match supported version {CHECKPOINT_VERSION}")
    off = nl + 1
    tensors = {}
    for t in header["tensors"]:
        count = int(np.prod(t["shape"])) if t["shape"] else 1
        arr = np.frombuffer(raw, dtype="<f8", count=count, offset=off).reshape(t["shape"])
        tensors[t["name"]] = arr.astype(float)
        off += 8 * count
    if off != len(raw):
        raise ValueError(f"{path}: trailing bytes in parameter block")
    return tensors, header["meta"]
