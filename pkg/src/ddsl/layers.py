"""Learnable layer primitives: same-padding conv, 2x2 transposed conv, max-pool,
batch norm, plus the small module/parameter-store plumbing they share."""

from __future__ import annotations

from collections import OrderedDict
from typing import Iterator

import numpy as np

from .diffarray import Array4, default_dtype, note_pattern, record

BN_MOMENTUM = 0.1
BN_EPS = 1e-5


class ParamStore(OrderedDict):
    """Ordered ``name -> Array4`` mapping of learnable arrays."""

    def shapes(self) -> dict[str, tuple[int, ...]]:
        return {k: v.shape for k, v in self.items()}

    def count(self) -> int:
        return int(sum(v.values.size for v in self.values()))

    def zero_grad(self) -> None:
        for p in self.values():
            p.zero_grad()


class Module:
    """Base class: discovers parameters, buffers and child modules from attributes.

    Children may be stored directly or in lists; discovery follows attribute
    insertion order so names are stable (``encoder.stage1.conv1.weight``).
    """

    training = True

    def _children(self) -> Iterator[tuple[str, object]]:
        for key, val in vars(self).items():
            if isinstance(val, (Array4, Module)):
                yield key, val
            elif isinstance(val, list) and val and isinstance(val[0], Module):
                for i, child in enumerate(val, start=1):
                    yield f"{key}{i}", child

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Array4]]:
        for key, val in self._children():
            if isinstance(val, Array4) and val.requires_grad:
                yield prefix + key, val
            elif isinstance(val, Module):
                yield from val.named_parameters(f"{prefix}{key}.")

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for key, val in self._children():
            if isinstance(val, Module):
                yield from val.named_buffers(f"{prefix}{key}.")
        for key, val in self._buffers().items():
            yield prefix + key, val

    def _buffers(self) -> dict[str, np.ndarray]:
        return {}

    def modules(self) -> Iterator["Module"]:
        yield self
        for _, val in self._children():
            if isinstance(val, Module):
                yield from val.modules()

    def params(self) -> ParamStore:
        return ParamStore(self.named_parameters())

    def train(self) -> "Module":
        for m in self.modules():
            m.training = True
        return self

    def eval(self) -> "Module":
        for m in self.modules():
            m.training = False
        return self


def _he_normal(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(default_dtype())


def _check_channels(x: Array4, expected: int, what: str) -> None:
    if x.shape[1] != expected:
        raise ValueError(f"{what}: expected {expected} input channels, got {x.shape[1]} "
                         f"(input shape {x.shape})")


# ---------------------------------------------------------------------------
# Convolution
# ---------------------------------------------------------------------------

def _im2col(x: np.ndarray, k: int) -> np.ndarray:
    """Columns laid out (c, k, k, n, h, w) for same-padding stride-1 windows."""
    n, c, h, w = x.shape
    p = k // 2
    xt = x.transpose(1, 0, 2, 3)
    cols = np.zeros((c, k, k, n, h, w), dtype=x.dtype)
    for i in range(k):
        di = i - p
        for j in range(k):
            dj = j - p
            cols[:, i, j, :, max(0, -di):h - max(0, di), max(0, -dj):w - max(0, dj)] = \
                xt[:, :, max(0, di):h - max(0, -di), max(0, dj):w - max(0, -dj)]
    return cols.reshape(c * k * k, n * h * w)


def _conv_same(x: np.ndarray, w: np.ndarray, cols: np.ndarray | None = None) -> np.ndarray:
    """Stride-1 same-padding cross-correlation, (n,c,h,w) * (o,c,k,k) -> (n,o,h,w)."""
    n, c, h, wd = x.shape
    o, k = w.shape[0], w.shape[-1]
    if k == 1:
        out = w.reshape(o, c) @ x.transpose(1, 0, 2, 3).reshape(c, -1)
    else:
        if cols is None:
            cols = _im2col(x, k)
        out = w.reshape(o, -1) @ cols
    return np.ascontiguousarray(out.reshape(o, n, h, wd).transpose(1, 0, 2, 3))


def _conv_same_weight_grad(x: np.ndarray, g: np.ndarray, k: int,
                           cols: np.ndarray | None = None) -> np.ndarray:
    n, c, h, w = x.shape
    o = g.shape[1]
    g2 = g.transpose(1, 0, 2, 3).reshape(o, -1)
    if k == 1:
        return (g2 @ x.transpose(1, 0, 2, 3).reshape(c, -1).T).reshape(o, c, 1, 1)
    if cols is None:
        cols = _im2col(x, k)
    return (g2 @ cols.T).reshape(o, c, k, k)


def conv2d(x: Array4, weight: Array4, bias: Array4 | None = None) -> Array4:
    """Stride-1 convolution with ``⌊k/2⌋`` zero padding; ``weight`` is (out, in, k, k)."""
    o, c, k, k2 = weight.shape
    if k != k2 or k % 2 == 0:
        raise ValueError(f"conv2d needs an odd square kernel, got {weight.shape}")
    _check_channels(x, c, "conv2d")
    xv, wv = x.values, weight.values
    cols = _im2col(xv, k) if k > 1 else None
    out = _conv_same(xv, wv, cols)
    inputs: tuple[Array4, ...] = (x, weight)
    if bias is not None:
        out = out + bias.values
        inputs = (x, weight, bias)

    def back(g):
        gx = _conv_same(g, wv[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)) if x.requires_grad else None
        gw = _conv_same_weight_grad(xv, g, k, cols) if weight.requires_grad else None
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3)).reshape(bias.shape)

    return record(out, inputs, back, f"conv2d {k}x{k}")


class Conv2d(Module):
    """Same-padding convolution with kernel 1, 3 or 5."""

    def __init__(self, in_channels: int, out_channels: int, kernel: int,
                 rng: np.random.Generator):
        if kernel not in (1, 3, 5):
            raise ValueError(f"kernel must be 1, 3 or 5, got {kernel}")
        self.in_channels, self.out_channels, self.kernel = in_channels, out_channels, kernel
        fan_in = in_channels * kernel * kernel
        self.weight = Array4(_he_normal(rng, (out_channels, in_channels, kernel, kernel), fan_in),
                             requires_grad=True)
        self.bias = Array4(np.zeros((1, out_channels, 1, 1), default_dtype()), requires_grad=True)

    def __call__(self, x: Array4) -> Array4:
        return conv2d(x, self.weight, self.bias)


# ---------------------------------------------------------------------------
# Transposed convolution, kernel 2 stride 2
# ---------------------------------------------------------------------------

def transconv2d(x: Array4, weight: Array4, bias: Array4 | None = None) -> Array4:
    """Kernel-2 stride-2 transposed convolution; ``weight`` is (in, out, 2, 2).

    ``out[n, o, 2i+a, 2j+b] = Σ_c x[n, c, i, j] · weight[c, o, a, b] + bias[o]``.
    """
    c, o, ka, kb = weight.shape
    if (ka, kb) != (2, 2):
        raise ValueError(f"transconv2d kernel must be 2x2, got {weight.shape}")
    _check_channels(x, c, "transconv2d")
    n, _, h, w = x.shape
    xv, wv = x.values, weight.values
    out = np.tensordot(xv, wv, axes=([1], [0]))  # n,h,w,o,a,b
    out = np.ascontiguousarray(out.transpose(0, 3, 1, 4, 2, 5)).reshape(n, o, 2 * h, 2 * w)
    inputs: tuple[Array4, ...] = (x, weight)
    if bias is not None:
        out = out + bias.values
        inputs = (x, weight, bias)

    def back(g):
        g6 = g.reshape(n, o, h, 2, w, 2)
        gx = (np.tensordot(g6, wv, axes=([1, 3, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
              if x.requires_grad else None)
        gw = (np.tensordot(xv, g6, axes=([0, 2, 3], [0, 2, 4])) if weight.requires_grad
              else None)  # c,o,a,b
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3)).reshape(bias.shape)

    return record(out, inputs, back, "transconv2d")


class TransConv2d(Module):
    def __init__(self, in_channels: int, out_channels: int, rng: np.random.Generator):
        self.in_channels, self.out_channels = in_channels, out_channels
        self.weight = Array4(_he_normal(rng, (in_channels, out_channels, 2, 2), in_channels * 4),
                             requires_grad=True)
        self.bias = Array4(np.zeros((1, out_channels, 1, 1), default_dtype()), requires_grad=True)

    def __call__(self, x: Array4) -> Array4:
        return transconv2d(x, self.weight, self.bias)


# ---------------------------------------------------------------------------
# Pooling
# ---------------------------------------------------------------------------

def maxpool2(x: Array4) -> Array4:
    """2x2 max-pool, stride 2.  Gradient goes to the first maximum in row-major order."""
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ValueError(f"maxpool2 needs even spatial dims, got {h}x{w}")
    win = x.values.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
    win = win.reshape(n, c, h // 2, w // 2, 4)
    idx = win.argmax(axis=-1)  # first occurrence on ties
    note_pattern(idx)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]

    def back(g):
        onehot = (np.arange(4) == idx[..., None]) * g[..., None]
        gx = onehot.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
        return (gx.reshape(n, c, h, w).astype(x.dtype, copy=False),)

    return record(np.ascontiguousarray(out), (x,), back, "maxpool2")


# ---------------------------------------------------------------------------
# Batch normalization
# ---------------------------------------------------------------------------

class BatchNorm(Module):
    """Per-channel batch normalization with running statistics."""

    def __init__(self, channels: int, momentum: float = BN_MOMENTUM, eps: float = BN_EPS):
        self.channels = channels
        self.momentum, self.eps = momentum, eps
        dt = default_dtype()
        self.gamma = Array4(np.ones((1, channels, 1, 1), dt), requires_grad=True)
        self.beta = Array4(np.zeros((1, channels, 1, 1), dt), requires_grad=True)
        self.running_mean = np.zeros(channels, dt)
        self.running_var = np.ones(channels, dt)
        self.stats_ready = False

    def _buffers(self) -> dict[str, np.ndarray]:
        return {"running_mean": self.running_mean, "running_var": self.running_var}

    def load_buffers(self, mean: np.ndarray, var: np.ndarray) -> None:
        self.running_mean = np.array(mean, dtype=self.running_mean.dtype)
        self.running_var = np.array(var, dtype=self.running_var.dtype)
        self.stats_ready = True

    def __call__(self, x: Array4) -> Array4:
        return batchnorm(x, self)


def batchnorm(x: Array4, state: BatchNorm) -> Array4:
    _check_channels(x, state.channels, "batchnorm")
    gamma, beta = state.gamma, state.beta
    gv, bv = gamma.values, beta.values
    xv = x.values
    if not state.training:
        if not state.stats_ready:
            raise RuntimeError("batchnorm in eval mode before running statistics exist")
        inv = 1.0 / np.sqrt(state.running_var + state.eps)
        xhat = (xv - state.running_mean[None, :, None, None]) * inv[None, :, None, None]
        xhat = xhat.astype(xv.dtype, copy=False)

        def back_eval(g):
            return (g * gv * inv[None, :, None, None].astype(xv.dtype),
                    (g * xhat).sum(axis=(0, 2, 3)).reshape(gv.shape),
                    g.sum(axis=(0, 2, 3)).reshape(bv.shape))

        return record(xhat * gv + bv, (x, gamma, beta), back_eval, "batchnorm(eval)")

    m = xv.shape[0] * xv.shape[2] * xv.shape[3]
    mean = xv.mean(axis=(0, 2, 3), keepdims=True)
    centered = xv - mean
    var = (centered * centered).mean(axis=(0, 2, 3), keepdims=True)
    inv = 1.0 / np.sqrt(var + state.eps)
    xhat = centered * inv

    mom = state.momentum
    unbiased = var.reshape(-1) * (m / max(m - 1, 1))
    state.running_mean = ((1 - mom) * state.running_mean + mom * mean.reshape(-1)).astype(
        state.running_mean.dtype)
    state.running_var = ((1 - mom) * state.running_var + mom * unbiased).astype(
        state.running_var.dtype)
    state.stats_ready = True

    def back(g):
        gg = g * gv
        gx = inv * (gg - gg.mean(axis=(0, 2, 3), keepdims=True)
                    - xhat * (gg * xhat).mean(axis=(0, 2, 3), keepdims=True))
        return (gx, (g * xhat).sum(axis=(0, 2, 3)).reshape(gv.shape),
                g.sum(axis=(0, 2, 3)).reshape(bv.shape))

    return record(xhat * gv + bv, (x, gamma, beta), back, "batchnorm")
