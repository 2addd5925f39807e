"""Dense Spatial Position Attention and Cascade Multi-Scale Convolution."""

from __future__ import annotations

import numpy as np

from .diffarray import Array4, add, concat_channels, default_dtype, record
from .layers import Conv2d, Module

DEFAULT_DESCRIPTORS = 64
DESCRIPTOR_INIT_STD = 0.02


def attention_weights(m: np.ndarray, descriptors: np.ndarray) -> np.ndarray:
    """Softmax over descriptors of ``D_i · M_j`` at every (n, h, w) site.

    ``m`` is (n, C, h, w), ``descriptors`` is (N, C); result is (n, N, h, w).
    """
    n, c, h, w = m.shape
    logits = (descriptors @ m.reshape(n, c, h * w)).reshape(n, -1, h, w)
    logits -= logits.max(axis=1, keepdims=True)
    e = np.exp(logits)
    return e / e.sum(axis=1, keepdims=True)


def dspa_attend(m: Array4, descriptors: Array4) -> Array4:
    """``O_j = Σ_i a_{j,i} D_i + M_j`` with ``a_{j,·} = softmax_i(D_i · M_j)``.

    ``descriptors`` is stored as an (N, C, 1, 1) array.
    """
    n_desc, c = descriptors.shape[:2]
    if m.shape[1] != c:
        raise ValueError(f"dspa_attend: input has {m.shape[1]} channels but descriptors "
                         f"have dimension {c}")
    mv = m.values
    n, _, h, w = mv.shape
    d = descriptors.values[:, :, 0, 0]
    a = attention_weights(mv, d).reshape(n, n_desc, h * w)
    m3 = mv.reshape(n, c, h * w)
    out = (d.T @ a).reshape(mv.shape) + mv

    def back(g):
        g3 = g.reshape(n, c, h * w)
        ga = d @ g3
        glog = a * (ga - (a * ga).sum(axis=1, keepdims=True))
        gm = g + (d.T @ glog).reshape(mv.shape)
        gd = (a @ g3.transpose(0, 2, 1)).sum(axis=0) + (glog @ m3.transpose(0, 2, 1)).sum(axis=0)
        return gm, gd.reshape(descriptors.shape).astype(descriptors.dtype, copy=False)

    return record(out.astype(mv.dtype, copy=False), (m, descriptors), back, "dspa_attend")


class Dspa(Module):
    """Learnable position descriptors; each instance owns its own set."""

    def __init__(self, channels: int, n_descriptors: int, rng: np.random.Generator):
        if n_descriptors < 1:
            raise ValueError("DSPA needs at least one descriptor")
        self.channels, self.n_descriptors = channels, n_descriptors
        init = rng.standard_normal((n_descriptors, channels, 1, 1)) * DESCRIPTOR_INIT_STD
        self.descriptors = Array4(init.astype(default_dtype()), requires_grad=True)

    def __call__(self, m: Array4) -> Array4:
        return dspa_attend(m, self.descriptors)

    def weights(self, m: Array4) -> np.ndarray:
        return attention_weights(m.values, self.descriptors.values[:, :, 0, 0])


class CascadeMsc(Module):
    """5x5 -> 3x3 -> 1x1 cascade with cumulative residual sums and 1x1 fusion.

        X1 = conv5(X); X2 = conv3(X + X1); X3 = conv1(X + X2)
        Y  = fuse(concat(X, X1, X2, X3))
    """

    def __init__(self, channels: int, out_channels: int, rng: np.random.Generator):
        self.channels, self.out_channels = channels, out_channels
        self.conv5 = Conv2d(channels, channels, 5, rng)
        self.conv3 = Conv2d(channels, channels, 3, rng)
        self.conv1 = Conv2d(channels, channels, 1, rng)
        self.fuse = Conv2d(4 * channels, out_channels, 1, rng)

    def __call__(self, x: Array4) -> Array4:
        return cascade_msc(x, self)


def cascade_msc(x: Array4, state: CascadeMsc) -> Array4:
    if x.shape[1] != state.channels:
        raise ValueError(f"cascade_msc: expected {state.channels} channels, got {x.shape[1]}")
    x1 = state.conv5(x)
    x2 = state.conv3(add(x, x1))
    x3 = state.conv1(add(x, x2))
    return state.fuse(concat_channels([x, x1, x2, x3]))
