"""Straight-line numpy transcription of the network equations.

Shares no code with the package: convolutions go through scipy.signal, the
transposed convolution is a scatter loop, attention is a plain softmax.
Parameters are read from a ``{dotted name: ndarray}`` dict.
"""

import numpy as np
from scipy.signal import correlate


def conv(x, p, name):
    w, b = p[name + ".weight"], p[name + ".bias"]
    k = w.shape[-1]
    r = k // 2
    xp = np.pad(x, ((0, 0), (0, 0), (r, r), (r, r)))
    n, _, h, wd = x.shape
    out = np.zeros((n, w.shape[0], h, wd))
    for i in range(n):
        for o in range(w.shape[0]):
            out[i, o] = correlate(xp[i], w[o], mode="valid")[0]
    return out + b.reshape(1, -1, 1, 1)


def up(x, p, name):
    w, b = p[name + ".weight"], p[name + ".bias"]
    n, c, h, wd = x.shape
    out = np.zeros((n, w.shape[1], 2 * h, 2 * wd))
    for dy in range(2):
        for dx in range(2):
            out[:, :, dy::2, dx::2] = np.einsum("nchw,co->nohw", x, w[:, :, dy, dx])
    return out + b.reshape(1, -1, 1, 1)


def bn(x, p, name, eps=1e-5):
    mu = x.mean(axis=(0, 2, 3), keepdims=True)
    var = x.var(axis=(0, 2, 3), keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * p[name + ".gamma"] + p[name + ".beta"]


def relu(x):
    return np.maximum(x, 0)


def pool(x):
    n, c, h, w = x.shape
    return x.reshape(n, c, h // 2, 2, w // 2, 2).max(axis=(3, 5))


def msc(x, p, name):
    x1 = conv(x, p, name + ".conv5")
    x2 = conv(x + x1, p, name + ".conv3")
    x3 = conv(x + x2, p, name + ".conv1")
    return conv(np.concatenate([x, x1, x2, x3], 1), p, name + ".fuse")


def double(x, p, name, with_msc):
    x = relu(bn(conv(x, p, name + ".conv1"), p, name + ".bn1"))
    x = relu(bn(conv(x, p, name + ".conv2"), p, name + ".bn2"))
    return msc(x, p, name + ".msc") if with_msc else x


def dspa(m, p, name):
    d = p[name + ".descriptors"][:, :, 0, 0]
    logits = np.einsum("ic,nchw->nihw", d, m)
    e = np.exp(logits - logits.max(axis=1, keepdims=True))
    a = e / e.sum(axis=1, keepdims=True)
    return m + np.einsum("nihw,ic->nchw", a, d)


def sigmoid(z):
    return 1 / (1 + np.exp(-z))


def encode(x, p, depth, with_msc):
    skips, pooled = [], []
    for i in range(1, depth + 1):
        s = double(x, p, f"encoder.stage{i}", with_msc)
        x = pool(s)
        skips.append(s)
        pooled.append(x)
    return skips, pooled


def mrn(x, p, depth, with_msc=True):
    """Returns (aux, main, [A_0..A_d])."""
    skips, pooled = encode(x, p, depth, with_msc)
    b = double(pooled[-1], p, "bottleneck", with_msc)
    a_feats = [b]
    a = b
    for j in range(1, depth + 1):
        lvl = depth - j + 1
        u = up(conv(np.concatenate([a, pooled[lvl - 1]], 1), p, f"aep.step{j}.fuse"),
               p, f"aep.step{j}.up")
        a = dspa(np.concatenate([u, skips[lvl - 1]], 1), p, f"aep.step{j}.dspa")
        a_feats.append(a)
    aux = sigmoid(conv(a, p, "aep.head.conv"))
    q = b
    for j in range(1, depth + 1):
        lvl = depth - j + 1
        q = up(conv(np.concatenate([q, a_feats[j - 1], pooled[lvl - 1]], 1), p,
                    f"oep.step{j}.fuse"), p, f"oep.step{j}.up")
        if with_msc:
            q = msc(q, p, f"oep.step{j}.msc")
    main = sigmoid(conv(np.concatenate([q, a_feats[-1]], 1), p, "oep.head.conv"))
    return aux, main, a_feats


def baseline(x, p, depth):
    skips, pooled = encode(x, p, depth, False)
    q = double(pooled[-1], p, "bottleneck", False)
    for j in range(1, depth + 1):
        lvl = depth - j + 1
        u = up(conv(np.concatenate([q, pooled[lvl - 1]], 1), p, f"dec.step{j}.fuse"),
               p, f"dec.step{j}.up")
        q = np.concatenate([u, skips[lvl - 1]], 1)
    return sigmoid(conv(q, p, "dec.head.conv"))


def census(depth, base, n_desc, cin=3, with_msc=True):
    """Parameter count by walking shapes; no model objects involved."""
    def conv_n(i, o, k):
        return o * i * k * k + o

    def msc_n(c):
        return conv_n(c, c, 5) + conv_n(c, c, 3) + conv_n(c, c, 1) + conv_n(4 * c, c, 1)

    def double_n(i, o):
        return conv_n(i, o, 3) + 2 * o + conv_n(o, o, 3) + 2 * o + (msc_n(o) if with_msc else 0)

    ch = [None] + [base * 2 ** (i - 1) for i in range(1, depth + 2)]
    total = 0
    prev = cin
    for i in range(1, depth + 1):
        total += double_n(prev, ch[i])
        prev = ch[i]
    total += double_n(ch[depth], ch[depth + 1])
    a_ch = q_ch = ch[depth + 1]
    for j in range(1, depth + 1):
        lvl = depth - j + 1
        cl, cu = ch[lvl], ch[lvl + 1]
        # AEP: fuse, up, descriptors
        total += conv_n(a_ch + cl, cu, 1) + (cu * cl * 4 + cl) + n_desc * 2 * cl
        # OEP: fuse, up, msc
        total += conv_n(q_ch + a_ch + cl, cu, 1) + (cu * cl * 4 + cl) + (msc_n(cl) if with_msc else 0)
        a_ch, q_ch = 2 * cl, cl
    total += conv_n(a_ch, 1, 1) + conv_n(q_ch + a_ch, 1, 1)
    return total
