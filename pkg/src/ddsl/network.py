"""The dual-decoder Melanoma Recognition Network and its single-path baseline.

Level bookkeeping (``c_i = base * 2**(i-1)``, input H x W):

* encoder stage i: double conv (+ MSC) gives skip ``S_i`` (H/2^(i-1), c_i); max-pool
  gives ``P_i`` (H/2^i, c_i).
* bottleneck ``B``: double conv (+ MSC) on ``P_d`` -> c_{d+1} channels.
* AEP step j (level L = d-j+1):
  ``U_j = up(fuse(concat(A_{j-1}, P_L)))``, ``A_j = DSPA(concat(U_j, S_L))``, ``A_0 = B``.
* OEP step j: ``Q_j = MSC(up(fuse(concat(Q_{j-1}, A_{j-1}, P_L))))``, ``Q_0 = B``.
* heads: aux = sigmoid(conv1(A_d)); main = sigmoid(conv1(concat(Q_d, A_d))).
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import NamedTuple

import numpy as np

from .blocks import DEFAULT_DESCRIPTORS, CascadeMsc, Dspa
from .diffarray import Array4, concat_channels, relu, sigmoid
from .layers import BatchNorm, Conv2d, Module, TransConv2d, maxpool2


@dataclass
class MrnConfig:
    depth: int = 4
    base_channels: int = 16
    in_channels: int = 3
    descriptors: int = DEFAULT_DESCRIPTORS
    msc: bool = True
    side: int = 256
    kind: str = "mrn"  # "mrn" or "baseline"

    def __post_init__(self):
        if self.depth < 1:
            raise ValueError("depth must be >= 1")
        if self.base_channels < 1 or self.in_channels < 1:
            raise ValueError("channel counts must be positive")
        if self.kind not in ("mrn", "baseline"):
            raise ValueError(f"model kind must be 'mrn' or 'baseline', got {self.kind!r}")
        if self.side % (2 ** self.depth):
            raise ValueError(f"side {self.side} is not divisible by 2**depth = {2 ** self.depth}")

    def channels(self, level: int) -> int:
        return self.base_channels * 2 ** (level - 1)

    def to_dict(self) -> dict:
        return asdict(self)


class DualOutput(NamedTuple):
    aux_map: Array4
    main_map: Array4


class Encoded(NamedTuple):
    skips: list[Array4]     # S_1..S_d, pre-pool
    features: list[Array4]  # P_1..P_d, pooled


class DoubleConv(Module):
    """[conv3x3 + BN + ReLU] x 2, optionally followed by a Cascade MSC block."""

    def __init__(self, cin: int, cout: int, rng: np.random.Generator, msc: bool):
        self.conv1 = Conv2d(cin, cout, 3, rng)
        self.bn1 = BatchNorm(cout)
        self.conv2 = Conv2d(cout, cout, 3, rng)
        self.bn2 = BatchNorm(cout)
        if msc:
            self.msc = CascadeMsc(cout, cout, rng)

    def __call__(self, x: Array4) -> Array4:
        x = relu(self.bn1(self.conv1(x)))
        x = relu(self.bn2(self.conv2(x)))
        if hasattr(self, "msc"):
            x = self.msc(x)
        return x


class Encoder(Module):
    def __init__(self, cfg: MrnConfig, rng: np.random.Generator, msc: bool):
        self.stage = []
        cin = cfg.in_channels
        for level in range(1, cfg.depth + 1):
            self.stage.append(DoubleConv(cin, cfg.channels(level), rng, msc))
            cin = cfg.channels(level)

    def __call__(self, x: Array4) -> Encoded:
        skips, feats = [], []
        for block in self.stage:
            s = block(x)
            x = maxpool2(s)
            skips.append(s)
            feats.append(x)
        return Encoded(skips, feats)


class UpStep(Module):
    """1x1 fusion to the level's nominal width, then 2x transposed conv."""

    def __init__(self, cin: int, mid: int, cout: int, rng: np.random.Generator):
        self.fuse = Conv2d(cin, mid, 1, rng)
        self.up = TransConv2d(mid, cout, rng)

    def __call__(self, x: Array4) -> Array4:
        return self.up(self.fuse(x))


class AepStep(UpStep):
    def __init__(self, cin: int, mid: int, cout: int, n_desc: int, rng: np.random.Generator):
        super().__init__(cin, mid, cout, rng)
        self.dspa = Dspa(2 * cout, n_desc, rng)


class OepStep(UpStep):
    def __init__(self, cin: int, mid: int, cout: int, rng: np.random.Generator, msc: bool):
        super().__init__(cin, mid, cout, rng)
        if msc:
            self.msc = CascadeMsc(cout, cout, rng)


class Head(Module):
    def __init__(self, cin: int, rng: np.random.Generator):
        self.conv = Conv2d(cin, 1, 1, rng)

    def __call__(self, x: Array4) -> Array4:
        return sigmoid(self.conv(x))


class Decoder(Module):
    """Container so parameter names read ``aep.step1.fuse.weight``."""

    def __init__(self, steps: list, head: Head):
        self.step = steps
        self.head = head


def _check_input(x: Array4, cfg: MrnConfig) -> None:
    n, c, h, w = x.shape
    if c != cfg.in_channels:
        raise ValueError(f"expected {cfg.in_channels} input channels, got {c}")
    k = 2 ** cfg.depth
    if h % k or w % k:
        raise ValueError(f"input {h}x{w} not divisible by 2**depth = {k}")


class MRN(Module):
    """Dual-decoder segmentation network (auxiliary + original expansive paths)."""

    def __init__(self, cfg: MrnConfig, seed: int = 0):
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        d = cfg.depth
        self.encoder = Encoder(cfg, rng, cfg.msc)
        self.bottleneck = DoubleConv(cfg.channels(d), cfg.channels(d + 1), rng, cfg.msc)

        aep_steps, oep_steps = [], []
        a_ch = q_ch = cfg.channels(d + 1)
        for j in range(1, d + 1):
            level = d - j + 1
            c_l, c_up = cfg.channels(level), cfg.channels(level + 1)
            aep_steps.append(AepStep(a_ch + c_l, c_up, c_l, cfg.descriptors, rng))
            oep_steps.append(OepStep(q_ch + a_ch + c_l, c_up, c_l, rng, cfg.msc))
            a_ch, q_ch = 2 * c_l, c_l
        self.aep = Decoder(aep_steps, Head(a_ch, rng))
        self.oep = Decoder(oep_steps, Head(q_ch + a_ch, rng))

    def encode(self, x: Array4) -> Encoded:
        _check_input(x, self.cfg)
        return self.encoder(x)

    def decode_aep(self, bottom: Array4, enc: Encoded) -> tuple[list[Array4], Array4]:
        """Returns ``[A_0 .. A_d]`` (A_0 is the bottleneck) and the auxiliary map."""
        d = self.cfg.depth
        if len(enc.skips) != d:
            raise ValueError(f"expected {d} skips, got {len(enc.skips)}")
        feats = [bottom]
        a = bottom
        for j, step in enumerate(self.aep.step, start=1):
            level = d - j + 1
            p, s = enc.features[level - 1], enc.skips[level - 1]
            if p.shape[2:] != a.shape[2:]:
                raise ValueError(f"AEP step {j}: skip {p.shape} does not match feature {a.shape}")
            u = step(concat_channels([a, p]))
            a = step.dspa(concat_channels([u, s]))
            feats.append(a)
        return feats, self.aep.head(a)

    def decode_oep(self, bottom: Array4, enc: Encoded, aep_feats: list[Array4]) -> Array4:
        d = self.cfg.depth
        if len(aep_feats) != d + 1 or len(self.oep.step) != d:
            raise ValueError(f"OEP has {len(self.oep.step)} steps but AEP supplied "
                             f"{len(aep_feats) - 1}")
        q = bottom
        for j, step in enumerate(self.oep.step, start=1):
            p = enc.features[d - j]
            q = step(concat_channels([q, aep_feats[j - 1], p]))
            if hasattr(step, "msc"):
                q = step.msc(q)
        return self.oep.head(concat_channels([q, aep_feats[d]]))

    def forward(self, x: Array4) -> DualOutput:
        enc = self.encode(x)
        bottom = self.bottleneck(enc.features[-1])
        feats, aux = self.decode_aep(bottom, enc)
        main = self.decode_oep(bottom, enc, feats)
        return DualOutput(aux, main)

    __call__ = forward


class Baseline(Module):
    """Single-path encoder-decoder: same encoder, plain skip-concat decoder, one head."""

    def __init__(self, cfg: MrnConfig, seed: int = 0):
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        d = cfg.depth
        self.encoder = Encoder(cfg, rng, msc=False)
        self.bottleneck = DoubleConv(cfg.channels(d), cfg.channels(d + 1), rng, msc=False)
        steps = []
        ch = cfg.channels(d + 1)
        for j in range(1, d + 1):
            level = d - j + 1
            c_l = cfg.channels(level)
            steps.append(UpStep(ch + c_l, cfg.channels(level + 1), c_l, rng))
            ch = 2 * c_l
        self.dec = Decoder(steps, Head(ch, rng))

    def forward(self, x: Array4) -> Array4:
        _check_input(x, self.cfg)
        enc = self.encoder(x)
        d = self.cfg.depth
        q = self.bottleneck(enc.features[-1])
        for j, step in enumerate(self.dec.step, start=1):
            level = d - j + 1
            u = step(concat_channels([q, enc.features[level - 1]]))
            q = concat_channels([u, enc.skips[level - 1]])
        return self.dec.head(q)

    __call__ = forward


def build_model(cfg: MrnConfig, seed: int = 0) -> MRN | Baseline:
    return MRN(cfg, seed) if cfg.kind == "mrn" else Baseline(cfg, seed)


def forward_mrn(x: Array4, model: MRN) -> DualOutput:
    return model.forward(x)


def forward_baseline(x: Array4, model: Baseline) -> Array4:
    return model.forward(x)
