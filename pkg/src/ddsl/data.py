"""Samples, synthetic lesion generation, stratified splits, augmentation,
normalization and on-disk (PNG + CSV) dataset I/O."""

from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image
from scipy import ndimage

REGIONS = ("head_neck", "trunk", "upper_limb", "lower_limb")
SKIN_TONES = ("light", "dark")
GENDERS = ("male", "female")
AGE_GROUPS = ("18-30", "31-50", "51+")
VOCAB = {"region": REGIONS, "skin_tone": SKIN_TONES, "gender": GENDERS,
         "age_group": AGE_GROUPS}
STRATA = ("skin_tone", "gender", "age_group")

VAR_FLOOR = 1e-6


def derive_seed(root: int, *labels) -> int:
    """Stable 63-bit seed from a root seed and any labels (epoch, sample id, ...)."""
    h = hashlib.sha256(repr((int(root),) + tuple(str(x) for x in labels)).encode())
    return int.from_bytes(h.digest()[:8], "little") >> 1


@dataclass
class Sample:
    image: np.ndarray  # (3, H, W) float32 in [0, 1]
    mask: np.ndarray   # (1, H, W) float32 in {0, 1}
    meta: dict
    id: str

    def __post_init__(self):
        if self.image.ndim != 3 or self.mask.ndim != 3 or self.mask.shape[0] != 1:
            raise ValueError(f"bad sample shapes image={self.image.shape} mask={self.mask.shape}")
        if self.image.shape[1:] != self.mask.shape[1:]:
            raise ValueError("image and mask are not spatially aligned")
        if not np.all((self.mask == 0) | (self.mask == 1)):
            raise ValueError(f"sample {self.id}: mask is not binary")
        for key, vocab in VOCAB.items():
            val = self.meta.get(key)
            if val is not None and val not in vocab:
                raise ValueError(f"sample {self.id}: {key}={val!r} not in {vocab}")


# ---------------------------------------------------------------------------
# Synthetic dermoscopy-like data
# ---------------------------------------------------------------------------

_SKIN_BASE = {"light": np.array([0.86, 0.69, 0.58]), "dark": np.array([0.47, 0.32, 0.24])}
_LESION_TINT = np.array([0.42, 0.27, 0.20])


def value_noise(rng: np.random.Generator, side: int, octaves: int = 4) -> np.ndarray:
    """Smooth multi-octave noise in roughly [-1, 1] (cubic-upsampled lattices)."""
    out = np.zeros((side, side))
    amp, total = 1.0, 0.0
    cells = 4
    for _ in range(octaves):
        grid = rng.uniform(-1, 1, (cells + 1, cells + 1))
        up = ndimage.zoom(grid, side / (cells + 1), order=3, mode="reflect")[:side, :side]
        out += amp * up
        total += amp
        amp *= 0.5
        cells *= 2
    return out / total


def _lesion_mask(rng: np.random.Generator, side: int) -> np.ndarray:
    yy, xx = np.mgrid[0:side, 0:side] + 0.5
    while True:
        area = rng.uniform(0.03, 0.28) * side * side
        r0 = np.sqrt(area / np.pi)
        aspect = rng.uniform(0.65, 1.0)
        cy, cx = rng.uniform(0.3 * side, 0.7 * side, 2)
        theta = rng.uniform(0, np.pi)
        dy, dx = yy - cy, xx - cx
        u = dx * np.cos(theta) + dy * np.sin(theta)
        v = (-dx * np.sin(theta) + dy * np.cos(theta)) / aspect
        ang = np.arctan2(v, u)
        radius = np.ones_like(ang)
        for k in (2, 3, 5):
            radius += rng.uniform(0, 0.12) * np.cos(k * ang + rng.uniform(0, 2 * np.pi))
        mask = np.hypot(u, v) <= r0 * radius
        frac = mask.mean()
        if 0.01 <= frac <= 0.40:
            return mask


def synth_sample(rng: np.random.Generator, side: int, sid: str) -> Sample:
    meta = {key: str(rng.choice(vocab)) for key, vocab in VOCAB.items()}
    base = _SKIN_BASE[meta["skin_tone"]] * rng.uniform(0.92, 1.06, 3)
    texture = value_noise(rng, side)
    img = base[:, None, None] * (1.0 + 0.08 * texture[None])
    mask = _lesion_mask(rng, side)
    darkness = rng.uniform(0.45, 0.7)
    lesion_tex = value_noise(rng, side, octaves=3)
    lesion = (_LESION_TINT * darkness / 0.6)[:, None, None] * (1.0 + 0.15 * lesion_tex[None])
    lesion = np.minimum(lesion, img * 0.8)
    soft = ndimage.gaussian_filter(mask.astype(float), 0.7)
    img = img * (1 - soft) + lesion * soft
    img = img + rng.normal(0, 0.015, img.shape)
    img = np.clip(img, 0.0, 1.0).astype(np.float32)
    return Sample(img, mask[None].astype(np.float32), meta, sid)


def synth_dataset(n: int, side: int, seed: int) -> list[Sample]:
    """``n`` synthetic skin images with one darker lesion each; deterministic in ``seed``."""
    if n < 1:
        raise ValueError("n must be >= 1")
    if side % 16:
        raise ValueError(f"side must be divisible by 16, got {side}")
    return [synth_sample(np.random.default_rng(derive_seed(seed, "synth", i)), side,
                         f"s{i:05d}") for i in range(n)]


# ---------------------------------------------------------------------------
# Stratified split
# ---------------------------------------------------------------------------

def _round_half_up(x: float) -> int:
    return int(np.floor(x + 0.5))


def split_stratified(samples: Sequence[Sample], train_frac: float = 0.7,
                     seed: int = 0) -> tuple[list[Sample], list[Sample]]:
    """Per (skin_tone, gender, age_group) cell, round-half-up ``train_frac`` to train."""
    if not samples:
        raise ValueError("cannot split an empty sample list")
    cells: dict[tuple, list[Sample]] = {}
    for s in samples:
        cells.setdefault(tuple(s.meta.get(k) for k in STRATA), []).append(s)
    train_ids = set()
    for key in sorted(cells, key=lambda k: tuple(str(v) for v in k)):
        members = sorted(cells[key], key=lambda s: s.id)
        rng = np.random.default_rng(derive_seed(seed, "split", *key))
        order = rng.permutation(len(members))
        n_train = _round_half_up(train_frac * len(members))
        train_ids.update(members[i].id for i in order[:n_train])
    train = [s for s in samples if s.id in train_ids]
    test = [s for s in samples if s.id not in train_ids]
    return train, test


# ---------------------------------------------------------------------------
# Augmentation
# ---------------------------------------------------------------------------

@dataclass
class AugmentSpec:
    hflip_p: float = 0.5
    vflip_p: float = 0.5
    rotation_deg: float = 30.0
    scale_frac: float = 0.15
    brightness: float = 0.1
    contrast: float = 0.1
    elastic_alpha: float = 10.0
    elastic_sigma: float = 4.0
    enabled: bool = True

    @classmethod
    def identity(cls) -> "AugmentSpec":
        return cls(0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 4.0)

    def to_dict(self) -> dict:
        return asdict(self)


def _warp(arr: np.ndarray, coords: np.ndarray) -> np.ndarray:
    """Bilinear resample of each channel of (C, H, W) at ``coords`` (2, H, W)."""
    return np.stack([ndimage.map_coordinates(ch, coords, order=1, mode="constant", cval=0.0)
                     for ch in arr]).astype(arr.dtype, copy=False)


def _warp_image(img: np.ndarray, coords: np.ndarray) -> np.ndarray:
    # pad with the mean border colour so rotated corners look like skin
    fill = img[:, [0, -1], :].mean(axis=(1, 2))
    return (_warp(img - fill[:, None, None], coords) + fill[:, None, None]).astype(img.dtype)


def affine_points(points: np.ndarray, side_h: int, side_w: int, angle_deg: float,
                  scale: float) -> np.ndarray:
    """Source positions of output ``points`` (2, ...) for a rotation by ``angle_deg``
    (counter-clockwise as displayed, rows pointing down) and a zoom by ``scale``
    about the image centre."""
    cy, cx = (side_h - 1) / 2, (side_w - 1) / 2
    t = np.deg2rad(angle_deg)
    dy, dx = (points[0] - cy) / scale, (points[1] - cx) / scale
    # inverse map: output (x, y_up) rotated by -t gives the source point
    sx = cx + dx * np.cos(t) - dy * np.sin(t)
    sy = cy + dx * np.sin(t) + dy * np.cos(t)
    return np.stack([sy, sx])


def affine_coords(side_h: int, side_w: int, angle_deg: float, scale: float) -> np.ndarray:
    grid = np.mgrid[0:side_h, 0:side_w].astype(float)
    return affine_points(grid, side_h, side_w, angle_deg, scale)


def rotate_point(y: float, x: float, side_h: int, side_w: int, angle_deg: float,
                 scale: float = 1.0) -> tuple[float, float]:
    """Where pixel (y, x) lands under :func:`affine_coords` with the same arguments."""
    cy, cx = (side_h - 1) / 2, (side_w - 1) / 2
    t = np.deg2rad(angle_deg)
    dy, dx = y - cy, x - cx
    ox = dx * np.cos(t) + dy * np.sin(t)
    oy = -dx * np.sin(t) + dy * np.cos(t)
    return cy + scale * oy, cx + scale * ox


def elastic_coords(rng: np.random.Generator, h: int, w: int, alpha: float,
                   sigma: float) -> np.ndarray:
    dy = ndimage.gaussian_filter(rng.uniform(-1, 1, (h, w)), sigma) * alpha
    dx = ndimage.gaussian_filter(rng.uniform(-1, 1, (h, w)), sigma) * alpha
    # rescale so alpha is roughly the peak displacement in pixels
    peak = max(np.abs(dy).max(), np.abs(dx).max(), 1e-12)
    dy, dx = dy * (alpha / peak), dx * (alpha / peak)
    yy, xx = np.mgrid[0:h, 0:w].astype(float)
    return np.stack([yy + dy, xx + dx])


def _geometric(img: np.ndarray, mask: np.ndarray, coords: np.ndarray):
    m = _warp(mask, coords)
    return _warp_image(img, coords), (m >= 0.5).astype(mask.dtype)


def augment(sample: Sample, spec: AugmentSpec, rng: np.random.Generator) -> Sample:
    """Flips, rotation, scale, brightness/contrast jitter, elastic warp, in that order.

    Rotation, scale and the elastic field are composed into one coordinate map and
    resampled once, identically for image and mask; the mask is re-binarized at 0.5.
    Jitter is pointwise affine in intensity, so applying it after the resample
    is equivalent up to border fill.  Steps whose range or probability is zero are
    skipped, so :meth:`AugmentSpec.identity` returns the input unchanged.
    """
    img, mask = sample.image, sample.mask
    if not spec.enabled:
        return sample
    _, h, w = img.shape
    if spec.hflip_p > 0 and rng.random() < spec.hflip_p:
        img, mask = img[:, :, ::-1], mask[:, :, ::-1]
    if spec.vflip_p > 0 and rng.random() < spec.vflip_p:
        img, mask = img[:, ::-1, :], mask[:, ::-1, :]
    angle = rng.uniform(-spec.rotation_deg, spec.rotation_deg) if spec.rotation_deg > 0 else 0.0
    zoom = rng.uniform(1 - spec.scale_frac, 1 + spec.scale_frac) if spec.scale_frac > 0 else 1.0
    b = rng.uniform(-spec.brightness, spec.brightness) if spec.brightness > 0 else 0.0
    c = rng.uniform(1 - spec.contrast, 1 + spec.contrast) if spec.contrast > 0 else 1.0
    points = None
    if spec.elastic_alpha > 0:
        points = elastic_coords(rng, h, w, spec.elastic_alpha, spec.elastic_sigma)
    if angle != 0.0 or zoom != 1.0 or points is not None:
        if points is None:
            points = np.mgrid[0:h, 0:w].astype(float)
        # output -> elastic source -> pre-scale -> pre-rotation
        points = affine_points(points, h, w, 0.0, zoom)
        points = affine_points(points, h, w, angle, 1.0)
        img, mask = _geometric(img, mask, points)
    if b != 0.0 or c != 1.0:
        mu = img.mean(axis=(1, 2), keepdims=True)
        img = np.clip((img - mu) * c + mu + b, 0.0, 1.0).astype(sample.image.dtype)
    return Sample(np.ascontiguousarray(img), np.ascontiguousarray(mask), sample.meta, sample.id)


# ---------------------------------------------------------------------------
# Normalization
# ---------------------------------------------------------------------------

@dataclass
class NormStats:
    mean: list = field(default_factory=lambda: [0.0, 0.0, 0.0])
    std: list = field(default_factory=lambda: [1.0, 1.0, 1.0])

    @classmethod
    def fit(cls, images: Sequence[np.ndarray]) -> "NormStats":
        stack = np.stack([np.asarray(im, dtype=np.float64) for im in images])
        mean = stack.mean(axis=(0, 2, 3))
        var = stack.var(axis=(0, 2, 3))
        std = np.sqrt(np.maximum(var, VAR_FLOOR))
        return cls([float(v) for v in mean], [float(v) for v in std])

    def normalize(self, image: np.ndarray) -> np.ndarray:
        m = np.asarray(self.mean)[:, None, None]
        s = np.asarray(self.std)[:, None, None]
        return (image - m) / s

    def denormalize(self, image: np.ndarray) -> np.ndarray:
        m = np.asarray(self.mean)[:, None, None]
        s = np.asarray(self.std)[:, None, None]
        return image * s + m

    def to_json(self) -> str:
        return json.dumps({"mean": self.mean, "std": self.std})

    @classmethod
    def from_json(cls, text: str) -> "NormStats":
        d = json.loads(text)
        return cls([float(v) for v in d["mean"]], [float(v) for v in d["std"]])

    def save(self, path) -> None:
        Path(path).write_text(self.to_json() + "\n")

    @classmethod
    def load(cls, path) -> "NormStats":
        return cls.from_json(Path(path).read_text())


def normalize(image: np.ndarray, stats: NormStats) -> np.ndarray:
    return stats.normalize(image)


def stack_batch(samples: Sequence[Sample], stats: NormStats, dtype=np.float32):
    x = np.stack([stats.normalize(s.image) for s in samples]).astype(dtype)
    y = np.stack([s.mask for s in samples]).astype(dtype)
    return x, y


# ---------------------------------------------------------------------------
# On-disk format: <id>.png + <id>_mask.png + metadata.csv
# ---------------------------------------------------------------------------

META_HEADER = ["id", "region", "skin_tone", "gender", "age_group"]


def save_dataset(samples: Sequence[Sample], root) -> None:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    for s in samples:
        rgb = np.round(s.image.transpose(1, 2, 0) * 255).astype(np.uint8)
        Image.fromarray(rgb, "RGB").save(root / f"{s.id}.png", optimize=False)
        m = (s.mask[0] * 255).astype(np.uint8)
        Image.fromarray(m, "L").save(root / f"{s.id}_mask.png", optimize=False)
    with open(root / "metadata.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(META_HEADER)
        for s in samples:
            w.writerow([s.id] + [s.meta.get(k, "") for k in META_HEADER[1:]])


def read_image(path, side: int | None = None) -> np.ndarray:
    """RGB PNG/JPEG -> (3, H, W) float32 in [0, 1], optionally resized to side x side."""
    with Image.open(path) as im:
        im = im.convert("RGB")
        if side is not None and im.size != (side, side):
            im = im.resize((side, side), Image.BILINEAR)
        return (np.asarray(im, dtype=np.float32) / 255.0).transpose(2, 0, 1).copy()


def read_mask(path, side: int | None = None) -> np.ndarray:
    with Image.open(path) as im:
        im = im.convert("L")
        if side is not None and im.size != (side, side):
            im = im.resize((side, side), Image.NEAREST)
        return (np.asarray(im) >= 128).astype(np.float32)[None]


def load_dataset(root, side: int | None = None) -> list[Sample]:
    root = Path(root)
    samples = []
    with open(root / "metadata.csv", newline="") as fh:
        for rec in csv.DictReader(fh):
            sid = rec["id"]
            meta = {k: rec[k] for k in META_HEADER[1:] if rec.get(k)}
            samples.append(Sample(read_image(root / f"{sid}.png", side),
                                  read_mask(root / f"{sid}_mask.png", side), meta, sid))
    return samples
