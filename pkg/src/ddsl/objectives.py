"""Losses (Dice, BCE, dual composite), overlap metrics and stratified reporting."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Mapping, NamedTuple, Sequence

import numpy as np

from .diffarray import Array4, note_pattern, record, weighted_sum

BCE_CLAMP = 1e-7


@dataclass
class DualLossSpec:
    lam: float = 0.4
    eps: float = 1e-6
    dice_weight: float = 1.0
    bce_weight: float = 1.0

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError(f"lambda must be >= 0, got {self.lam}")
        if self.eps <= 0:
            raise ValueError(f"dice smoothing must be > 0, got {self.eps}")


def _check_target(pred: Array4, target: np.ndarray) -> np.ndarray:
    target = np.asarray(target)
    if target.shape != pred.shape:
        raise ValueError(f"prediction {pred.shape} and target {target.shape} differ in shape")
    if not np.all((target == 0) | (target == 1)):
        raise ValueError("target mask must be binary {0, 1}")
    return target.astype(pred.dtype, copy=False)


def dice_loss(pred: Array4, target, eps: float = 1e-6) -> Array4:
    """Soft Dice loss ``1 - (2Σpt + ε)/(Σp + Σt + ε)``, averaged over the batch."""
    t = _check_target(pred, target)
    p = pred.values
    axes = (1, 2, 3)
    inter = (p * t).sum(axis=axes, dtype=np.float64)
    denom = p.sum(axis=axes, dtype=np.float64) + t.sum(axis=axes, dtype=np.float64) + eps
    num = 2.0 * inter + eps
    n = p.shape[0]
    loss = np.mean(1.0 - num / denom)

    def back(g):
        # d/dp of -(num/denom) per sample, then batch mean
        coef = (-(2.0 * t * denom[:, None, None, None] - num[:, None, None, None])
                / (denom[:, None, None, None] ** 2)) / n
        return ((g.reshape(()) * coef).astype(p.dtype),)

    return record(np.asarray(loss, dtype=p.dtype).reshape(1, 1, 1, 1), (pred,), back,
                  "dice_loss")


def bce_loss(pred: Array4, target) -> Array4:
    """Mean binary cross-entropy with predictions clamped to [δ, 1-δ].

    When ``pred`` came out of :func:`sigmoid` the loss is evaluated from the
    logits (clamped to ±logit(1-δ)); saturated probabilities otherwise lose the
    digits of ``1 - p``.
    """
    t = _check_target(pred, target)
    tt = t.astype(np.float64)
    if pred.logits is not None:
        return _bce_from_logits(pred.logits, tt, pred.dtype)
    p = pred.values.astype(np.float64)
    pc = np.clip(p, BCE_CLAMP, 1 - BCE_CLAMP)
    loss = -np.mean(tt * np.log(pc) + (1 - tt) * np.log(1 - pc))
    inside = (p >= BCE_CLAMP) & (p <= 1 - BCE_CLAMP)
    note_pattern(inside)

    def back(g):
        gp = (-(tt / pc) + (1 - tt) / (1 - pc)) / p.size * inside
        return ((g.reshape(()) * gp).astype(pred.dtype),)

    return record(np.asarray(loss, dtype=pred.dtype).reshape(1, 1, 1, 1), (pred,), back,
                  "bce_loss")


_LOGIT_CLAMP = math.log((1 - BCE_CLAMP) / BCE_CLAMP)


def _bce_from_logits(logits: Array4, tt: np.ndarray, dtype) -> Array4:
    z = logits.values.astype(np.float64)
    zc = np.clip(z, -_LOGIT_CLAMP, _LOGIT_CLAMP)
    # -log σ(z) = softplus(-z), -log(1-σ(z)) = softplus(z)
    loss = np.mean(tt * np.logaddexp(0.0, -zc) + (1 - tt) * np.logaddexp(0.0, zc))
    inside = (z >= -_LOGIT_CLAMP) & (z <= _LOGIT_CLAMP)
    note_pattern(inside)

    def back(g):
        s = 0.5 * (1.0 + np.tanh(0.5 * zc))  # σ(zc), overflow-free
        gz = (s - tt) / z.size * inside
        return ((g.reshape(()) * gz).astype(logits.dtype),)

    return record(np.asarray(loss, dtype=dtype).reshape(1, 1, 1, 1), (logits,), back,
                  "bce_loss")


def segmentation_loss(pred: Array4, target, spec: DualLossSpec) -> Array4:
    """Dice + BCE on one probability map."""
    return weighted_sum([(spec.dice_weight, dice_loss(pred, target, spec.eps)),
                         (spec.bce_weight, bce_loss(pred, target))])


class DualLoss(NamedTuple):
    total: Array4
    aux: Array4
    main: Array4


def dual_loss(out, target, spec: DualLossSpec | None = None) -> DualLoss:
    """``total = λ·L_aux + L_main``; each term is Dice + BCE."""
    spec = spec or DualLossSpec()
    la = segmentation_loss(out.aux_map, target, spec)
    ls = segmentation_loss(out.main_map, target, spec)
    return DualLoss(weighted_sum([(spec.lam, la), (1.0, ls)]), la, ls)


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------

class Metrics(NamedTuple):
    dc: float
    iou: float
    precision: float
    recall: float


def _ratio(num: int, den: int) -> float:
    return num / den if den else 0.0


def metrics(pred, target, threshold: float = 0.5) -> Metrics:
    """Overlap metrics on one mask pair; ``pred`` is binarized at ``threshold``.

    Both empty counts as a perfect correct rejection (all metrics 1).
    """
    p = np.asarray(pred) >= threshold
    t = np.asarray(target) >= 0.5
    if p.shape != t.shape:
        raise ValueError(f"prediction {p.shape} and target {t.shape} differ in shape")
    tp = int(np.count_nonzero(p & t))
    fp = int(np.count_nonzero(p & ~t))
    fn = int(np.count_nonzero(~p & t))
    if tp + fp + fn == 0:
        return Metrics(1.0, 1.0, 1.0, 1.0)
    return Metrics(_ratio(2 * tp, 2 * tp + fp + fn), _ratio(tp, tp + fp + fn),
                   _ratio(tp, tp + fp), _ratio(tp, tp + fn))


def batch_metrics(pred: np.ndarray, target: np.ndarray) -> list[Metrics]:
    return [metrics(pred[i], target[i]) for i in range(pred.shape[0])]


# ---------------------------------------------------------------------------
# Stratified report
# ---------------------------------------------------------------------------

# (row label, metadata field, value or None for "any value present")
GROUPS: tuple[tuple[str, str, str | None], ...] = (
    ("Anatomical Region", "region", None),
    ("Skin Color: Light", "skin_tone", "light"),
    ("Skin Color: Dark", "skin_tone", "dark"),
    ("Gender: Male", "gender", "male"),
    ("Gender: Female", "gender", "female"),
    ("Age Group: 18-30", "age_group", "18-30"),
    ("Age Group: 31-50", "age_group", "31-50"),
    ("Age Group: 51+", "age_group", "51+"),
)
META_FIELDS = ("region", "skin_tone", "gender", "age_group")


class ReportRow(NamedTuple):
    group: str
    model: str
    dc: float
    iou: float
    precision: float
    recall: float
    n_samples: int


@dataclass
class StrataReport:
    rows: list[ReportRow] = field(default_factory=list)
    excluded: int = 0

    def row(self, group: str, model: str) -> ReportRow:
        for r in self.rows:
            if r.group == group and r.model == model:
                return r
        raise KeyError((group, model))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["group", "model", "dc", "iou", "precision", "recall", "n_samples"])
        for r in self.rows:
            w.writerow([r.group, r.model, *(f"{v:.4f}" for v in r[2:6]), r.n_samples])
        return buf.getvalue()

    def to_text(self) -> str:
        lines = [" | ".join(["group", "model", "dc", "iou", "precision", "recall",
                             "n_samples"])]
        for r in self.rows:
            lines.append(" | ".join([r.group, r.model, *(f"{v:.4f}" for v in r[2:6]),
                                     str(r.n_samples)]))
        lines.append(f"excluded: {self.excluded}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_csv(cls, text: str) -> "StrataReport":
        rows = []
        for rec in csv.DictReader(io.StringIO(text)):
            rows.append(ReportRow(rec["group"], rec["model"], float(rec["dc"]),
                                  float(rec["iou"]), float(rec["precision"]),
                                  float(rec["recall"]), int(rec["n_samples"])))
        return cls(rows)


def stratified_report(metas: Sequence[Mapping[str, str]],
                      per_model: Mapping[str, Sequence[Metrics]]) -> StrataReport:
    """Group-mean metrics per (group, model) in the fixed report row order.

    ``metas[i]`` describes sample i; ``per_model[name][i]`` is its metrics under
    that model.  Samples missing any metadata field are excluded and counted.
    """
    keep = [i for i, m in enumerate(metas) if all(m.get(f) for f in META_FIELDS)]
    report = StrataReport(excluded=len(metas) - len(keep))
    for name, mets in per_model.items():
        if len(mets) != len(metas):
            raise ValueError(f"model {name!r}: {len(mets)} metric rows for {len(metas)} samples")
    for label, key, value in GROUPS:
        idx = [i for i in keep if value is None or metas[i][key] == value]
        for name, mets in per_model.items():
            if idx:
                means = np.mean([mets[i] for i in idx], axis=0)
            else:
                means = [math.nan] * 4
            report.rows.append(ReportRow(label, name, *map(float, means), len(idx)))
    return report
