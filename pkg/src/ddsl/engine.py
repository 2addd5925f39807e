"""Training: Adam, plateau LR halving with early stopping, checkpoints, gradcheck."""

from __future__ import annotations

import csv
import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, NamedTuple, Sequence

import numpy as np

from .data import AugmentSpec, NormStats, Sample, augment, derive_seed, stack_batch
from .diffarray import Array4, Tape, no_record, precision, record_patterns
from .layers import BatchNorm, Module, ParamStore
from .network import MRN, Baseline, DualOutput, MrnConfig, build_model
from .objectives import DualLossSpec, dual_loss, metrics, segmentation_loss

log = logging.getLogger(__name__)

MAGIC = b"MRN1"
FORMAT_VERSION = 1
MAX_EPOCHS = 150
OVERFIT_MAX_EPOCHS = 300  # trainability check only; never used for real runs


@dataclass
class TrainConfig:
    epochs: int = MAX_EPOCHS
    batch_size: int = 4
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    decay: float = 0.5
    plateau_patience: int = 10
    stop_patience: int = 20
    min_delta: float = 1e-4
    early_stopping: bool = True
    overfit: bool = False  # memorization check: up to 300 epochs, no early stop

    def __post_init__(self):
        cap = OVERFIT_MAX_EPOCHS if self.overfit else MAX_EPOCHS
        if not 1 <= self.epochs <= cap:
            raise ValueError(f"epochs must be in [1, {cap}], got {self.epochs}")
        if self.overfit:
            self.early_stopping = False
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

@dataclass
class OptimizerState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: ParamStore, state: OptimizerState) -> None:
    """Bias-corrected Adam update of every parameter from its ``.grad``.

    Raises ``FloatingPointError`` naming the parameter if any gradient is non-finite;
    in that case nothing is updated.
    """
    for name, p in params.items():
        if p.grad is None:
            raise ValueError(f"parameter {name} has no gradient")
        if not np.all(np.isfinite(p.grad)):
            raise FloatingPointError(f"non-finite gradient in parameter {name}")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1, c2 = 1 - b1 ** t, 1 - b2 ** t
    for name, p in params.items():
        g = p.grad
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.values)
            state.v[name] = np.zeros_like(p.values)
        v = state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        upd = state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        p.values -= upd.astype(p.values.dtype, copy=False)


# ---------------------------------------------------------------------------
# Plateau schedule
# ---------------------------------------------------------------------------

@dataclass
class ScheduleState:
    lr: float = 1e-4
    best: float = math.inf
    since_best: int = 0       # epochs without improvement (early stop counter)
    since_decay: int = 0      # plateau counter, reset on decay and improvement
    plateau_patience: int = 10
    stop_patience: int = 20
    decay: float = 0.5
    min_delta: float = 1e-4
    decays: int = 0
    stop: bool = False
    early_stopping: bool = True


def schedule_update(state: ScheduleState, val_loss: float) -> ScheduleState:
    """Advance one epoch.  Returns the same (mutated) state for chaining."""
    if not math.isfinite(val_loss):
        raise FloatingPointError(f"non-finite validation loss {val_loss}")
    if state.best - val_loss > state.min_delta:
        state.best = val_loss
        state.since_best = state.since_decay = 0
        return state
    state.since_best += 1
    state.since_decay += 1
    if state.since_decay >= state.plateau_patience:
        state.decays += 1
        state.lr = state.lr * state.decay
        state.since_decay = 0
    if state.early_stopping and state.since_best >= state.stop_patience:
        state.stop = True
    return state


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

class CheckpointError(ValueError):
    pass


class Checkpoint(NamedTuple):
    tensors: dict   # name -> float32 ndarray
    meta: dict


def _json_bytes(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


def write_checkpoint(path, tensors: dict, meta: dict) -> None:
    """``MRN1 | u32 version | u32 header length | JSON header | float32 LE data``.

    The header holds ``manifest`` entries ``[name, shape, byte offset]`` and ``meta``.
    """
    manifest, blobs, offset = [], [], 0
    for name, arr in tensors.items():
        a = np.ascontiguousarray(arr, dtype="<f4")
        manifest.append([name, list(a.shape), offset])
        blobs.append(a.tobytes())
        offset += a.nbytes
    header = _json_bytes({"manifest": manifest, "meta": meta})
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", FORMAT_VERSION, len(header)))
        fh.write(header)
        for b in blobs:
            fh.write(b)
    tmp.replace(path)


def read_checkpoint(path) -> Checkpoint:
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {raw[:4]!r}, expected {MAGIC!r}")
    version, hlen = struct.unpack("<II", raw[4:12])
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: format version {version}, expected {FORMAT_VERSION}")
    header = json.loads(raw[12:12 + hlen])
    base = 12 + hlen
    tensors = {}
    for name, shape, off in header["manifest"]:
        count = int(np.prod(shape)) if shape else 1
        tensors[name] = np.frombuffer(raw, dtype="<f4", count=count,
                                      offset=base + off).reshape(shape).copy()
    return Checkpoint(tensors, header["meta"])


def model_state(model: Module) -> dict:
    out = {f"param.{k}": v.values for k, v in model.named_parameters()}
    out.update({f"buffer.{k}": v for k, v in model.named_buffers()})
    return out


def save_checkpoint(path, model: Module, opt: OptimizerState | None = None,
                    sched: ScheduleState | None = None, norm: NormStats | None = None,
                    extra: dict | None = None) -> None:
    tensors = model_state(model)
    if opt is not None:
        for k in opt.m:
            tensors[f"adam_m.{k}"] = opt.m[k]
            tensors[f"adam_v.{k}"] = opt.v[k]
    meta = {"model": model.cfg.to_dict()}
    if opt is not None:
        meta["optimizer"] = {k: getattr(opt, k) for k in ("lr", "beta1", "beta2", "eps", "step")}
    if sched is not None:
        meta["schedule"] = asdict(sched)
    if norm is not None:
        meta["norm"] = {"mean": norm.mean, "std": norm.std}
    if extra:
        meta["extra"] = extra
    write_checkpoint(path, tensors, meta)


def check_manifest(model: Module, ckpt: Checkpoint) -> None:
    """Reject a checkpoint whose model tensors do not match ``model`` name-for-name."""
    want = {k: tuple(v.shape) for k, v in model_state(model).items()}
    have = {k: tuple(v.shape) for k, v in ckpt.tensors.items()
            if k.startswith(("param.", "buffer."))}
    for name in list(want) + [k for k in have if k not in want]:
        if want.get(name) != have.get(name):
            raise CheckpointError(
                f"checkpoint does not match model at tensor {name}: "
                f"model {want.get(name)} vs checkpoint {have.get(name)}")


def load_into(model: Module, ckpt: Checkpoint) -> None:
    check_manifest(model, ckpt)
    params = dict(model.named_parameters())
    for name, p in params.items():
        p.values[...] = ckpt.tensors[f"param.{name}"]
    for mod_name, bn in _batchnorms(model):
        bn.load_buffers(ckpt.tensors[f"buffer.{mod_name}running_mean"],
                        ckpt.tensors[f"buffer.{mod_name}running_var"])


def _batchnorms(model: Module, prefix: str = ""):
    for key, val in model._children():
        if isinstance(val, BatchNorm):
            yield f"{prefix}{key}.", val
        elif isinstance(val, Module):
            yield from _batchnorms(val, f"{prefix}{key}.")


def load_checkpoint(path, model: Module | None = None):
    """Returns ``(model, optimizer, schedule, norm, meta)``; builds the model from
    the stored config when ``model`` is None."""
    ckpt = read_checkpoint(path)
    if model is None:
        model = build_model(MrnConfig(**ckpt.meta["model"]))
    load_into(model, ckpt)
    opt = sched = norm = None
    if "optimizer" in ckpt.meta:
        opt = OptimizerState(**ckpt.meta["optimizer"])
        for k in ckpt.tensors:
            if k.startswith("adam_m."):
                name = k[len("adam_m."):]
                opt.m[name] = ckpt.tensors[k]
                opt.v[name] = ckpt.tensors[f"adam_v.{name}"]
    if "schedule" in ckpt.meta:
        sched = ScheduleState(**ckpt.meta["schedule"])
    if "norm" in ckpt.meta:
        norm = NormStats(ckpt.meta["norm"]["mean"], ckpt.meta["norm"]["std"])
    return model, opt, sched, norm, ckpt.meta


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------

HISTORY_HEADER = ["epoch", "train_loss", "val_loss", "val_dc", "lr"]


class HistoryRow(NamedTuple):
    epoch: int
    train_loss: float
    val_loss: float
    val_dc: float
    lr: float


@dataclass
class TrainResult:
    history: list
    best_epoch: int
    best_val_loss: float
    stopped_early: bool
    norm: NormStats


def compute_loss(out, target: np.ndarray, spec: DualLossSpec) -> Array4:
    if isinstance(out, DualOutput):
        return dual_loss(out, target, spec).total
    return segmentation_loss(out, target, spec)


def main_map(out) -> Array4:
    return out.main_map if isinstance(out, DualOutput) else out


def evaluate(model: Module, samples: Sequence[Sample], norm: NormStats, spec: DualLossSpec,
             batch_size: int = 4) -> tuple[float, float, list]:
    """Eval-mode mean loss (sample-weighted), mean per-image DC, and per-image metrics."""
    was_training = model.training
    model.eval()
    total, mets = 0.0, []
    dtype = model.params()[next(iter(model.params()))].dtype
    try:
        with no_record():
            for i in range(0, len(samples), batch_size):
                chunk = samples[i:i + batch_size]
                x, y = stack_batch(chunk, norm, dtype)
                out = model(Array4(x))
                total += compute_loss(out, y, spec).item() * len(chunk)
                prob = main_map(out).values
                mets.extend(metrics(prob[k], y[k]) for k in range(len(chunk)))
    finally:
        if was_training:
            model.train()
    return total / len(samples), float(np.mean([m.dc for m in mets])), mets


def write_history(path, history: Sequence[HistoryRow]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(HISTORY_HEADER)
        for r in history:
            w.writerow([r.epoch, repr(r.train_loss), repr(r.val_loss), repr(r.val_dc),
                        repr(r.lr)])


def train(model: Module, train_set: Sequence[Sample], val_set: Sequence[Sample],
          cfg: TrainConfig, loss_spec: DualLossSpec | None = None,
          aug: AugmentSpec | None = None, seed: int = 0, out_dir=None,
          resume: str | Path | None = None, norm: NormStats | None = None,
          on_epoch: Callable[[HistoryRow], None] | None = None) -> TrainResult:
    """Epoch loop: shuffle, augment, normalize, forward, dual loss, backward, Adam;
    then validation loss, plateau schedule, and best/last checkpoints.

    All randomness derives from ``seed`` and the epoch / sample id, so a run
    resumed from ``last.mrn`` continues exactly as the uninterrupted run would.
    """
    if not train_set or not val_set:
        raise ValueError("train and validation sets must be non-empty")
    loss_spec = loss_spec or DualLossSpec()
    aug = aug or AugmentSpec()
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)

    params = model.params()
    opt = OptimizerState(cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps)
    sched = ScheduleState(lr=cfg.lr, plateau_patience=cfg.plateau_patience,
                          stop_patience=cfg.stop_patience, decay=cfg.decay,
                          min_delta=cfg.min_delta, early_stopping=cfg.early_stopping)
    history: list[HistoryRow] = []
    start_epoch = 1
    best_epoch = 0
    if resume is not None:
        _, opt_r, sched_r, norm_r, meta = load_checkpoint(resume, model)
        opt, sched = opt_r or opt, sched_r or sched
        norm = norm_r or norm
        extra = meta.get("extra", {})
        start_epoch = int(extra.get("epoch", 0)) + 1
        best_epoch = int(extra.get("best_epoch", 0))
        history = [HistoryRow(*r) for r in extra.get("history", [])]
    if norm is None:
        norm = NormStats.fit([s.image for s in train_set])
    if out_dir is not None:
        norm.save(out_dir / "norm.json")

    dtype = params[next(iter(params))].dtype
    for epoch in range(start_epoch, cfg.epochs + 1):
        if sched.stop:
            break
        model.train()
        order = np.random.default_rng(derive_seed(seed, "shuffle", epoch)).permutation(
            len(train_set))
        running = 0.0
        for b in range(0, len(order), cfg.batch_size):
            chunk = [augment(train_set[i], aug,
                             np.random.default_rng(derive_seed(seed, "augment", epoch,
                                                               train_set[i].id)))
                     for i in order[b:b + cfg.batch_size]]
            x, y = stack_batch(chunk, norm, dtype)
            params.zero_grad()
            with Tape() as tape:
                loss = compute_loss(model(Array4(x)), y, loss_spec)
            tape.backward(loss)
            opt.lr = sched.lr
            adam_step(params, opt)
            running += loss.item() * len(chunk)
        train_loss = running / len(train_set)
        val_loss, val_dc, _ = evaluate(model, val_set, norm, loss_spec, cfg.batch_size)
        lr_used = sched.lr
        improved = sched.best - val_loss > sched.min_delta
        schedule_update(sched, val_loss)
        row = HistoryRow(epoch, train_loss, val_loss, val_dc, lr_used)
        history.append(row)
        log.info("epoch %d train %.4f val %.4f dc %.4f lr %.2e", *row)
        if improved:
            best_epoch = epoch
        if out_dir is not None:
            extra = {"epoch": epoch, "best_epoch": best_epoch,
                     "history": [list(r) for r in history]}
            if improved:
                save_checkpoint(out_dir / "best.mrn", model, opt, sched, norm, extra)
            save_checkpoint(out_dir / "last.mrn", model, opt, sched, norm, extra)
            write_history(out_dir / "history.csv", history)
        if on_epoch is not None:
            on_epoch(row)

    return TrainResult(history, best_epoch, sched.best, sched.stop, norm)


# ---------------------------------------------------------------------------
# Gradient check
# ---------------------------------------------------------------------------

class GradRow(NamedTuple):
    name: str
    max_rel_err: float
    checked: int


@dataclass
class GradReport:
    rows: list
    threshold: float

    @property
    def passed(self) -> bool:
        return all(r.max_rel_err < self.threshold for r in self.rows)

    @property
    def worst(self) -> float:
        return max(r.max_rel_err for r in self.rows)

    def to_text(self) -> str:
        lines = [f"{r.name:<48s} max_rel_err={r.max_rel_err:.3e} checked={r.checked}"
                 for r in self.rows]
        verdict = "PASS" if self.passed else "FAIL"
        lines.append(f"{verdict}: worst {self.worst:.3e} (threshold {self.threshold:.0e})")
        return "\n".join(lines)


REL_FLOOR = 1e-5
FD_STEP = 1e-5


def rel_error(analytic, numeric, scale: float = 1.0) -> float:
    """Max elementwise ``|a - n| / max(|a|, |n|, REL_FLOOR * max(1, scale))``.

    ``scale`` is the magnitude of the function value; entries whose gradient is
    below the finite-difference round-off level are compared absolutely.
    """
    a, n = np.asarray(analytic, float), np.asarray(numeric, float)
    floor = REL_FLOOR * max(1.0, abs(scale))
    den = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / den)) if a.size else 0.0


def _central(f: Callable[[], float], set_value: Callable[[float], None], step: float,
             retries: int = 3) -> float:
    """Central difference that never straddles a relu / max-pool / clamp switch.

    If the two stencil points choose different branches, the step shrinks by 10x.
    """
    for _ in range(retries + 1):
        set_value(step)
        with record_patterns() as pp:
            fp = f()
        set_value(-step)
        with record_patterns() as pm:
            fm = f()
        set_value(0.0)
        if pp == pm:
            break
        step /= 10
    return (fp - fm) / (2 * step)


def numeric_grad(f: Callable[[], float], arr: np.ndarray, idx: Sequence[int] | None = None,
                 step: float = FD_STEP) -> np.ndarray:
    """Central differences of ``f`` w.r.t. flat entries ``idx`` of ``arr`` (in place)."""
    flat = arr.reshape(-1)
    idx = range(flat.size) if idx is None else idx
    out = np.zeros(len(idx))
    for k, i in enumerate(idx):
        orig = flat[i]

        def set_value(delta, i=i, orig=orig):
            flat[i] = orig + delta

        out[k] = _central(f, set_value, step)
    return out


def directional_check(f: Callable[[], float], arr: np.ndarray, grad: np.ndarray,
                      rng: np.random.Generator, step: float = 1e-5) -> tuple[float, float]:
    """Analytic ``<grad, v>`` vs central difference along a random unit direction ``v``."""
    v = rng.standard_normal(arr.shape)
    v /= np.linalg.norm(v)
    orig = arr.copy()

    def set_value(delta):
        arr[...] = orig + delta * v

    return float(np.sum(grad * v)), _central(f, set_value, step)


def gradcheck(cfg: MrnConfig | None = None, seed: int = 0, batch: int = 1,
              threshold: float = 1e-3, max_entries: int | None = 48, directions: int = 2,
              loss_spec: DualLossSpec | None = None) -> GradReport:
    """Compare analytic dual-loss gradients with central differences, per parameter group.

    Each group is checked entry-wise (all entries, or ``max_entries`` sampled ones)
    and along ``directions`` random directions that perturb every entry at once.
    Runs in float64 on a small configuration (default d=2, base=4, N=4, 16x16).
    """
    cfg = cfg or MrnConfig(depth=2, base_channels=4, descriptors=4, side=16)
    loss_spec = loss_spec or DualLossSpec()
    rng = np.random.default_rng(derive_seed(seed, "gradcheck"))
    with precision(np.float64):
        model = build_model(cfg, seed=derive_seed(seed, "init"))
        x = rng.standard_normal((batch, cfg.in_channels, cfg.side, cfg.side))
        y = (rng.random((batch, 1, cfg.side, cfg.side)) < 0.4).astype(np.float64)
        params = model.params()

        def loss_value() -> float:
            with no_record():
                return compute_loss(model(Array4(x)), y, loss_spec).item()

        params.zero_grad()
        with Tape() as tape:
            loss = compute_loss(model(Array4(x)), y, loss_spec)
        tape.backward(loss)
        scale = loss.item()
        rows = []
        for name, p in params.items():
            size = p.values.size
            if max_entries is not None and size > max_entries:
                idx = sorted(rng.choice(size, max_entries, replace=False).tolist())
            else:
                idx = list(range(size))
            num = numeric_grad(loss_value, p.values, idx)
            err = rel_error(p.grad.reshape(-1)[idx], num, scale)
            for _ in range(directions):
                a, n = directional_check(loss_value, p.values, p.grad, rng)
                err = max(err, rel_error([a], [n], scale))
            rows.append(GradRow(name, err, len(idx) + directions))
    return GradReport(rows, threshold)
