"""Train, evaluate and apply dual-decoder lesion segmentation models.

Exit codes: 0 success, 2 usage/config error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import contextlib
import dataclasses
import json
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .data import AugmentSpec, Sample, derive_seed, load_dataset, read_image, save_dataset, split_stratified, \
    synth_dataset
from .diffarray import Array4
from .engine import CheckpointError, TrainConfig, evaluate, gradcheck, load_checkpoint, train
from .network import DualOutput, MrnConfig, build_model
from .objectives import DualLossSpec, stratified_report

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 2, 3
MODEL_NAMES = {"ddsl": "DDSL", "baseline": "Baseline"}


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    root: str | None = None        # dataset directory; None -> synthesize
    synth_n: int = 200
    train_frac: float = 0.7        # train+val vs test
    val_frac: float = 0.15         # carved from the train portion


@dataclass
class RunConfig:
    model: MrnConfig = field(default_factory=MrnConfig)
    loss: DualLossSpec = field(default_factory=DualLossSpec)
    augment: AugmentSpec = field(default_factory=AugmentSpec)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    seed: int = 0
    out_dir: str = "runs/default"
    threads: int | None = None

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def _build(cls, raw, path: str):
    if not isinstance(raw, dict):
        raise ConfigError(f"{path or 'config'}: expected an object, got {type(raw).__name__}")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(raw) - set(fields))
    if unknown:
        where = f"{path}." if path else ""
        raise ConfigError(f"unknown config key {where}{unknown[0]}")
    kwargs = {}
    for name, value in raw.items():
        sub = _NESTED.get((cls, name))
        kwargs[name] = _build(sub, value, f"{path}.{name}" if path else name) if sub else value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{path or 'config'}: {exc}") from exc


_NESTED = {(RunConfig, "model"): MrnConfig, (RunConfig, "loss"): DualLossSpec,
           (RunConfig, "augment"): AugmentSpec, (RunConfig, "train"): TrainConfig,
           (RunConfig, "data"): DataConfig}


def parse_config(raw: dict) -> RunConfig:
    """Defaults filled in; unknown keys rejected with their dotted path."""
    return _build(RunConfig, raw, "")


def load_config(path) -> RunConfig:
    try:
        raw = json.loads(Path(path).read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    return parse_config(raw)


def _dump(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_synth(args) -> int:
    samples = synth_dataset(args.n, args.side, args.seed)
    try:
        save_dataset(samples, args.out)
    except OSError as exc:
        raise ConfigError(f"cannot write dataset to {args.out}: {exc}") from exc
    print(f"wrote {len(samples)} samples to {args.out}")
    return EXIT_OK


def _dataset(cfg: RunConfig) -> list[Sample]:
    if cfg.data.root:
        if not (Path(cfg.data.root) / "metadata.csv").exists():
            raise ConfigError(f"data.root {cfg.data.root}: no metadata.csv")
        return load_dataset(cfg.data.root, side=cfg.model.side)
    return synth_dataset(cfg.data.synth_n, cfg.model.side, cfg.seed)


def make_splits(samples, cfg: RunConfig) -> dict[str, list[Sample]]:
    if cfg.train.overfit:
        return {"train": samples, "val": samples, "test": []}
    trainval, test = split_stratified(samples, cfg.data.train_frac, cfg.seed)
    # validation only drives the LR schedule, so a plain seeded draw is enough; strata
    # are mostly singletons at this size and a stratified carve would leave it empty
    n_val = max(1, round(cfg.data.val_frac * len(trainval)))
    if n_val >= len(trainval):
        raise ConfigError(f"too few samples ({len(samples)}) for a train/val/test split")
    order = np.random.default_rng(derive_seed(cfg.seed, "val")).permutation(len(trainval))
    val_idx = set(order[:n_val].tolist())
    return {"train": [s for i, s in enumerate(trainval) if i not in val_idx],
            "val": [s for i, s in enumerate(trainval) if i in val_idx], "test": test}


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    if args.out_dir:
        cfg.out_dir = args.out_dir
    out = Path(cfg.out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.resolved.json").write_text(_dump(cfg.to_dict()))
    except OSError as exc:
        raise ConfigError(f"cannot write to {out}: {exc}") from exc
    splits = make_splits(_dataset(cfg), cfg)
    (out / "split.json").write_text(_dump({k: [s.id for s in v] for k, v in splits.items()}))
    model = build_model(cfg.model, seed=cfg.seed)
    res = train(model, splits["train"], splits["val"], cfg.train, cfg.loss, cfg.augment,
                seed=cfg.seed, out_dir=out, resume=args.resume)
    last = res.history[-1]
    print(f"epochs {last.epoch}  best epoch {res.best_epoch}  val loss {res.best_val_loss:.4f}"
          f"  last val dc {last.val_dc:.4f}")
    return EXIT_OK


def _load(path):
    try:
        model, _, _, norm, meta = load_checkpoint(path)
    except OSError as exc:
        raise ConfigError(f"cannot read checkpoint {path}: {exc}") from exc
    if norm is None:
        raise ConfigError(f"{path}: checkpoint carries no normalization statistics")
    return model, norm


def _subset(samples, split_file, subset):
    if not split_file:
        return samples
    ids = set(json.loads(Path(split_file).read_text())[subset])
    return [s for s in samples if s.id in ids]


def cmd_eval(args) -> int:
    wanted = [m.strip() for m in args.models.split(",") if m.strip()]
    for m in wanted:
        if m not in MODEL_NAMES:
            raise ConfigError(f"unknown model {m!r}; choose from {sorted(MODEL_NAMES)}")
    ckpts = {"ddsl": args.checkpoint, "baseline": args.baseline_checkpoint}
    per_model, samples = {}, None
    for m in wanted:
        if not ckpts[m]:
            raise ConfigError(f"model {m} needs --{'baseline-' if m == 'baseline' else ''}"
                              "checkpoint")
        model, norm = _load(ckpts[m])
        if samples is None:
            if not (Path(args.data) / "metadata.csv").exists():
                raise ConfigError(f"{args.data}: no metadata.csv")
            samples = _subset(load_dataset(args.data, side=model.cfg.side), args.split,
                              args.subset)
            if not samples:
                raise ConfigError("no samples to evaluate")
        if samples[0].image.shape[1] != model.cfg.side:
            raise ConfigError(f"{ckpts[m]}: model side {model.cfg.side} does not match data")
        _, dc, mets = evaluate(model, samples, norm, DualLossSpec())
        per_model[MODEL_NAMES[m]] = mets
        print(f"{MODEL_NAMES[m]}: mean DC {dc:.4f} over {len(samples)} samples")
    report = stratified_report([s.meta for s in samples], per_model)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.csv").write_text(report.to_csv())
    (out / "report.txt").write_text(report.to_text())
    print(report.to_text(), end="")
    return EXIT_OK


def _save_png16(prob: np.ndarray, path) -> None:
    Image.fromarray(np.round(prob * 65535).astype(np.uint16)).save(path)


def cmd_predict(args) -> int:
    model, norm = _load(args.checkpoint)
    if args.aux and model.cfg.kind != "mrn":
        raise ConfigError("--aux needs a dual-decoder (mrn) checkpoint")
    try:
        image = read_image(args.image, side=model.cfg.side)
    except (OSError, ValueError) as exc:
        raise ConfigError(f"cannot decode image {args.image}: {exc}") from exc
    model.eval()
    dtype = next(iter(model.params().values())).dtype
    out = model(Array4(norm.normalize(image)[None].astype(dtype)))
    main = out.main_map if isinstance(out, DualOutput) else out
    prob = main.values[0, 0].astype(np.float64)
    Image.fromarray(np.where(prob >= 0.5, 255, 0).astype(np.uint8), "L").save(args.out)
    if args.prob:
        _save_png16(prob, args.prob)
    if args.aux:
        _save_png16(out.aux_map.values[0, 0].astype(np.float64), args.aux)
    print(f"wrote {args.out}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    report = gradcheck(seed=args.seed)
    print(report.to_text())
    return EXIT_OK if report.passed else EXIT_NUMERIC


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ddsl", description=__doc__.splitlines()[0])
    p.add_argument("--threads", type=int, default=None,
                   help="BLAS threads (1 gives bit-exact reproducibility)")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="cmd", required=True)

    s = sub.add_parser("synth", help="write a synthetic dataset")
    s.add_argument("--n", type=int, default=200)
    s.add_argument("--side", type=int, default=256)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_synth)

    s = sub.add_parser("train", help="train from a JSON run config")
    s.add_argument("--config", required=True)
    s.add_argument("--out-dir", default=None, help="override out_dir from the config")
    s.add_argument("--resume", default=None, help="continue from a last.mrn checkpoint")
    s.set_defaults(fn=cmd_train)

    s = sub.add_parser("eval", help="stratified report on a dataset")
    s.add_argument("--checkpoint", help="DDSL (mrn) checkpoint")
    s.add_argument("--baseline-checkpoint")
    s.add_argument("--data", required=True)
    s.add_argument("--models", default="ddsl")
    s.add_argument("--split", help="split.json written by train")
    s.add_argument("--subset", default="test", choices=["train", "val", "test"])
    s.add_argument("--out", default=".")
    s.set_defaults(fn=cmd_eval)

    s = sub.add_parser("predict", help="segment one image")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--image", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--prob", help="also write a 16-bit probability PNG")
    s.add_argument("--aux", help="also write the auxiliary-path probability PNG")
    s.set_defaults(fn=cmd_predict)

    s = sub.add_parser("gradcheck", help="end-to-end finite-difference check")
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(fn=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(message)s")
    threads = args.threads
    if threads is None and args.cmd == "train":
        with contextlib.suppress(Exception):
            threads = load_config(args.config).threads
    try:
        if threads is not None:
            from threadpoolctl import threadpool_limits
            with threadpool_limits(limits=threads):
                return args.fn(args)
        return args.fn(args)
    except (ConfigError, CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FloatingPointError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
