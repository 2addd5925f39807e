"""Memorization check: can the MRN drive train DC past a target on a few images?

    python scripts/overfit.py --n 8 --side 64 --target 0.95
"""

import argparse
import time

from ddsl.data import AugmentSpec, synth_dataset
from ddsl.engine import OVERFIT_MAX_EPOCHS, TrainConfig, train
from ddsl.network import MrnConfig, build_model


class Reached(Exception):
    pass


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--n", type=int, default=8)
    ap.add_argument("--side", type=int, default=64)
    ap.add_argument("--depth", type=int, default=2)
    ap.add_argument("--base", type=int, default=8)
    ap.add_argument("--epochs", type=int, default=OVERFIT_MAX_EPOCHS)
    ap.add_argument("--target", type=float, default=0.95)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    samples = synth_dataset(args.n, args.side, seed=args.seed)
    model = build_model(MrnConfig(depth=args.depth, base_channels=args.base, side=args.side),
                        seed=args.seed)
    t0 = time.time()

    def report(row):
        if row.epoch % 10 == 0 or row.val_dc >= args.target:
            print(f"epoch {row.epoch:3d}  loss {row.train_loss:.4f}  train DC {row.val_dc:.4f}"
                  f"  lr {row.lr:.1e}  {time.time() - t0:.0f}s", flush=True)
        if row.val_dc >= args.target:
            raise Reached

    try:  # the training images double as the validation set
        train(model, samples, samples, TrainConfig(epochs=args.epochs, overfit=True),
              aug=AugmentSpec.identity(), seed=args.seed, on_epoch=report)
        print(f"target {args.target} not reached in {args.epochs} epochs")
    except Reached:
        print(f"reached train DC >= {args.target}")


if __name__ == "__main__":
    main()
