"""Finite-difference check of the full dual-loss gradient, per parameter group.

    python scripts/gradcheck.py --seed 0 --depth 2 --side 16
"""

import argparse
import sys
import time

from ddsl.engine import gradcheck
from ddsl.network import MrnConfig


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--depth", type=int, default=2)
    ap.add_argument("--base", type=int, default=4)
    ap.add_argument("--descriptors", type=int, default=4)
    ap.add_argument("--side", type=int, default=16)
    ap.add_argument("--entries", type=int, default=48, help="sampled entries per group")
    args = ap.parse_args()
    cfg = MrnConfig(depth=args.depth, base_channels=args.base, descriptors=args.descriptors,
                    side=args.side)
    t0 = time.time()
    report = gradcheck(cfg, seed=args.seed, max_entries=args.entries)
    print(report.to_text())
    print(f"{time.time() - t0:.1f}s")
    sys.exit(0 if report.passed else 1)


if __name__ == "__main__":
    main()
