"""Sweep the consistency-loss weight on the seeded synthetic set.

    python3 scripts/w4_sweep.py [--epochs 50] [--weights 0 0.5 1 2]
"""

import argparse

from _synthetic import fmt, load, run
from fair_diag.trainer import TrainConfig


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--epochs", type=int, default=50)
    ap.add_argument("--weights", type=float, nargs="+", default=[0.0, 0.5, 1.0, 2.0])
    args = ap.parse_args()

    data, cfg, _ = load(args.epochs)
    for w in args.weights:
        m = run(data, TrainConfig(**{**cfg.to_dict(), "w4": w}))
        print(f"w4={w:<4} {fmt(m)}  ({m['seconds']}s)")


if __name__ == "__main__":
    main()
