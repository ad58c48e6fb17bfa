"""Base IRT versus full PSCRF-IRT on the seeded synthetic set.

    python3 scripts/debias_experiment.py [--epochs 50] [--w4 1.0]
"""

import argparse
import json

from _synthetic import fmt, load, run
from fair_diag.trainer import TrainConfig


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--epochs", type=int, default=50)
    ap.add_argument("--w4", type=float, default=1.0)
    ap.add_argument("--json", action="store_true")
    args = ap.parse_args()

    data, cfg, _ = load(args.epochs)
    base = run(data, cfg.base_variant())
    full = run(data, TrainConfig(**{**cfg.to_dict(), "w4": args.w4}))
    if args.json:
        print(json.dumps({"base": base, "pscrf": full}, indent=2))
        return
    print(f"base   {fmt(base)}")
    print(f"pscrf  {fmt(full)}")
    print(f"EO ratio {full['eo'] / base['eo']:.3f} (target <= 0.5)")
    print(f"|D| ratio {abs(full['d_under']) / abs(base['d_under']):.3f} (target <= 0.5)")
    print(f"AUC drop {base['auc'] - full['auc']:.4f} (target <= 0.02)")
    print(f"IR change {full['ir'] - base['ir']:+.4f} (target >= -0.01)")


if __name__ == "__main__":
    main()
