#!/usr/bin/env python3
"""Sweep the 'other'-class fallback threshold of the expression ensemble.

Trains once under the threshold scheme, then reports validation macro-F1 per
tau value. Low taus rarely fall back to class 7; high taus route most frames
there.
"""

import argparse
from pathlib import Path

from affectlab.config import ExprScheme
from affectlab.core import Task
from affectlab.harness import run_sweep, smoke_config


def main() -> None:
    parser = argparse.ArgumentParser()
    parser.add_argument("--out", type=Path, default=Path("runs/tau_sweep"))
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--values", type=float, nargs="+",
                        default=[0.3, 0.5, 0.7, 0.9])
    args = parser.parse_args()

    cfg = smoke_config(Task.EXPR, seed=args.seed)
    cfg.expr_scheme = ExprScheme.SEVEN_BY_THRESHOLD
    rows = run_sweep(cfg, "other_threshold", args.values, args.out)

    print(f"\n{'tau':>5} {'val_f1_final':>14} {'val_accuracy':>14}")
    for value, report in rows:
        print(f"{value:>5.2f} {report.values['f1_final']:>14.4f} "
              f"{report.values['accuracy']:>14.4f}")


if __name__ == "__main__":
    main()
