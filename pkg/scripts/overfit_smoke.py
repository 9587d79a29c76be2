#!/usr/bin/env python3
"""Run the three desk-scale overfit experiments and print a summary table.

Each task trains its model(s) on a small synthetic split and reports the
training-split scores plus wall-clock time. Artifacts (checkpoints,
manifests) land under --out.
"""

import argparse
import time
from pathlib import Path

from affectlab.core import Task
from affectlab.harness import run_train, smoke_config


def main() -> None:
    parser = argparse.ArgumentParser()
    parser.add_argument("--out", type=Path, default=Path("runs/overfit_smoke"))
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()

    rows = []
    for task in (Task.VA, Task.EXPR, Task.AU):
        cfg = smoke_config(task, seed=args.seed)
        t0 = time.perf_counter()
        manifest = run_train(cfg, args.out / task.value)
        elapsed = time.perf_counter() - t0
        if task is Task.VA:
            score = (f"ccc_v={manifest.metrics['train_ccc_valence']:.3f} "
                     f"ccc_a={manifest.metrics['train_ccc_arousal']:.3f}")
        elif task is Task.EXPR:
            accs = [manifest.metrics[f"sub_{k}_train_accuracy"] for k in range(cfg.n_subclassifiers)]
            score = (f"min_sub_acc={min(accs):.3f} "
                     f"ensemble_val_f1={manifest.metrics['val_f1_final']:.3f}")
        else:
            score = f"train_f1_mean={manifest.metrics['train_f1_mean']:.3f}"
        rows.append((task.value, score, elapsed))

    print(f"\n{'task':<6} {'scores':<50} {'time':>8}")
    for task, score, elapsed in rows:
        print(f"{task:<6} {score:<50} {elapsed:>7.1f}s")


if __name__ == "__main__":
    main()
