"""Command-line interface.

Subcommands: train, eval, predict, export, sweep, synth. Shared flags:
--config PATH, --task {va,expr,au}, --seed N, --out DIR, --device, and
--synthetic to force synthetic data. Any config key can be overridden via
AFFECT_<KEY> environment variables.

Exit codes: 0 success, 2 config error, 3 data error, 4 training/runtime
failure.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import replace
from pathlib import Path

import torch

from .config import ExperimentConfig, Provenance, default_config, load_config
from .core import Task
from .data import SplitName, filter_split, generate_synthetic, write_split
from .errors import (
    AffectError,
    ConfigError,
    DegenerateInputError,
    DomainError,
    IncompatibleCheckpointError,
    ParseError,
    ShapeError,
    TrainingError,
    ValidationError,
)
from .harness import acquire_split, run_eval, run_export, run_sweep, run_train

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_TRAINING = 4


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", type=Path, help="flat key=value config file")
    parser.add_argument("--task", choices=[t.value for t in Task])
    parser.add_argument("--seed", type=int)
    parser.add_argument("--out", type=Path, default=Path("runs/out"))
    parser.add_argument("--device", default="cpu")
    parser.add_argument("--synthetic", action="store_true",
                        help="force synthetic data regardless of config provenance")


def _resolve_config(args) -> ExperimentConfig:
    if args.config is not None:
        cfg = load_config(args.config)
        if args.task is not None and cfg.task is not Task(args.task):
            raise ConfigError(f"--task {args.task} conflicts with config task {cfg.task.value}")
    else:
        if args.task is None:
            raise ConfigError("either --config or --task is required")
        cfg = default_config(Task(args.task))
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    if args.synthetic:
        cfg = replace(cfg, provenance=Provenance.SYNTHETIC)
    if args.device != "cpu" and not torch.cuda.is_available():
        raise ConfigError(f"device {args.device!r} not available in this build")
    return cfg.validate()


def _split_for(cfg: ExperimentConfig, name: str):
    split = acquire_split(cfg, SplitName(name))
    return filter_split(split, cfg.task, cfg)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="affectlab")
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="train the task's model(s)")
    _add_common(p_train)

    for name, doc in (("eval", "evaluate checkpoint(s) on a split"),
                      ("predict", "write per-frame predictions for a split"),
                      ("export", "write submission-format prediction files")):
        p = sub.add_parser(name, help=doc)
        _add_common(p)
        p.add_argument("--checkpoint", type=Path, nargs="+", required=True)
        p.add_argument("--split", choices=[s.value for s in SplitName], default="val")

    p_sweep = sub.add_parser("sweep", help="evaluate a config key over several values")
    _add_common(p_sweep)
    p_sweep.add_argument("--parameter", required=True)
    p_sweep.add_argument("--values", nargs="+", required=True)

    p_synth = sub.add_parser("synth", help="write a synthetic dataset to disk")
    _add_common(p_synth)
    p_synth.add_argument("--split", choices=[s.value for s in SplitName], default="train")

    return parser


def _coerce_sweep_values(parameter: str, raw: list[str]):
    from .config import _FIELD_TYPES, _decode_value

    if parameter not in _FIELD_TYPES:
        return raw  # run_sweep rejects the unknown key with a ConfigError
    return [_decode_value(parameter, token, _FIELD_TYPES[parameter]) for token in raw]


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = _resolve_config(args)
        if args.command == "train":
            manifest = run_train(cfg, args.out)
            for key, value in manifest.metrics.items():
                print(f"{key} = {value:.6f}")
            print(f"manifest: {manifest.artifacts['manifest']}")
        elif args.command == "eval":
            split = _split_for(cfg, args.split)
            report = run_eval(args.checkpoint, split, cfg.task, out_dir=args.out)
            print(report.to_text(), end="")
        elif args.command in ("predict", "export"):
            split = _split_for(cfg, args.split)
            written = run_export(args.checkpoint, split, cfg.task, args.out)
            print(f"wrote {len(written)} file(s) to {args.out}")
        elif args.command == "sweep":
            values = _coerce_sweep_values(args.parameter, args.values)
            rows = run_sweep(cfg, args.parameter, values, args.out)
            for value, report in rows:
                summary = ", ".join(f"{k}={v:.4f}" for k, v in list(report.values.items())[:4])
                print(f"{args.parameter}={value}: {summary}")
        elif args.command == "synth":
            split = generate_synthetic(
                cfg.seed, cfg.n_videos, cfg.frames_per_video, cfg.task,
                image_size=cfg.image_size, extreme_fraction=cfg.extreme_fraction,
                split_name=SplitName(args.split),
            )
            write_split(args.out, split, cfg.task)
            print(f"wrote {split.n_frames()} frames / {len(split.sequences)} videos to {args.out}")
        return EXIT_OK
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ParseError, ValidationError, IncompatibleCheckpointError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (TrainingError, ShapeError, DomainError, DegenerateInputError, AffectError) as exc:
        print(f"run failed: {exc}", file=sys.stderr)
        return EXIT_TRAINING


if __name__ == "__main__":
    sys.exit(main())
