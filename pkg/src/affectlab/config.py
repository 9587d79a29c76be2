"""Experiment configuration: typed dataclass, flat-file loading, seed derivation.

The on-disk format is a flat, human-editable text file of `key = value` lines
(`#` starts a comment). Unknown keys are rejected. Every key can also be
overridden through the environment as `AFFECT_<KEY>` (uppercased), which takes
precedence over the file.
"""

from __future__ import annotations

import hashlib
import os
from dataclasses import dataclass, field, fields, replace
from enum import Enum
from pathlib import Path

from .core import Task
from .errors import ConfigError

ENV_PREFIX = "AFFECT_"


class ExprScheme(Enum):
    SEVEN_AS_CLASS = "seven_as_class"
    SEVEN_BY_THRESHOLD = "seven_by_threshold"


class AUFilterPolicy(Enum):
    DROP_FRAME = "drop_frame"
    MASK_CELLS = "mask_cells"


class Provenance(Enum):
    DISK = "disk"
    SYNTHETIC = "synthetic"


@dataclass(frozen=True)
class BackboneSpec:
    """Conv widths and output feature dimension of one small-CNN branch."""

    channels: tuple[int, ...]
    feature_dim: int

    def encode(self) -> str:
        return ",".join(str(c) for c in self.channels) + ":" + str(self.feature_dim)

    @staticmethod
    def decode(text: str) -> "BackboneSpec":
        try:
            widths, dim = text.split(":")
            channels = tuple(int(c) for c in widths.split(","))
            return BackboneSpec(channels, int(dim))
        except ValueError as exc:
            raise ConfigError(f"backbones: cannot parse branch spec {text!r}") from exc


# Per-task optimizer/training defaults. VA and EXPR use adaptive-moment
# updates (1e-4 / 5e-4); AU uses plain SGD with the unusually high 0.7 step
# size as its documented default.
TASK_DEFAULTS: dict[Task, dict] = {
    Task.VA: dict(optimizer="adam", learning_rate=1e-4, epochs=30, batch_size=32, dropout=0.0),
    Task.EXPR: dict(optimizer="adam", learning_rate=5e-4, epochs=20, batch_size=32, dropout=0.0),
    Task.AU: dict(optimizer="sgd", learning_rate=0.7, epochs=24, batch_size=16, dropout=0.3),
}

DEFAULT_BACKBONES: dict[Task, tuple[BackboneSpec, ...]] = {
    # Three branches with distinct widths; their outputs are concatenated.
    Task.VA: (
        BackboneSpec((8, 16), 32),
        BackboneSpec((12, 20), 32),
        BackboneSpec((16, 24), 32),
    ),
    # Variant pool for sub-classifiers; sub k uses pool[k % len(pool)].
    Task.EXPR: (
        BackboneSpec((8, 16), 32),
        BackboneSpec((12, 20), 32),
        BackboneSpec((16, 24), 32),
        BackboneSpec((8, 16, 24), 32),
        BackboneSpec((12, 24), 48),
    ),
    Task.AU: (BackboneSpec((8, 16), 32),),
}


@dataclass
class ExperimentConfig:
    task: Task
    seed: int = 0
    image_size: int = 112
    backbones: tuple[BackboneSpec, ...] = ()
    n_backbones: int = 3
    hidden_dim: int = 64

    # losses
    lambda_dice: float = 1.0
    focal_alpha: float = 0.25
    focal_gamma: float = 2.0

    # expression ensemble
    expr_scheme: ExprScheme = ExprScheme.SEVEN_AS_CLASS
    other_threshold: float = 0.5
    n_subclassifiers: int = 5
    bootstrap_fraction: float = 1.0
    bootstrap_use_all: bool = True

    # optimizer (defaults filled per task)
    optimizer: str = ""
    learning_rate: float = 0.0
    epochs: int = 0
    batch_size: int = 0
    dropout: float = 0.0

    # AU temporal head
    sequence_length: int = 256
    resample_up: int = 2
    resample_down: int = 2
    transformer_layers: int = 2
    transformer_heads: int = 4
    transformer_ffn_mult: int = 4
    positional_encoding: bool = True
    fusion_mode: str = "mean"  # "mean" or "learned"
    au_policy: AUFilterPolicy = AUFilterPolicy.DROP_FRAME
    au_threshold: float = 0.5

    # data source
    provenance: Provenance = Provenance.SYNTHETIC
    data_root: str = ""
    n_videos: int = 4
    frames_per_video: int = 25
    val_videos: int = 2
    extreme_fraction: float = 0.2
    augment: bool = False

    def validate(self) -> "ExperimentConfig":
        def require(cond: bool, msg: str):
            if not cond:
                raise ConfigError(msg)

        require(self.image_size >= 8, f"image_size: must be >= 8, got {self.image_size}")
        require(len(self.backbones) >= 1, "backbones: at least one branch spec required")
        for spec in self.backbones:
            require(len(spec.channels) >= 1 and all(c >= 1 for c in spec.channels),
                    f"backbones: invalid channel widths {spec.channels}")
            require(spec.feature_dim >= 1, f"backbones: feature_dim must be >= 1, got {spec.feature_dim}")
        if self.task is Task.VA:
            require(self.n_backbones == len(self.backbones),
                    f"n_backbones: {self.n_backbones} differs from {len(self.backbones)} branch specs")
        require(self.hidden_dim >= 1, "hidden_dim: must be >= 1")
        require(self.lambda_dice >= 0.0, f"lambda_dice: must be >= 0, got {self.lambda_dice}")
        require(0.0 < self.focal_alpha <= 1.0, f"focal_alpha: must lie in (0, 1], got {self.focal_alpha}")
        require(self.focal_gamma >= 0.0, f"focal_gamma: must be >= 0, got {self.focal_gamma}")
        require(0.0 < self.other_threshold < 1.0,
                f"other_threshold: must lie in (0, 1), got {self.other_threshold}")
        require(self.n_subclassifiers >= 1, "n_subclassifiers: must be >= 1")
        require(0.0 < self.bootstrap_fraction <= 1.0,
                f"bootstrap_fraction: must lie in (0, 1], got {self.bootstrap_fraction}")
        require(self.optimizer in ("adam", "sgd"), f"optimizer: unknown {self.optimizer!r}")
        require(self.learning_rate > 0.0, f"learning_rate: must be > 0, got {self.learning_rate}")
        require(self.epochs >= 1, "epochs: must be >= 1")
        require(self.batch_size >= 1, "batch_size: must be >= 1")
        require(0.0 <= self.dropout < 1.0, f"dropout: must lie in [0, 1), got {self.dropout}")
        require(self.sequence_length >= 1, "sequence_length: must be >= 1")
        require(self.resample_up >= 1 and self.resample_down >= 1,
                "resample_up/resample_down: must be >= 1")
        require(self.transformer_layers >= 1, "transformer_layers: must be >= 1")
        require(self.transformer_heads >= 1, "transformer_heads: must be >= 1")
        for spec in self.backbones:
            require(spec.feature_dim % self.transformer_heads == 0,
                    f"transformer_heads: feature_dim {spec.feature_dim} not divisible by "
                    f"{self.transformer_heads}")
        require(self.fusion_mode in ("mean", "learned"), f"fusion_mode: unknown {self.fusion_mode!r}")
        require(0.0 < self.au_threshold < 1.0, "au_threshold: must lie in (0, 1)")
        require(self.n_videos >= 1, "n_videos: must be >= 1")
        require(self.frames_per_video >= 1, "frames_per_video: must be >= 1")
        require(self.val_videos >= 1, "val_videos: must be >= 1")
        require(0.0 <= self.extreme_fraction < 1.0,
                f"extreme_fraction: must lie in [0, 1), got {self.extreme_fraction}")
        if self.provenance is Provenance.DISK:
            require(bool(self.data_root), "data_root: required when provenance = disk")
        return self

    # -- flat text representation ------------------------------------------

    def to_flat(self) -> dict[str, str]:
        out: dict[str, str] = {}
        for f in fields(self):
            out[f.name] = _encode_value(getattr(self, f.name))
        return out

    def save(self, path: str | Path) -> None:
        lines = [f"{k} = {v}" for k, v in self.to_flat().items()]
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")

    def content_hash(self) -> str:
        blob = "\n".join(f"{k}={v}" for k, v in sorted(self.to_flat().items()))
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]

    def derive_seed(self, stream: str) -> int:
        """Deterministic per-purpose seed derived from the root seed."""
        return derive_seed(self.seed, stream)


def derive_seed(root: int, stream: str) -> int:
    digest = hashlib.sha256(f"{root}:{stream}".encode("utf-8")).digest()
    return int.from_bytes(digest[:4], "little")


def default_config(task: Task, **overrides) -> ExperimentConfig:
    cfg = ExperimentConfig(task=task, backbones=DEFAULT_BACKBONES[task], **TASK_DEFAULTS[task])
    if task is not Task.VA:
        cfg.n_backbones = len(cfg.backbones)
    if overrides:
        cfg = replace(cfg, **overrides)
    return cfg.validate()


def _encode_value(value) -> str:
    if isinstance(value, Enum):
        return str(value.value)
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):  # backbone specs
        return "|".join(spec.encode() for spec in value)
    return str(value)


def _decode_value(name: str, text: str, target_type) -> object:
    text = text.strip()
    try:
        if target_type is Task:
            return Task(text.lower())
        if target_type is ExprScheme:
            return ExprScheme(text.lower())
        if target_type is AUFilterPolicy:
            return AUFilterPolicy(text.lower())
        if target_type is Provenance:
            return Provenance(text.lower())
        if target_type is bool:
            if text.lower() in ("true", "1", "yes"):
                return True
            if text.lower() in ("false", "0", "no"):
                return False
            raise ValueError(text)
        if target_type is int:
            return int(text)
        if target_type is float:
            return float(text)
        if target_type is str:
            return text
        if name == "backbones":
            if not text:
                return ()
            return tuple(BackboneSpec.decode(part) for part in text.split("|"))
    except ConfigError:
        raise
    except ValueError as exc:
        raise ConfigError(f"{name}: cannot parse {text!r} as {getattr(target_type, '__name__', target_type)}") from exc
    raise ConfigError(f"{name}: unsupported config field type")


_FIELD_TYPES = {
    "task": Task, "seed": int, "image_size": int, "backbones": tuple, "n_backbones": int,
    "hidden_dim": int, "lambda_dice": float, "focal_alpha": float, "focal_gamma": float,
    "expr_scheme": ExprScheme, "other_threshold": float, "n_subclassifiers": int,
    "bootstrap_fraction": float, "bootstrap_use_all": bool, "optimizer": str,
    "learning_rate": float, "epochs": int, "batch_size": int, "dropout": float,
    "sequence_length": int, "resample_up": int, "resample_down": int,
    "transformer_layers": int, "transformer_heads": int, "transformer_ffn_mult": int,
    "positional_encoding": bool, "fusion_mode": str, "au_policy": AUFilterPolicy,
    "au_threshold": float, "provenance": Provenance, "data_root": str, "n_videos": int,
    "frames_per_video": int, "val_videos": int, "extreme_fraction": float, "augment": bool,
}


def parse_config_text(text: str) -> ExperimentConfig:
    """Parse flat `key = value` text into a validated, defaulted config."""
    raw: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, _, value = stripped.partition("=")
        key = key.strip()
        if key not in _FIELD_TYPES:
            raise ConfigError(f"unknown config key: {key!r}")
        raw[key] = value.split("#", 1)[0].strip()

    for key in _FIELD_TYPES:
        env = os.environ.get(ENV_PREFIX + key.upper())
        if env is not None:
            raw[key] = env

    if "task" not in raw:
        raise ConfigError("task: required key missing")
    task = _decode_value("task", raw.pop("task"), Task)

    overrides = {
        key: _decode_value(key, value, _FIELD_TYPES[key]) for key, value in raw.items()
    }
    backbones = overrides.pop("backbones", DEFAULT_BACKBONES[task])
    n_backbones = overrides.pop("n_backbones", len(backbones))

    cfg = ExperimentConfig(
        task=task, backbones=backbones, n_backbones=n_backbones,
        **{**TASK_DEFAULTS[task], **overrides},
    )
    return cfg.validate()


def load_config(path: str | Path) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    return parse_config_text(path.read_text(encoding="utf-8"))
