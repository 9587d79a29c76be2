"""Evaluation measures: concordance for valence/arousal, per-class and
macro F1 for expressions, mean per-AU F1, and plain accuracy.

All metrics run in double precision regardless of model precision and are
computed over full concatenated prediction sets, never averaged over batches.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import AU_NAMES, NUM_AUS, NUM_EXPRESSIONS, Task
from .errors import DegenerateInputError, ShapeError, ValidationError


@dataclass
class MetricReport:
    """Flat named metric values for one evaluation run."""

    task: Task
    values: dict[str, float] = field(default_factory=dict)

    def to_text(self) -> str:
        lines = [f"task = {self.task.value}"]
        lines += [f"{k} = {v:.6f}" for k, v in self.values.items()]
        return "\n".join(lines) + "\n"

    def to_dict(self) -> dict:
        return {"task": self.task.value, "values": dict(self.values)}

    def save(self, path: str | Path) -> None:
        path = Path(path)
        path.with_suffix(".json").write_text(
            json.dumps(self.to_dict(), indent=2) + "\n", encoding="utf-8"
        )
        path.with_suffix(".txt").write_text(self.to_text(), encoding="utf-8")


def _vec64(x, name: str) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 1:
        raise ShapeError(f"{name}: expected a 1-D vector, got shape {arr.shape}")
    return arr


def ccc_metric(predictions, targets) -> float:
    """Concordance correlation coefficient in [-1, 1], population convention.

    Implemented through 2*cov, which equals the 2*rho*sigma*sigma numerator
    exactly and stays defined when one sequence is constant (result 0 if the
    means differ). A vanishing denominator raises DegenerateInputError.
    """
    p = _vec64(predictions, "predictions")
    t = _vec64(targets, "targets")
    if p.shape != t.shape:
        raise ShapeError(f"shape mismatch: {p.shape} vs {t.shape}")
    if p.size < 2:
        raise ShapeError("need at least 2 samples")
    mp, mt = p.mean(), t.mean()
    vp = ((p - mp) ** 2).mean()
    vt = ((t - mt) ** 2).mean()
    denom = vp + vt + (mp - mt) ** 2
    if denom < 1e-12:
        raise DegenerateInputError("denominator vanishes: constant inputs with equal means")
    cov = ((p - mp) * (t - mt)).mean()
    return float(2.0 * cov / denom)


def _confusion_counts(predictions, labels, n_classes: int):
    p = np.asarray(predictions, dtype=np.int64)
    l = np.asarray(labels, dtype=np.int64)
    if p.shape != l.shape or p.ndim != 1:
        raise ShapeError(f"predictions/labels must be matching 1-D vectors, got {p.shape} vs {l.shape}")
    tp = np.zeros(n_classes, dtype=np.int64)
    fp = np.zeros(n_classes, dtype=np.int64)
    fn = np.zeros(n_classes, dtype=np.int64)
    for cls in range(n_classes):
        tp[cls] = int(np.sum((p == cls) & (l == cls)))
        fp[cls] = int(np.sum((p == cls) & (l != cls)))
        fn[cls] = int(np.sum((p != cls) & (l == cls)))
    return tp, fp, fn


def f1_per_class(predictions, labels, n_classes: int) -> np.ndarray:
    """Per-class F1 = 2TP/(2TP+FP+FN); a class never seen nor predicted scores 0."""
    tp, fp, fn = _confusion_counts(predictions, labels, n_classes)
    denom = 2 * tp + fp + fn
    out = np.zeros(n_classes, dtype=np.float64)
    nonzero = denom > 0
    out[nonzero] = 2.0 * tp[nonzero] / denom[nonzero]
    return out


def f1_final_expr(predictions, labels) -> float:
    """Unweighted mean of the 8 per-class expression F1 scores (fixed divisor 8)."""
    return float(f1_per_class(predictions, labels, NUM_EXPRESSIONS).mean())


def accuracy(predictions, labels) -> float:
    p = np.asarray(predictions)
    l = np.asarray(labels)
    if p.shape != l.shape:
        raise ShapeError(f"shape mismatch: {p.shape} vs {l.shape}")
    return float(np.mean(p == l))


def mean_f1_au(prob_predictions, labels, threshold: float = 0.5) -> MetricReport:
    """Binarize at `threshold` (ties count as positive) and report per-AU
    positive-class F1 plus their mean."""
    probs = np.asarray(prob_predictions, dtype=np.float64)
    lbl = np.asarray(labels, dtype=np.int64)
    if probs.ndim != 2 or probs.shape[1] != NUM_AUS:
        raise ShapeError(f"prob_predictions: expected (N, {NUM_AUS}), got {probs.shape}")
    if lbl.shape != probs.shape:
        raise ShapeError(f"labels shape {lbl.shape} differs from predictions {probs.shape}")
    if not np.isin(lbl, (0, 1)).all():
        raise ShapeError("labels must be binary (masked frames already excluded)")
    decisions = (probs >= threshold).astype(np.int64)
    per_au = np.zeros(NUM_AUS, dtype=np.float64)
    for j in range(NUM_AUS):
        tp = int(np.sum((decisions[:, j] == 1) & (lbl[:, j] == 1)))
        fp = int(np.sum((decisions[:, j] == 1) & (lbl[:, j] == 0)))
        fn = int(np.sum((decisions[:, j] == 0) & (lbl[:, j] == 1)))
        denom = 2 * tp + fp + fn
        per_au[j] = 2.0 * tp / denom if denom > 0 else 0.0
    return au_report(per_au)


# -- report builders --------------------------------------------------------

def va_report(ccc_valence: float, ccc_arousal: float) -> MetricReport:
    for name, v in (("ccc_valence", ccc_valence), ("ccc_arousal", ccc_arousal)):
        if not -1.0 <= v <= 1.0:
            raise ValidationError(f"{name}: {v} outside [-1, 1]")
    mean = (ccc_valence + ccc_arousal) / 2.0
    # scoreboards sometimes use a x100 scale; report both to be explicit
    values = {
        "ccc_valence": ccc_valence,
        "ccc_arousal": ccc_arousal,
        "ccc_mean": mean,
        "ccc_valence_x100": 100.0 * ccc_valence,
        "ccc_arousal_x100": 100.0 * ccc_arousal,
        "ccc_mean_x100": 100.0 * mean,
    }
    return MetricReport(Task.VA, values)


def expr_report(per_class_f1: np.ndarray, acc: float) -> MetricReport:
    per_class_f1 = np.asarray(per_class_f1, dtype=np.float64)
    if per_class_f1.shape != (NUM_EXPRESSIONS,):
        raise ShapeError(f"per_class_f1: expected ({NUM_EXPRESSIONS},), got {per_class_f1.shape}")
    if ((per_class_f1 < 0) | (per_class_f1 > 1)).any() or not 0.0 <= acc <= 1.0:
        raise ValidationError("F1/accuracy values must lie in [0, 1]")
    values = {f"f1_class_{i}": float(v) for i, v in enumerate(per_class_f1)}
    values["f1_final"] = float(per_class_f1.mean())
    values["accuracy"] = float(acc)
    return MetricReport(Task.EXPR, values)


def au_report(per_au_f1: np.ndarray) -> MetricReport:
    per_au_f1 = np.asarray(per_au_f1, dtype=np.float64)
    if per_au_f1.shape != (NUM_AUS,):
        raise ShapeError(f"per_au_f1: expected ({NUM_AUS},), got {per_au_f1.shape}")
    if ((per_au_f1 < 0) | (per_au_f1 > 1)).any():
        raise ValidationError("F1 values must lie in [0, 1]")
    values = {f"f1_{AU_NAMES[j]}": float(v) for j, v in enumerate(per_au_f1)}
    values["f1_mean"] = float(per_au_f1.mean())
    return MetricReport(Task.AU, values)
