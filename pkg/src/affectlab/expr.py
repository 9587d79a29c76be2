"""Expression classification: bagging over sub-classifiers trained with
CE + lambda*Dice, and a parameterless rule-based meta-classifier.

The meta-classifier is only used at prediction time. Its vote: if any
sub-classifier decision is in {1, 2, 3, 5}, the final category is the
highest-priority present class under 2 > 3 > 5 > 1; otherwise a majority
vote, with ties broken by the highest mean sub-classifier probability and,
failing that, by the smallest class index.
"""

from __future__ import annotations

import copy
from collections import Counter
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .backbones import SmallCNN, images_to_tensor
from .config import ExperimentConfig, ExprScheme
from .core import FrameRecord, NUM_EXPRESSIONS, OTHER_CLASS, PredictionSet, Task, ExprPrediction, VideoSequence
from .data import AugmentationConfig, DatasetSplit, augment
from .errors import ConfigError, ShapeError
from .losses import composite_classification_loss
from .metrics import f1_final_expr
from .trainutil import epoch_batches, make_optimizer, seed_torch

PRIORITY_ORDER = (2, 3, 5, 1)
_REKEY_SEP = "#"


class ExprNet(nn.Module):
    """One sub-classifier: small-CNN branch plus a linear class head."""

    def __init__(self, config: ExperimentConfig, arch_id: int):
        super().__init__()
        pool = config.backbones
        spec = pool[arch_id % len(pool)]
        self.backbone = SmallCNN(spec, dropout=config.dropout)
        self.n_classes = 8 if config.expr_scheme is ExprScheme.SEVEN_AS_CLASS else 7
        self.head = nn.Linear(spec.feature_dim, self.n_classes)

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        return self.head(self.backbone(images))


@dataclass
class SubClassifier:
    arch_id: int
    bootstrap_seed: int
    scheme: ExprScheme
    model: ExprNet


@dataclass(frozen=True)
class EnsemblePrediction:
    sub_decisions: tuple[int, ...]
    sub_probabilities: np.ndarray  # (n_subs, 8)
    final_class: int


def original_video_id(video_id: str) -> str:
    """Strip the `#k` suffix added when bootstrap resampling re-keys frames."""
    return video_id.split(_REKEY_SEP, 1)[0]


def bootstrap_sample(
    split: DatasetSplit, fraction: float, seed: int, use_all: bool = False
) -> DatasetSplit:
    """Sample frames with replacement (size = fraction * N), keyed by draw.

    With `use_all` the input split is returned unchanged. Resampled frames
    are wrapped in single-frame sequences re-keyed `<video_id>#<draw>` so the
    split keeps unique video ids; `original_video_id` recovers the source.
    """
    if not (0.0 < fraction <= 1.0):
        raise ConfigError(f"bootstrap fraction must lie in (0, 1], got {fraction}")
    if use_all:
        return split
    frames = split.frames()
    n = max(1, round(fraction * len(frames)))
    rng = np.random.default_rng(seed)
    draws = rng.integers(0, len(frames), size=n)
    sequences = []
    for k, which in enumerate(draws):
        src = frames[int(which)]
        new_id = f"{src.video_id}{_REKEY_SEP}{k:05d}"
        record = FrameRecord(new_id, 0, src.image, va=src.va, expr=src.expr, aus=src.aus)
        sequences.append(VideoSequence(new_id, (record,)))
    return DatasetSplit(split.name, tuple(sequences), split.provenance)


def _stack_expr_split(split: DatasetSplit):
    frames = split.frames()
    images = np.stack([f.image for f in frames])
    labels = np.array([f.expr.value for f in frames], dtype=np.int64)
    return images, labels


def train_subclassifier(
    split: DatasetSplit,
    arch_id: int,
    config: ExperimentConfig,
    val_split: Optional[DatasetSplit] = None,
    bootstrap_seed: int = 0,
) -> tuple[SubClassifier, list[float]]:
    """Train one sub-classifier with the composite CE + lambda*Dice loss.

    With config.augment on, every image is re-augmented each epoch (rotation,
    resized crop, horizontal flip, color jitter) from a derived rng stream.
    When a validation split is given, the parameters with the best validation
    macro-F1 are kept; otherwise the final epoch wins.
    Returns (sub-classifier, per-epoch loss curve).
    """
    if split.n_frames() == 0:
        raise ConfigError("sub-classifier training needs a non-empty split")
    images, labels = _stack_expr_split(split)
    if config.expr_scheme is ExprScheme.SEVEN_BY_THRESHOLD and (labels == OTHER_CLASS).any():
        raise ConfigError("threshold scheme: class 7 must be filtered from the training split")

    seed_torch(config.derive_seed(f"expr/init/{arch_id}"))
    net = ExprNet(config, arch_id)
    optimizer = make_optimizer(net.parameters(), config)
    rng = np.random.default_rng(config.derive_seed(f"expr/batches/{arch_id}"))
    aug_rng = np.random.default_rng(config.derive_seed(f"expr/augment/{arch_id}"))
    aug_config = AugmentationConfig()
    images_t = images_to_tensor(images)
    labels_t = torch.from_numpy(labels)

    best_state, best_f1 = None, -1.0
    curve = []
    for _ in range(config.epochs):
        if config.augment:
            images_t = images_to_tensor(
                np.stack([augment(img, aug_config, aug_rng) for img in images])
            )
        net.train()
        total, count = 0.0, 0
        for idx in epoch_batches(len(labels), config.batch_size, rng):
            batch = torch.from_numpy(idx)
            logits = net(images_t[batch])
            loss = composite_classification_loss(logits, labels_t[batch], config.lambda_dice).value
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            total += float(loss.detach()) * len(idx)
            count += len(idx)
        curve.append(total / count)
        if val_split is not None:
            sub = SubClassifier(arch_id, bootstrap_seed, config.expr_scheme, net)
            val_images, val_labels = _stack_expr_split(val_split)
            decisions, _ = predict_sub(sub, val_images, config.expr_scheme, config.other_threshold)
            score = f1_final_expr(decisions, val_labels)
            if score > best_f1:
                best_f1 = score
                best_state = copy.deepcopy(net.state_dict())
    if best_state is not None:
        net.load_state_dict(best_state)
    return SubClassifier(arch_id, bootstrap_seed, config.expr_scheme, net), curve


def predict_sub(
    sub: SubClassifier, images, scheme: ExprScheme, tau: float
) -> tuple[np.ndarray, np.ndarray]:
    """Per-image (decision, 8-class probability row) for one sub-classifier.

    Under the threshold scheme the head has 7 outputs; a frame whose maximum
    probability falls below tau is assigned class 7 and the returned 8-vector
    carries 0 for the class-7 slot.
    """
    net = sub.model
    batch = images_to_tensor(images)
    net.eval()
    with torch.no_grad():
        probs = F.softmax(net(batch), dim=1).numpy().astype(np.float64)
    n = probs.shape[0]
    full = np.zeros((n, NUM_EXPRESSIONS), dtype=np.float64)
    full[:, : probs.shape[1]] = probs
    if scheme is ExprScheme.SEVEN_AS_CLASS:
        decisions = full.argmax(axis=1)
    else:
        if probs.shape[1] != 7:
            raise ShapeError(f"threshold scheme expects a 7-way head, got {probs.shape[1]}")
        best = probs.argmax(axis=1)
        decisions = np.where(probs.max(axis=1) >= tau, best, OTHER_CLASS)
    return decisions.astype(np.int64), full


def meta_vote(decisions: Sequence[int], probabilities: Optional[np.ndarray] = None) -> int:
    """Parameterless fusing rule over sub-classifier decisions (see module doc)."""
    decisions = [int(d) for d in decisions]
    if not decisions:
        raise ShapeError("meta_vote needs at least one decision")
    present = set(decisions)
    for cls in PRIORITY_ORDER:
        if cls in present:
            return cls
    counts = Counter(decisions)
    top = max(counts.values())
    tied = sorted(cls for cls, cnt in counts.items() if cnt == top)
    if len(tied) == 1:
        return tied[0]
    if probabilities is not None:
        probs = np.asarray(probabilities, dtype=np.float64)
        means = probs.mean(axis=0)
        best = max(tied, key=lambda cls: (means[cls], -cls))
        # distinct mean probabilities break the tie; exact equality falls
        # through to the smallest class index
        if sum(1 for cls in tied if means[cls] == means[best]) == 1:
            return best
    return tied[0]


def predict_ensemble(
    subs: Sequence[SubClassifier], images, scheme: ExprScheme, tau: float
) -> list[EnsemblePrediction]:
    """Run every sub-classifier, then fuse each frame's decisions by meta_vote."""
    if not subs:
        raise ConfigError("ensemble needs at least one sub-classifier")
    all_decisions = []
    all_probs = []
    for sub in subs:
        decisions, probs = predict_sub(sub, images, scheme, tau)
        all_decisions.append(decisions)
        all_probs.append(probs)
    decisions_matrix = np.stack(all_decisions, axis=1)  # (n_images, n_subs)
    probs_tensor = np.stack(all_probs, axis=1)  # (n_images, n_subs, 8)
    out = []
    for i in range(decisions_matrix.shape[0]):
        final = meta_vote(decisions_matrix[i].tolist(), probs_tensor[i])
        out.append(
            EnsemblePrediction(tuple(decisions_matrix[i].tolist()), probs_tensor[i], final)
        )
    return out


def predict_expr(
    subs: Sequence[SubClassifier], split: DatasetSplit, config: ExperimentConfig,
    batch_size: int = 64,
) -> PredictionSet:
    """Ensemble predictions for every frame; probabilities average the subs."""
    preds = PredictionSet(Task.EXPR)
    for seq in split.sequences:
        for start in range(0, len(seq.frames), batch_size):
            chunk = seq.frames[start:start + batch_size]
            images = np.stack([f.image for f in chunk])
            fused = predict_ensemble(subs, images, config.expr_scheme, config.other_threshold)
            for f, ep in zip(chunk, fused):
                mean_probs = ep.sub_probabilities.mean(axis=0)
                mean_probs = mean_probs / mean_probs.sum()
                preds.add(
                    f.video_id, f.frame_index,
                    ExprPrediction(ep.final_class, tuple(float(q) for q in mean_probs)),
                )
    return preds
