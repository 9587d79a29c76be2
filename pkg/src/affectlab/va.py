"""Valence/arousal estimation: three fused backbone branches, per-dimension
polarity classifiers that gate extreme frames, and coupled regressors.

Inference gates each dimension independently: when the polarity classifier
declares a frame extreme the emitted value is exactly +/-1.0 and the
regressor is bypassed; interior frames get the squashed regressor output.
Valence penultimate features feed the arousal head (one-directional
coupling), reflecting that arousal rises with extreme valence.

Training runs in two stages: the polarity classifiers (with the backbones)
first, then the regressors on interior-labeled frames with concordance loss
computed per optimization batch.
"""

from __future__ import annotations

import warnings

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .backbones import SmallCNN, images_to_tensor
from .config import ExperimentConfig
from .core import Polarity, PolarityLabel, PredictionSet, Task, VAPrediction, polarity_of
from .data import DatasetSplit
from .errors import ConfigError, ShapeError
from .losses import ccc_loss, polarity_cross_entropy
from .trainutil import epoch_batches, make_optimizer, seed_torch


class VAModel(nn.Module):
    """Fusion model: concat(backbone features) -> polarity heads + regressors."""

    def __init__(self, config: ExperimentConfig):
        super().__init__()
        self.backbones = nn.ModuleList(
            SmallCNN(spec, dropout=config.dropout) for spec in config.backbones
        )
        self.fused_dim = sum(spec.feature_dim for spec in config.backbones)
        hidden = config.hidden_dim
        # zero-initialized polarity heads emit uniform probabilities pre-training
        self.valence_polarity = nn.Linear(self.fused_dim, 3)
        self.arousal_polarity = nn.Linear(self.fused_dim, 3)
        for head in (self.valence_polarity, self.arousal_polarity):
            nn.init.zeros_(head.weight)
            nn.init.zeros_(head.bias)
        self.valence_trunk = nn.Sequential(nn.Linear(self.fused_dim, hidden), nn.ReLU())
        self.valence_out = nn.Linear(hidden, 1)
        self.arousal_trunk = nn.Sequential(nn.Linear(self.fused_dim + hidden, hidden), nn.ReLU())
        self.arousal_out = nn.Linear(hidden, 1)

    def fuse(self, images: torch.Tensor) -> torch.Tensor:
        return torch.cat([b(images) for b in self.backbones], dim=1)

    def polarity_logits(self, fused: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        return self.valence_polarity(fused), self.arousal_polarity(fused)

    def regress(self, fused: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        """Returns (valence, arousal, valence penultimate features)."""
        h_v = self.valence_trunk(fused)
        valence = torch.tanh(self.valence_out(h_v)).squeeze(-1)
        h_a = self.arousal_trunk(torch.cat([fused, h_v], dim=1))
        arousal = torch.tanh(self.arousal_out(h_a)).squeeze(-1)
        return valence, arousal, h_v

    def regressor_parameters(self):
        for module in (self.valence_trunk, self.valence_out, self.arousal_trunk, self.arousal_out):
            yield from module.parameters()

    def polarity_parameters(self):
        yield from self.valence_polarity.parameters()
        yield from self.arousal_polarity.parameters()


def build_va_model(config: ExperimentConfig) -> VAModel:
    seed_torch(config.derive_seed("va/init"))
    return VAModel(config)


def fuse_features(model: VAModel, image: np.ndarray) -> np.ndarray:
    """Concatenated backbone features of one image, in config branch order."""
    batch = images_to_tensor(image)
    model.eval()
    with torch.no_grad():
        fused = model.fuse(batch)
    return fused[0].numpy()


def predict_polarity(model: VAModel, fused) -> tuple[np.ndarray, np.ndarray]:
    """Probability 3-vectors over (neg-extreme, interior, pos-extreme) per dimension."""
    t = torch.as_tensor(np.asarray(fused, dtype=np.float32))
    single = t.ndim == 1
    if single:
        t = t[None]
    if t.shape[1] != model.fused_dim:
        raise ShapeError(f"fused dim {t.shape[1]} differs from model {model.fused_dim}")
    model.eval()
    with torch.no_grad():
        v_logits, a_logits = model.polarity_logits(t)
        v_probs = F.softmax(v_logits, dim=1).numpy()
        a_probs = F.softmax(a_logits, dim=1).numpy()
    if single:
        return v_probs[0], a_probs[0]
    return v_probs, a_probs


GATED_VALUE = {Polarity.NEG_EXTREME: -1.0, Polarity.POS_EXTREME: 1.0}


def forward_va(model: VAModel, images) -> tuple[np.ndarray, np.ndarray, list[PolarityLabel]]:
    """Gated inference: per dimension, an extreme polarity argmax emits a
    bit-exact +/-1.0; interior frames get the regressor output in (-1, 1)."""
    batch = images_to_tensor(images)
    model.eval()
    with torch.no_grad():
        fused = model.fuse(batch)
        v_logits, a_logits = model.polarity_logits(fused)
        v_reg, a_reg, _ = model.regress(fused)
    v_pol = v_logits.argmax(dim=1).numpy()
    a_pol = a_logits.argmax(dim=1).numpy()
    valence = v_reg.numpy().astype(np.float64)
    arousal = a_reg.numpy().astype(np.float64)
    gating = []
    for i in range(batch.shape[0]):
        pv, pa = Polarity(int(v_pol[i])), Polarity(int(a_pol[i]))
        if pv is not Polarity.INTERIOR:
            valence[i] = GATED_VALUE[pv]
        if pa is not Polarity.INTERIOR:
            arousal[i] = GATED_VALUE[pa]
        gating.append(PolarityLabel(pv, pa))
    return valence, arousal, gating


def _stack_va_split(split: DatasetSplit):
    frames = split.frames()
    images = np.stack([f.image for f in frames]) if frames else np.zeros((0, 1, 1, 3))
    labels = np.array([[f.va.valence, f.va.arousal] for f in frames], dtype=np.float64)
    return frames, images, labels


def train_polarity(model: VAModel, split: DatasetSplit, config: ExperimentConfig):
    """Stage 1: minimize polarity cross-entropy per dimension.

    Updates backbones and polarity heads; regressor heads are untouched.
    Returns (model, per-epoch loss curve).
    """
    frames, images, labels = _stack_va_split(split)
    if not frames:
        raise ConfigError("polarity training needs a non-empty filtered split")
    v_classes = np.array([polarity_of(v).value for v in labels[:, 0]], dtype=np.int64)
    a_classes = np.array([polarity_of(a).value for a in labels[:, 1]], dtype=np.int64)
    if (v_classes == Polarity.INTERIOR.value).all() and (a_classes == Polarity.INTERIOR.value).all():
        warnings.warn("split has no extreme labels; polarity training is degenerate")

    params = list(p for b in model.backbones for p in b.parameters())
    params += list(model.polarity_parameters())
    optimizer = make_optimizer(params, config)
    rng = np.random.default_rng(config.derive_seed("va/polarity/batches"))
    images_t = images_to_tensor(images)
    v_t = torch.from_numpy(v_classes)
    a_t = torch.from_numpy(a_classes)

    curve = []
    model.train()
    for _ in range(config.epochs):
        total, count = 0.0, 0
        for idx in epoch_batches(len(frames), config.batch_size, rng):
            batch = torch.from_numpy(idx)
            fused = model.fuse(images_t[batch])
            v_logits, a_logits = model.polarity_logits(fused)
            loss = (
                polarity_cross_entropy(v_logits, v_t[batch]).value
                + polarity_cross_entropy(a_logits, a_t[batch]).value
            )
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            total += float(loss.detach()) * len(idx)
            count += len(idx)
        curve.append(total / count)
    return model, curve


def train_va(model: VAModel, split: DatasetSplit, config: ExperimentConfig):
    """Stage 2: minimize per-batch concordance loss on interior frames.

    Each dimension trains on the frames whose own label is interior (extreme
    frames are excluded, mirroring inference gating). Only the regressor
    heads are optimized: the backbones must stay frozen or the polarity
    classifiers trained in stage 1 would silently lose their features.
    Returns (model, per-epoch loss curve).
    """
    frames, images, labels = _stack_va_split(split)
    if not frames:
        raise ConfigError("regression training needs a non-empty filtered split")
    interior = {
        "v": np.flatnonzero([polarity_of(v) is Polarity.INTERIOR for v in labels[:, 0]]),
        "a": np.flatnonzero([polarity_of(a) is Polarity.INTERIOR for a in labels[:, 1]]),
    }
    for dim, idx in interior.items():
        if len(idx) < 2:
            raise ConfigError(f"need at least 2 interior frames for dimension {dim!r}, got {len(idx)}")

    optimizer = make_optimizer(list(model.regressor_parameters()), config)
    rng = np.random.default_rng(config.derive_seed("va/regression/batches"))
    images_t = images_to_tensor(images)
    targets = torch.from_numpy(labels.astype(np.float32))

    curve = []
    model.train()
    for _ in range(config.epochs):
        total, count = 0.0, 0
        for dim_key, col in (("v", 0), ("a", 1)):
            pool = interior[dim_key]
            for sub in epoch_batches(len(pool), config.batch_size, rng, min_batch=2):
                idx = torch.from_numpy(pool[sub])
                fused = model.fuse(images_t[idx])
                valence, arousal, _ = model.regress(fused)
                pred = valence if col == 0 else arousal
                loss = ccc_loss(pred, targets[idx, col]).value
                optimizer.zero_grad()
                loss.backward()
                optimizer.step()
                total += float(loss.detach())
                count += 1
        curve.append(total / count)
    return model, curve


def predict_va(model: VAModel, split: DatasetSplit, batch_size: int = 64) -> PredictionSet:
    """Gated predictions for every frame of the split."""
    preds = PredictionSet(Task.VA)
    for seq in split.sequences:
        for start in range(0, len(seq.frames), batch_size):
            chunk = seq.frames[start:start + batch_size]
            images = np.stack([f.image for f in chunk])
            valence, arousal, _ = forward_va(model, images)
            for f, v, a in zip(chunk, valence, arousal):
                preds.add(f.video_id, f.frame_index, VAPrediction(float(v), float(a)))
    return preds
