"""Temporal action-unit detection: per-frame backbone features feed three
parallel pipelines whose 12-way logits are fused.

Pipeline 1: transformer block -> linear head.
Pipeline 2: time resampling -> per-frame linear head (no temporal mixing).
Pipeline 3: time resampling -> transformer block -> linear head.

Fusion is the unweighted mean of the three logit tensors (a learned-weight
variant is config-gated). Videos are tiled into fixed-length windows with
zero-padded tails; padded positions carry a validity mask and are excluded
from loss, metrics, and exported predictions.
"""

from __future__ import annotations

import math

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .backbones import SmallCNN, images_to_tensor
from .config import AUFilterPolicy, ExperimentConfig
from .core import AUPrediction, NUM_AUS, PredictionSet, Task
from .data import DatasetSplit
from .errors import ConfigError, ShapeError
from .losses import focal_loss
from .trainutil import make_optimizer, seed_torch


class SinusoidalPositionalEncoding(nn.Module):
    def __init__(self, model_dim: int, max_len: int = 4096):
        super().__init__()
        position = torch.arange(max_len, dtype=torch.float32).unsqueeze(1)
        div = torch.exp(torch.arange(0, model_dim, 2).float() * (-math.log(10000.0) / model_dim))
        pe = torch.zeros(max_len, model_dim)
        pe[:, 0::2] = torch.sin(position * div)
        pe[:, 1::2] = torch.cos(position * div[: pe[:, 1::2].shape[1]])
        self.register_buffer("pe", pe)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return x + self.pe[: x.shape[1]][None]


class TemporalTransformerBlock(nn.Module):
    """Encoder stack with sinusoidal positions added at block input.

    `use_positional_encoding=False` is a diagnostic switch that makes the
    block permutation-equivariant along time.
    """

    def __init__(
        self,
        model_dim: int,
        layers: int,
        heads: int,
        feedforward_dim: int,
        dropout: float,
        use_positional_encoding: bool = True,
    ):
        super().__init__()
        if model_dim % heads != 0:
            raise ConfigError(f"model_dim {model_dim} not divisible by {heads} heads")
        self.positional = SinusoidalPositionalEncoding(model_dim)
        self.use_positional_encoding = use_positional_encoding
        layer = nn.TransformerEncoderLayer(
            d_model=model_dim, nhead=heads, dim_feedforward=feedforward_dim,
            dropout=dropout, batch_first=True,
        )
        self.encoder = nn.TransformerEncoder(layer, num_layers=layers, enable_nested_tensor=False)

    def forward(self, x: torch.Tensor, padding_mask: torch.Tensor | None = None) -> torch.Tensor:
        if self.use_positional_encoding:
            x = self.positional(x)
        return self.encoder(x, src_key_padding_mask=padding_mask)


def resample(features: torch.Tensor, factor_up: int, factor_down: int) -> torch.Tensor:
    """Linear up-sampling along time followed by strided decimation.

    Up-sampling inserts `factor_up - 1` interpolated points between adjacent
    samples (grid positions i / factor_up), so original samples are
    preserved exactly; decimation then takes every `factor_down`-th point.
    Raises ConfigError unless the round trip restores the input length.
    """
    if factor_up < 1 or factor_down < 1:
        raise ConfigError("resample factors must be >= 1")
    squeeze = features.ndim == 2
    if squeeze:
        features = features[None]
    if features.ndim != 3:
        raise ShapeError(f"expected (T, D) or (B, T, D) features, got {tuple(features.shape)}")
    b, t, d = features.shape
    up_len = (t - 1) * factor_up + 1
    out_len = (up_len - 1) // factor_down + 1
    if out_len != t:
        raise ConfigError(
            f"resample round trip changes length {t} -> {out_len} "
            f"(up {factor_up}, down {factor_down})"
        )
    if t == 1 or factor_up == 1 and factor_down == 1:
        out = features if factor_down == 1 else features[:, ::factor_down]
    else:
        positions = torch.arange(0, up_len, factor_down, dtype=torch.float64) / factor_up
        left = positions.floor().long().clamp(max=t - 1)
        right = (left + 1).clamp(max=t - 1)
        frac = (positions - left.to(torch.float64)).to(features.dtype).view(1, -1, 1)
        out = features[:, left] * (1.0 - frac) + features[:, right] * frac
    return out[0] if squeeze else out


class AUModel(nn.Module):
    def __init__(self, config: ExperimentConfig):
        super().__init__()
        spec = config.backbones[0]
        d = spec.feature_dim
        self.backbone = SmallCNN(spec, dropout=config.dropout)
        self.feature_dim = d
        self.sequence_length = config.sequence_length
        self.factor_up = config.resample_up
        self.factor_down = config.resample_down
        block = lambda: TemporalTransformerBlock(
            d, config.transformer_layers, config.transformer_heads,
            config.transformer_ffn_mult * d, config.dropout,
            use_positional_encoding=config.positional_encoding,
        )
        self.pipeline1_block = block()
        self.pipeline1_head = nn.Linear(d, NUM_AUS)
        self.pipeline2_head = nn.Linear(d, NUM_AUS)
        self.pipeline3_block = block()
        self.pipeline3_head = nn.Linear(d, NUM_AUS)
        self.fusion_mode = config.fusion_mode
        if self.fusion_mode == "learned":
            self.fusion_logits = nn.Parameter(torch.zeros(3))

    def pipelines(self, features: torch.Tensor, padding_mask: torch.Tensor | None = None):
        """(B, T, D) features -> three (B, T, 12) logit tensors."""
        p1 = self.pipeline1_head(self.pipeline1_block(features, padding_mask))
        resampled = resample(features, self.factor_up, self.factor_down)
        p2 = self.pipeline2_head(resampled)
        p3 = self.pipeline3_head(self.pipeline3_block(resampled, padding_mask))
        return p1, p2, p3

    def fuse(self, pipeline_logits) -> torch.Tensor:
        stacked = torch.stack(pipeline_logits)
        if self.fusion_mode == "learned":
            weights = F.softmax(self.fusion_logits, dim=0).view(3, 1, 1, 1)
            return (weights * stacked).sum(dim=0)
        return stacked.mean(dim=0)

    def forward(self, features: torch.Tensor, padding_mask: torch.Tensor | None = None):
        logits = self.pipelines(features, padding_mask)
        return self.fuse(logits), logits


def build_au_model(config: ExperimentConfig) -> AUModel:
    seed_torch(config.derive_seed("au/init"))
    return AUModel(config)


def extract_sequence_features(
    frames, backbone: SmallCNN, sequence_length: int, batch_size: int = 64
) -> tuple[torch.Tensor, torch.Tensor]:
    """Backbone features for one window: (T, D) rows plus a validity mask.

    `frames` is an ordered window of at most `sequence_length` FrameRecords;
    shorter tails are zero-padded and flagged False in the mask.
    """
    if len(frames) > sequence_length:
        raise ShapeError(f"window of {len(frames)} frames exceeds sequence length {sequence_length}")
    if not frames:
        raise ShapeError("window must contain at least one frame")
    chunks = []
    with torch.no_grad():
        for start in range(0, len(frames), batch_size):
            images = np.stack([f.image for f in frames[start:start + batch_size]])
            chunks.append(backbone(images_to_tensor(images)))
    feats = torch.cat(chunks, dim=0)
    t, d = feats.shape
    out = torch.zeros(sequence_length, d, dtype=feats.dtype)
    out[:t] = feats
    mask = torch.zeros(sequence_length, dtype=torch.bool)
    mask[:t] = True
    return out, mask


def _windows(split: DatasetSplit, sequence_length: int):
    """Non-overlapping windows of frames per video; tails stay short."""
    for seq in split.sequences:
        for start in range(0, len(seq.frames), sequence_length):
            yield seq.frames[start:start + sequence_length]


def _window_tensors(window, sequence_length: int, policy: AUFilterPolicy):
    """Images, labels, and loss mask for one window, padded to full length."""
    t = len(window)
    images = np.zeros((sequence_length,) + window[0].image.shape, dtype=np.float32)
    labels = np.zeros((sequence_length, NUM_AUS), dtype=np.float32)
    mask = np.zeros((sequence_length, NUM_AUS), dtype=np.float32)
    for i, f in enumerate(window):
        images[i] = f.image
        values = f.aus.as_array()
        annotated = values >= 0
        labels[i, annotated] = values[annotated]
        mask[i] = f.aus.annotation_mask() if policy is AUFilterPolicy.MASK_CELLS else 1.0
    valid = np.zeros(sequence_length, dtype=bool)
    valid[:t] = True
    return images, labels, mask, valid


def train_au(model: AUModel, split: DatasetSplit, config: ExperimentConfig):
    """Minimize focal loss on the sigmoid of the fused logits.

    Windows are tiled per video with stride = sequence length; padded
    positions and unannotated cells contribute zero loss through the mask.
    Returns (model, per-epoch loss curve).
    """
    windows = list(_windows(split, config.sequence_length))
    if not windows:
        raise ConfigError("AU training needs a non-empty filtered split")
    tensors = [_window_tensors(w, config.sequence_length, config.au_policy) for w in windows]
    images = torch.from_numpy(np.stack([t[0] for t in tensors])).permute(0, 1, 4, 2, 3)
    labels = torch.from_numpy(np.stack([t[1] for t in tensors]))
    cell_mask = torch.from_numpy(np.stack([t[2] for t in tensors]))
    valid = torch.from_numpy(np.stack([t[3] for t in tensors]))
    loss_mask = cell_mask * valid[..., None].float()

    optimizer = make_optimizer(model.parameters(), config)
    rng = np.random.default_rng(config.derive_seed("au/batches"))
    n = len(windows)

    curve = []
    model.train()
    for _ in range(config.epochs):
        order = rng.permutation(n)
        total, count = 0.0, 0
        for start in range(0, n, config.batch_size):
            idx = torch.from_numpy(order[start:start + config.batch_size])
            b, t = idx.shape[0], config.sequence_length
            flat = images[idx].reshape(b * t, *images.shape[2:])
            feats = model.backbone(flat).reshape(b, t, -1)
            padding = ~valid[idx]
            fused, _ = model(feats, padding_mask=padding)
            probs = torch.sigmoid(fused)
            loss = focal_loss(
                probs, labels[idx], mask=loss_mask[idx],
                alpha=config.focal_alpha, gamma=config.focal_gamma,
            ).value
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            total += float(loss.detach()) * b
            count += b
        curve.append(total / count)
    return model, curve


def predict_au(model: AUModel, split: DatasetSplit, threshold: float = 0.5,
               sequence_length: int | None = None) -> PredictionSet:
    """Sigmoid probabilities and thresholded decisions per frame and AU.

    Windows tile each video without overlap, so every frame is predicted
    exactly once; padded tail positions are dropped. A probability equal to
    the threshold counts as positive.
    """
    if sequence_length is None:
        sequence_length = model.sequence_length
    preds = PredictionSet(Task.AU)
    model.eval()
    with torch.no_grad():
        for window in _windows(split, sequence_length):
            feats, valid = extract_sequence_features(window, model.backbone, sequence_length)
            fused, _ = model(feats[None], padding_mask=~valid[None])
            probs = torch.sigmoid(fused[0]).numpy().astype(np.float64)
            for i, frame in enumerate(window):
                row = np.clip(probs[i], 0.0, 1.0)
                decisions = tuple(int(q >= threshold) for q in row)
                preds.add(
                    frame.video_id, frame.frame_index,
                    AUPrediction(tuple(float(q) for q in row), decisions),
                )
    return preds
