"""Small configurable CNN feature extractors.

Each branch is a stack of stride-2 3x3 conv blocks followed by global average
pooling and a linear projection to the configured feature dimension. These
stand in for full-scale pretrained networks at desk scale; the feature-vector
contract (one fixed-dimension vector per image) is the same.
"""

from __future__ import annotations

import numpy as np
import torch
import torch.nn as nn

from .config import BackboneSpec
from .errors import ShapeError


POOL_GRID = 4  # coarse spatial grid kept after pooling; 1x1 would discard layout


class SmallCNN(nn.Module):
    def __init__(self, spec: BackboneSpec, in_channels: int = 3, dropout: float = 0.0):
        super().__init__()
        layers: list[nn.Module] = []
        prev = in_channels
        for width in spec.channels:
            layers += [nn.Conv2d(prev, width, kernel_size=3, stride=2, padding=1), nn.ReLU()]
            prev = width
        self.body = nn.Sequential(*layers)
        self.pool = nn.AdaptiveAvgPool2d(POOL_GRID)
        self.dropout = nn.Dropout(dropout)
        self.proj = nn.Linear(prev * POOL_GRID * POOL_GRID, spec.feature_dim)
        self.feature_dim = spec.feature_dim

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        if images.ndim != 4 or images.shape[1] != 3:
            raise ShapeError(f"expected (N, 3, H, W) images, got {tuple(images.shape)}")
        x = self.body(images)
        x = self.pool(x).flatten(1)
        return self.proj(self.dropout(x))


def images_to_tensor(images: np.ndarray | list[np.ndarray]) -> torch.Tensor:
    """Stack HxWxC float images into an (N, C, H, W) float32 batch."""
    if isinstance(images, list):
        images = np.stack(images)
    arr = np.asarray(images, dtype=np.float32)
    if arr.ndim == 3:
        arr = arr[None]
    if arr.ndim != 4 or arr.shape[-1] != 3:
        raise ShapeError(f"expected (N, H, W, 3) images, got {arr.shape}")
    return torch.from_numpy(np.ascontiguousarray(arr.transpose(0, 3, 1, 2)))
