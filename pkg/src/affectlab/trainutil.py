"""Small shared helpers for the three training loops."""

from __future__ import annotations

from typing import Iterator

import numpy as np
import torch

from .config import ExperimentConfig
from .errors import ConfigError


def seed_torch(seed: int) -> None:
    torch.manual_seed(seed)


def make_optimizer(params, config: ExperimentConfig) -> torch.optim.Optimizer:
    if config.optimizer == "adam":
        return torch.optim.Adam(params, lr=config.learning_rate)
    if config.optimizer == "sgd":
        return torch.optim.SGD(params, lr=config.learning_rate)
    raise ConfigError(f"optimizer: unknown {config.optimizer!r}")


def epoch_batches(
    n_items: int,
    batch_size: int,
    rng: np.random.Generator,
    min_batch: int = 1,
) -> Iterator[np.ndarray]:
    """Shuffled index batches; a tail smaller than min_batch merges into the
    previous batch so no undersized batch is ever emitted."""
    if n_items < min_batch:
        raise ConfigError(f"split too small: {n_items} item(s), need at least {min_batch}")
    order = rng.permutation(n_items)
    starts = list(range(0, n_items, batch_size))
    batches = [order[s:s + batch_size] for s in starts]
    if len(batches) > 1 and len(batches[-1]) < min_batch:
        batches[-2] = np.concatenate([batches[-2], batches[-1]])
        batches.pop()
    yield from batches
