import numpy as np
import pytest

from affectlab.config import default_config
from affectlab.core import (
    AULabelVector,
    ExpressionLabel,
    FrameRecord,
    Task,
    VALabel,
    VideoSequence,
)
from affectlab.data import DatasetSplit, SplitName


def make_image(size: int = 16, value: float = 0.5) -> np.ndarray:
    return np.full((size, size, 3), value, dtype=np.float32)


def make_frame(video_id="vid", frame_index=0, size=16, va=None, expr=None, aus=None):
    return FrameRecord(video_id, frame_index, make_image(size), va=va, expr=expr, aus=aus)


def make_split(frames_by_video: dict, name=SplitName.TRAIN) -> DatasetSplit:
    sequences = tuple(
        VideoSequence(vid, tuple(frames)) for vid, frames in frames_by_video.items()
    )
    return DatasetSplit(name, sequences)


def va_frames(video_id, values, size=16):
    return [
        make_frame(video_id, i, size, va=VALabel(v, a)) for i, (v, a) in enumerate(values)
    ]


def expr_frames(video_id, labels, size=16):
    return [
        make_frame(video_id, i, size, expr=ExpressionLabel(v)) for i, v in enumerate(labels)
    ]


def au_frames(video_id, rows, size=16):
    return [
        make_frame(video_id, i, size, aus=AULabelVector(tuple(row)))
        for i, row in enumerate(rows)
    ]


def tiny_config(task: Task, **overrides):
    """Fast settings for unit tests; acceptance uses the real smoke configs."""
    base = dict(
        image_size=16, n_videos=2, frames_per_video=8, epochs=2, batch_size=8,
        val_videos=1, seed=0,
    )
    if task is Task.AU:
        base["sequence_length"] = 8
    base.update(overrides)
    return default_config(task, **base)


@pytest.fixture(scope="session")
def rng():
    return np.random.default_rng(20240)
