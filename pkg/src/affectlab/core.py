"""Shared domain types for the three affect tasks.

All types are immutable value objects after construction and safe to share
across threads. Construction is permissive where raw annotation values can
carry sentinels (-5 valence/arousal, -1 expression, -1 action-unit entries);
`validate_frame` enforces the post-filtering invariants.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Optional, Union

import numpy as np

from .errors import DomainError, ValidationError


class Task(Enum):
    VA = "va"
    EXPR = "expr"
    AU = "au"


class Polarity(Enum):
    """3-way class of a valence/arousal value: exact -1, interior, exact +1."""

    NEG_EXTREME = 0
    INTERIOR = 1
    POS_EXTREME = 2


# Canonical 12-AU ordering used everywhere: files, tensors, reports.
AU_NAMES = (
    "AU1", "AU2", "AU4", "AU6", "AU7", "AU10",
    "AU12", "AU15", "AU23", "AU24", "AU25", "AU26",
)
NUM_AUS = len(AU_NAMES)

EXPRESSION_NAMES = (
    "Neutral", "Anger", "Disgust", "Fear",
    "Happiness", "Sadness", "Surprise", "Other",
)
NUM_EXPRESSIONS = len(EXPRESSION_NAMES)
OTHER_CLASS = 7
INVALID_EXPRESSION = -1

VA_SENTINEL = -5.0


def polarity_of(value: float) -> Polarity:
    """Classify a valence/arousal value; extremeness is exact equality with +/-1.

    Annotation files store extremes as literal "1"/"-1" tokens, so exact
    comparison on the parsed value is well defined (no tolerance band).
    """
    if not np.isfinite(value) or abs(value) > 1:
        raise DomainError(f"value outside [-1, 1]: {value!r}")
    if value == -1.0:
        return Polarity.NEG_EXTREME
    if value == 1.0:
        return Polarity.POS_EXTREME
    return Polarity.INTERIOR


@dataclass(frozen=True)
class VALabel:
    """Per-frame valence/arousal pair; may carry the raw -5 sentinel pre-filtering."""

    valence: float
    arousal: float

    @property
    def is_sentinel(self) -> bool:
        return self.valence == VA_SENTINEL or self.arousal == VA_SENTINEL

    def polarities(self) -> "PolarityLabel":
        return PolarityLabel(polarity_of(self.valence), polarity_of(self.arousal))


@dataclass(frozen=True)
class PolarityLabel:
    valence_polarity: Polarity
    arousal_polarity: Polarity


@dataclass(frozen=True)
class ExpressionLabel:
    """Integer expression class: -1 invalid, 0-6 basic + neutral, 7 'other'."""

    value: int

    @property
    def is_invalid(self) -> bool:
        return self.value == INVALID_EXPRESSION


@dataclass(frozen=True)
class AULabelVector:
    """12 action-unit activations in {-1, 0, 1}; -1 marks an unannotated cell."""

    values: tuple[int, ...]

    @property
    def has_unannotated(self) -> bool:
        return any(v == -1 for v in self.values)

    @property
    def fully_unannotated(self) -> bool:
        return all(v == -1 for v in self.values)

    def as_array(self) -> np.ndarray:
        return np.asarray(self.values, dtype=np.int64)

    def annotation_mask(self) -> np.ndarray:
        """1.0 where the cell is annotated, 0.0 where it is -1."""
        return np.asarray([0.0 if v == -1 else 1.0 for v in self.values], dtype=np.float64)


@dataclass(frozen=True, eq=False)
class FrameRecord:
    """One video frame: image plus whichever task annotations the frame carries."""

    video_id: str
    frame_index: int
    image: np.ndarray  # HxWxC, float, values in [0, 1]
    va: Optional[VALabel] = None
    expr: Optional[ExpressionLabel] = None
    aus: Optional[AULabelVector] = None

    def __post_init__(self):
        if isinstance(self.image, np.ndarray):
            self.image.setflags(write=False)


@dataclass(frozen=True, eq=False)
class VideoSequence:
    """Ordered frames of one video; the unit of temporal modeling."""

    video_id: str
    frames: tuple[FrameRecord, ...]

    def __post_init__(self):
        object.__setattr__(self, "frames", tuple(self.frames))
        prev = None
        for f in self.frames:
            if f.video_id != self.video_id:
                raise ValidationError(
                    f"frame video_id {f.video_id!r} differs from sequence {self.video_id!r}"
                )
            if prev is not None and f.frame_index <= prev:
                raise ValidationError(
                    f"frame_index not strictly increasing in {self.video_id!r}: "
                    f"{prev} then {f.frame_index}"
                )
            prev = f.frame_index

    def __len__(self) -> int:
        return len(self.frames)


# A feature vector is a plain 1-D array/tensor; its dimension is fixed by the
# backbone config and constant within one experiment.
FeatureVector = np.ndarray


@dataclass(frozen=True)
class VAPrediction:
    valence: float
    arousal: float


@dataclass(frozen=True)
class ExprPrediction:
    label: int
    probabilities: tuple[float, ...]  # 8 classes, sums to 1


@dataclass(frozen=True)
class AUPrediction:
    probabilities: tuple[float, ...]  # 12 values in [0, 1]
    decisions: tuple[int, ...]  # 12 values in {0, 1}


Prediction = Union[VAPrediction, ExprPrediction, AUPrediction]


@dataclass
class PredictionSet:
    """Per-frame model outputs for one task, keyed by (video_id, frame_index)."""

    task: Task
    entries: dict[tuple[str, int], Prediction] = field(default_factory=dict)

    def add(self, video_id: str, frame_index: int, prediction: Prediction) -> None:
        self._check(prediction)
        self.entries[(video_id, frame_index)] = prediction

    def _check(self, p: Prediction) -> None:
        if self.task is Task.VA:
            if not isinstance(p, VAPrediction):
                raise ValidationError(f"VA prediction set got {type(p).__name__}")
            for name, v in (("valence", p.valence), ("arousal", p.arousal)):
                if not (-1.0 <= v <= 1.0):
                    raise ValidationError(f"{name} prediction outside [-1, 1]: {v}")
        elif self.task is Task.EXPR:
            if not isinstance(p, ExprPrediction):
                raise ValidationError(f"EXPR prediction set got {type(p).__name__}")
            if not 0 <= p.label < NUM_EXPRESSIONS:
                raise ValidationError(f"expression label out of range: {p.label}")
            if len(p.probabilities) != NUM_EXPRESSIONS:
                raise ValidationError("expression probability vector must have 8 entries")
            total = sum(p.probabilities)
            if abs(total - 1.0) > 1e-6 or min(p.probabilities) < 0:
                raise ValidationError(f"expression probabilities must sum to 1, got {total}")
        else:
            if not isinstance(p, AUPrediction):
                raise ValidationError(f"AU prediction set got {type(p).__name__}")
            if len(p.probabilities) != NUM_AUS or len(p.decisions) != NUM_AUS:
                raise ValidationError("AU prediction needs 12 probabilities and 12 decisions")
            if not all(0.0 <= q <= 1.0 for q in p.probabilities):
                raise ValidationError("AU probabilities must lie in [0, 1]")
            if not all(d in (0, 1) for d in p.decisions):
                raise ValidationError("AU decisions must be 0/1")

    def ordered_items(self):
        return sorted(self.entries.items(), key=lambda kv: kv[0])


def validate_frame(record: FrameRecord, config) -> FrameRecord:
    """Check every type invariant of a frame; returns the record unchanged.

    Idempotent by construction. Raises ValidationError naming the violated
    field; in particular the -5 annotation sentinel must have been filtered
    away before records reach model code.
    """
    if not record.video_id:
        raise ValidationError("video_id: must be a non-empty string")
    if not isinstance(record.frame_index, int) or record.frame_index < 0:
        raise ValidationError(f"frame_index: must be a non-negative integer, got {record.frame_index!r}")

    img = record.image
    expected = (config.image_size, config.image_size, 3)
    if not isinstance(img, np.ndarray) or img.shape != expected:
        got = img.shape if isinstance(img, np.ndarray) else type(img).__name__
        raise ValidationError(f"image: expected shape {expected}, got {got}")
    if not np.isfinite(img).all():
        raise ValidationError("image: contains non-finite values")
    if img.min() < 0.0 or img.max() > 1.0:
        raise ValidationError("image: values outside [0, 1]")

    if record.va is None and record.expr is None and record.aus is None:
        raise ValidationError("annotations: at least one task annotation must be present")

    if record.va is not None:
        for name, v in (("valence", record.va.valence), ("arousal", record.va.arousal)):
            if not np.isfinite(v):
                raise ValidationError(f"va.{name}: non-finite value {v!r}")
            if not -1.0 <= v <= 1.0:
                raise ValidationError(
                    f"va.{name}: value {v} outside [-1, 1] (sentinel must be filtered upstream)"
                )

    if record.expr is not None:
        if record.expr.value not in range(-1, NUM_EXPRESSIONS):
            raise ValidationError(f"expr: label {record.expr.value} outside {{-1..7}}")

    if record.aus is not None:
        if len(record.aus.values) != NUM_AUS:
            raise ValidationError(
                f"aus: expected {NUM_AUS} entries, got {len(record.aus.values)}"
            )
        for j, v in enumerate(record.aus.values):
            if v not in (-1, 0, 1):
                raise ValidationError(f"aus[{j}] ({AU_NAMES[j]}): entry {v!r} outside {{-1, 0, 1}}")

    return record
