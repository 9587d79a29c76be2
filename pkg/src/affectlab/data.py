"""Annotation parsing, filtering rules, synthetic data, and augmentation.

Annotation files carry a header line, then one line per frame (frame i on
line i+1). Parsers accept UTF-8 text with LF or CRLF endings. The on-disk
layout is::

    <root>/<task>/<split>/<video_id>.txt      annotations
    <root>/images/<video_id>.npz              one array container per video
    <root>/images/<video_id>/00000.jpg        alternative per-frame images

Synthetic datasets plant a visual signal in each image (label-coded band or
patch intensities) so that small models can overfit them quickly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Callable, Optional

import numpy as np
import scipy.ndimage as ndi

from .config import AUFilterPolicy, ExperimentConfig, ExprScheme, derive_seed
from .core import (
    AU_NAMES,
    AULabelVector,
    ExpressionLabel,
    FrameRecord,
    NUM_AUS,
    NUM_EXPRESSIONS,
    Task,
    VALabel,
    VideoSequence,
)
from .errors import ConfigError, ParseError, ValidationError

VA_HEADER = "valence,arousal"
EXPR_HEADER = "Neutral,Anger,Disgust,Fear,Happiness,Sadness,Surprise,Other"
AU_HEADER = ",".join(AU_NAMES)

# Class frequencies observed in the full-scale expression training corpus;
# the synthetic generator reproduces these proportions.
EXPR_CLASS_COUNTS = (177498, 16573, 10810, 9080, 95633, 79862, 31637, 165866)

# Per-AU base rates for synthetic data; AU15/AU23/AU24 positives are rare.
AU_BASE_RATES = (0.45, 0.40, 0.50, 0.55, 0.50, 0.55, 0.50, 0.06, 0.05, 0.05, 0.60, 0.35)


class SplitName(Enum):
    TRAIN = "train"
    VAL = "val"
    TEST = "test"


@dataclass(frozen=True, eq=False)
class DatasetSplit:
    name: SplitName
    sequences: tuple[VideoSequence, ...]
    provenance: str = "synthetic"  # "disk" or "synthetic"

    def __post_init__(self):
        object.__setattr__(self, "sequences", tuple(self.sequences))
        ids = [s.video_id for s in self.sequences]
        if len(set(ids)) != len(ids):
            raise ValidationError(f"duplicate video_ids within split {self.name.value!r}")

    def frames(self) -> list[FrameRecord]:
        return [f for seq in self.sequences for f in seq.frames]

    def n_frames(self) -> int:
        return sum(len(seq) for seq in self.sequences)


@dataclass(frozen=True)
class AugmentationConfig:
    """Training-time augmentation: rotation, resized crop, horizontal flip, jitter."""

    rotation_degrees: float = 15.0
    crop_scale_range: tuple[float, float] = (0.8, 1.0)
    hflip_prob: float = 0.5
    color_jitter: tuple[float, float, float, float] = (0.2, 0.2, 0.2, 0.05)

    def __post_init__(self):
        lo, hi = self.crop_scale_range
        if self.rotation_degrees < 0:
            raise ValidationError("rotation_degrees: must be >= 0")
        if not (0.0 < lo <= hi <= 1.0):
            raise ValidationError(f"crop_scale_range: need 0 < lo <= hi <= 1, got {(lo, hi)}")
        if not (0.0 <= self.hflip_prob <= 1.0):
            raise ValidationError("hflip_prob: must lie in [0, 1]")
        if any(j < 0 for j in self.color_jitter):
            raise ValidationError("color_jitter: components must be >= 0")


IDENTITY_AUGMENTATION = AugmentationConfig(0.0, (1.0, 1.0), 0.0, (0.0, 0.0, 0.0, 0.0))


# ---------------------------------------------------------------------------
# parsing / serialization
# ---------------------------------------------------------------------------

def _lines(text: str) -> list[str]:
    return text.replace("\r\n", "\n").split("\n")


def _check_header(lines: list[str], expected: str) -> None:
    if not lines or lines[0].strip() != expected:
        got = lines[0].strip() if lines else "<empty>"
        raise ParseError(f"expected header {expected!r}, got {got!r}", line=1)


def _body(lines: list[str]) -> list[tuple[int, str]]:
    out = []
    for lineno, line in enumerate(lines[1:], start=2):
        if line.strip() == "" and lineno == len(lines):
            continue  # trailing newline
        out.append((lineno, line.strip()))
    return out


def parse_va_file(text: str, video_id: str) -> list[tuple[int, VALabel]]:
    """Parse one valence/arousal annotation file; -5 sentinel entries are kept."""
    lines = _lines(text)
    _check_header(lines, VA_HEADER)
    entries: list[tuple[int, VALabel]] = []
    for frame, (lineno, line) in enumerate(_body(lines)):
        parts = line.split(",")
        if len(parts) != 2:
            raise ParseError(f"expected 'valence,arousal', got {line!r}", line=lineno)
        try:
            v, a = float(parts[0]), float(parts[1])
        except ValueError:
            raise ParseError(f"malformed numeric in {line!r}", line=lineno) from None
        if not (math.isfinite(v) and math.isfinite(a)):
            raise ParseError(f"non-finite value in {line!r}", line=lineno)
        entries.append((frame, VALabel(v, a)))
    return entries


def parse_expr_file(text: str, video_id: str) -> list[tuple[int, ExpressionLabel]]:
    """Parse one expression annotation file: one integer in {-1..7} per line."""
    lines = _lines(text)
    _check_header(lines, EXPR_HEADER)
    entries: list[tuple[int, ExpressionLabel]] = []
    for frame, (lineno, line) in enumerate(_body(lines)):
        try:
            value = int(line)
        except ValueError:
            raise ParseError(f"malformed integer {line!r}", line=lineno) from None
        if value not in range(-1, NUM_EXPRESSIONS):
            raise ParseError(f"expression label {value} outside {{-1..7}}", line=lineno)
        entries.append((frame, ExpressionLabel(value)))
    return entries


def parse_au_file(text: str, video_id: str) -> list[tuple[int, AULabelVector]]:
    """Parse one action-unit annotation file: 12 comma-separated {-1,0,1} per line."""
    lines = _lines(text)
    _check_header(lines, AU_HEADER)
    entries: list[tuple[int, AULabelVector]] = []
    for frame, (lineno, line) in enumerate(_body(lines)):
        parts = line.split(",")
        if len(parts) != NUM_AUS:
            raise ParseError(f"expected {NUM_AUS} entries, got {len(parts)}", line=lineno)
        try:
            values = tuple(int(p) for p in parts)
        except ValueError:
            raise ParseError(f"malformed integer in {line!r}", line=lineno) from None
        for v in values:
            if v not in (-1, 0, 1):
                raise ParseError(f"AU entry {v} outside {{-1, 0, 1}}", line=lineno)
        entries.append((frame, AULabelVector(values)))
    return entries


def serialize_va_labels(entries: list[tuple[int, VALabel]], decimals: Optional[int] = None) -> str:
    """Inverse of parse_va_file; `decimals` switches to fixed-point submission format."""
    fmt = (lambda x: f"{x:.{decimals}f}") if decimals is not None else repr
    lines = [VA_HEADER]
    lines += [f"{fmt(lbl.valence)},{fmt(lbl.arousal)}" for _, lbl in entries]
    return "\n".join(lines) + "\n"


def serialize_expr_labels(entries: list[tuple[int, ExpressionLabel]]) -> str:
    lines = [EXPR_HEADER] + [str(lbl.value) for _, lbl in entries]
    return "\n".join(lines) + "\n"


def serialize_au_labels(entries: list[tuple[int, AULabelVector]]) -> str:
    lines = [AU_HEADER] + [",".join(str(v) for v in lbl.values) for _, lbl in entries]
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# filtering
# ---------------------------------------------------------------------------

def filter_split(split: DatasetSplit, task: Task, config: ExperimentConfig) -> DatasetSplit:
    """Apply the task's exclusion rules; surviving records are never altered.

    VA drops -5 sentinel frames. EXPR drops -1 frames, and additionally drops
    class 7 from TRAIN under the threshold scheme. AU under DROP_FRAME drops
    any frame with a -1 entry; under MASK_CELLS only fully-unannotated frames
    are dropped and partial frames stay for per-cell loss masking. Frames that
    lack the task's annotation entirely are dropped as well.
    """
    if task is Task.VA:
        keep: Callable[[FrameRecord], bool] = lambda f: f.va is not None and not f.va.is_sentinel
    elif task is Task.EXPR:
        drop_seven = (
            config.expr_scheme is ExprScheme.SEVEN_BY_THRESHOLD
            and split.name is SplitName.TRAIN
        )

        def keep(f: FrameRecord) -> bool:
            if f.expr is None or f.expr.is_invalid:
                return False
            return not (drop_seven and f.expr.value == 7)
    else:
        if config.au_policy is AUFilterPolicy.DROP_FRAME:
            keep = lambda f: f.aus is not None and not f.aus.has_unannotated
        else:
            keep = lambda f: f.aus is not None and not f.aus.fully_unannotated

    sequences = []
    for seq in split.sequences:
        surviving = tuple(f for f in seq.frames if keep(f))
        if surviving:
            sequences.append(VideoSequence(seq.video_id, surviving))
    return DatasetSplit(split.name, tuple(sequences), split.provenance)


# ---------------------------------------------------------------------------
# synthetic generation
# ---------------------------------------------------------------------------

def _base_image(rng: np.random.Generator, size: int) -> np.ndarray:
    img = np.full((size, size, 3), 0.5, dtype=np.float64)
    yy, xx = np.mgrid[0:size, 0:size]
    checker = 0.03 * (((yy // 8) + (xx // 8)) % 2)
    img += checker[..., None]
    img += rng.uniform(-0.02, 0.02, size=img.shape)
    return img


def _va_band_intensity(value: float) -> float:
    # piecewise code: interior values compress into the central range while
    # exact extremes saturate to 0/1, leaving a wide margin for the polarity
    # classifiers to latch onto
    if value == 1.0:
        return 1.0
    if value == -1.0:
        return 0.0
    return 0.5 + 0.35 * value


def _render_va_image(rng: np.random.Generator, size: int, valence: float, arousal: float) -> np.ndarray:
    img = _base_image(rng, size)
    half = size // 2
    img[:half, :, :] = _va_band_intensity(valence)
    img[half:, :, :] = _va_band_intensity(arousal)
    img += rng.uniform(-0.015, 0.015, size=img.shape)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def _render_expr_image(rng: np.random.Generator, size: int, label: int) -> np.ndarray:
    img = _base_image(rng, size) * 0.4
    stripe = size // NUM_EXPRESSIONS
    lo = label * stripe
    hi = size if label == NUM_EXPRESSIONS - 1 else (label + 1) * stripe
    img[:, lo:hi, :] = 0.9
    img += rng.uniform(-0.03, 0.03, size=img.shape)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def _render_au_image(rng: np.random.Generator, size: int, values: tuple[int, ...]) -> np.ndarray:
    img = _base_image(rng, size) * 0.0
    rows, cols = 3, 4
    rh, cw = size // rows, size // cols
    for j, v in enumerate(values):
        r, c = divmod(j, cols)
        intensity = 0.85 if v == 1 else 0.15
        img[r * rh:(r + 1) * rh, c * cw:(c + 1) * cw, :] = intensity
    img += rng.uniform(-0.03, 0.03, size=img.shape)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def _synthetic_va_labels(rng: np.random.Generator, n: int, extreme_fraction: float) -> list[VALabel]:
    labels = []
    for _ in range(n):
        vals = {}
        for dim in ("v", "a"):
            u = rng.random()
            if u < extreme_fraction * 0.6:
                vals[dim] = 1.0
            elif u < extreme_fraction:
                vals[dim] = -1.0
            else:
                vals[dim] = None
        v = vals["v"]
        if v is None:
            # skewed-positive interior values, kept away from the extremes so
            # the planted band intensities stay visually separable
            v = float(np.clip(2.0 * rng.beta(5.0, 3.0) - 1.0, -0.7, 0.7))
        a = vals["a"]
        if a is None:
            # arousal rises with |valence|
            a = float(np.clip(0.6 * abs(v) + rng.uniform(-0.25, 0.35), -0.7, 0.7))
        labels.append(VALabel(v, a))
    return labels


def _synthetic_expr_labels(rng: np.random.Generator, n: int) -> list[int]:
    # largest-remainder allocation keeps class marginals at the target
    # proportions even for small n, then a seeded shuffle mixes them
    total = float(sum(EXPR_CLASS_COUNTS))
    quotas = [n * c / total for c in EXPR_CLASS_COUNTS]
    counts = [int(q) for q in quotas]
    remainders = sorted(range(NUM_EXPRESSIONS), key=lambda i: quotas[i] - counts[i], reverse=True)
    for i in range(n - sum(counts)):
        counts[remainders[i % NUM_EXPRESSIONS]] += 1
    labels = [cls for cls, cnt in enumerate(counts) for _ in range(cnt)]
    rng.shuffle(labels)
    return labels


def _synthetic_au_labels(rng: np.random.Generator, n_videos: int, frames: int) -> np.ndarray:
    """Sticky two-state chains per (video, AU) with the target stationary rates."""
    out = np.zeros((n_videos, frames, NUM_AUS), dtype=np.int64)
    leave_on = 0.1
    for vid in range(n_videos):
        for j, rate in enumerate(AU_BASE_RATES):
            enter_on = leave_on * rate / (1.0 - rate)
            state = 1 if rng.random() < rate else 0
            for t in range(frames):
                out[vid, t, j] = state
                p = leave_on if state == 1 else enter_on
                if rng.random() < p:
                    state = 1 - state
    # coverage floor: every AU needs both positives and negatives somewhere
    # in the split, otherwise per-AU F1 has nothing to measure
    flat = out.reshape(-1, NUM_AUS)
    n_total = flat.shape[0]
    floor = max(2, round(0.05 * n_total))
    for j in range(NUM_AUS):
        positives = int(flat[:, j].sum())
        if positives < floor:
            deficit = floor - positives
            off_idx = np.flatnonzero(flat[:, j] == 0)
            pick = rng.choice(off_idx, size=min(deficit, off_idx.size), replace=False)
            flat[pick, j] = 1
        elif positives > n_total - 2:
            on_idx = np.flatnonzero(flat[:, j] == 1)
            pick = rng.choice(on_idx, size=positives - (n_total - 2), replace=False)
            flat[pick, j] = 0
    return flat.reshape(n_videos, frames, NUM_AUS)


def generate_synthetic(
    seed: int,
    n_videos: int,
    frames_per_video: int,
    task: Task,
    image_size: int = 112,
    extreme_fraction: float = 0.2,
    split_name: SplitName = SplitName.TRAIN,
) -> DatasetSplit:
    """Deterministic synthetic split whose images visually encode the labels."""
    if n_videos < 1 or frames_per_video < 1:
        raise ConfigError(
            f"synthetic sizes must be positive, got n_videos={n_videos}, "
            f"frames_per_video={frames_per_video}"
        )
    label_rng = np.random.Generator(np.random.PCG64(derive_seed(seed, f"labels/{task.value}")))
    n_total = n_videos * frames_per_video

    if task is Task.VA:
        va_labels = _synthetic_va_labels(label_rng, n_total, extreme_fraction)
    elif task is Task.EXPR:
        expr_labels = _synthetic_expr_labels(label_rng, n_total)
    else:
        au_labels = _synthetic_au_labels(label_rng, n_videos, frames_per_video)

    sequences = []
    for vid in range(n_videos):
        video_id = f"synth_{task.value}_{seed}_{vid:03d}"
        img_rng = np.random.Generator(np.random.PCG64(derive_seed(seed, f"images/{task.value}/{vid}")))
        frames = []
        for t in range(frames_per_video):
            k = vid * frames_per_video + t
            if task is Task.VA:
                lbl = va_labels[k]
                image = _render_va_image(img_rng, image_size, lbl.valence, lbl.arousal)
                frames.append(FrameRecord(video_id, t, image, va=lbl))
            elif task is Task.EXPR:
                cls = expr_labels[k]
                image = _render_expr_image(img_rng, image_size, cls)
                frames.append(FrameRecord(video_id, t, image, expr=ExpressionLabel(cls)))
            else:
                values = tuple(int(v) for v in au_labels[vid, t])
                image = _render_au_image(img_rng, image_size, values)
                frames.append(FrameRecord(video_id, t, image, aus=AULabelVector(values)))
        sequences.append(VideoSequence(video_id, tuple(frames)))
    return DatasetSplit(split_name, tuple(sequences), provenance="synthetic")


# ---------------------------------------------------------------------------
# augmentation
# ---------------------------------------------------------------------------

def _rgb_to_hsv(rgb: np.ndarray) -> np.ndarray:
    r, g, b = rgb[..., 0], rgb[..., 1], rgb[..., 2]
    maxc = rgb.max(axis=-1)
    minc = rgb.min(axis=-1)
    v = maxc
    span = maxc - minc
    s = np.where(maxc > 0, span / np.maximum(maxc, 1e-12), 0.0)
    safe = np.maximum(span, 1e-12)
    rc, gc, bc = (maxc - r) / safe, (maxc - g) / safe, (maxc - b) / safe
    h = np.where(maxc == r, bc - gc, np.where(maxc == g, 2.0 + rc - bc, 4.0 + gc - rc))
    h = np.where(span == 0, 0.0, (h / 6.0) % 1.0)
    return np.stack([h, s, v], axis=-1)


def _hsv_to_rgb(hsv: np.ndarray) -> np.ndarray:
    h, s, v = hsv[..., 0], hsv[..., 1], hsv[..., 2]
    i = np.floor(h * 6.0).astype(np.int64) % 6
    f = h * 6.0 - np.floor(h * 6.0)
    p = v * (1.0 - s)
    q = v * (1.0 - s * f)
    t = v * (1.0 - s * (1.0 - f))
    choices = [
        np.stack([v, t, p], -1), np.stack([q, v, p], -1), np.stack([p, v, t], -1),
        np.stack([p, q, v], -1), np.stack([t, p, v], -1), np.stack([v, p, q], -1),
    ]
    out = np.zeros(hsv.shape, dtype=hsv.dtype)
    for idx, choice in enumerate(choices):
        out = np.where((i == idx)[..., None], choice, out)
    return out


def augment(image: np.ndarray, config: AugmentationConfig, rng: np.random.Generator) -> np.ndarray:
    """Apply the configured augmentations; deterministic given the rng state.

    Transforms with identity parameters are skipped entirely so that an
    all-zero config returns the input bit-for-bit. Output is clamped to [0, 1].
    """
    out = np.asarray(image, dtype=np.float32)
    h, w = out.shape[0], out.shape[1]

    if config.rotation_degrees > 0:
        angle = float(rng.uniform(-config.rotation_degrees, config.rotation_degrees))
        out = ndi.rotate(out, angle, axes=(0, 1), reshape=False, order=1, mode="nearest")

    lo, hi = config.crop_scale_range
    if not (lo == 1.0 and hi == 1.0):
        scale = float(rng.uniform(lo, hi))
        side_h = max(1, round(h * math.sqrt(scale)))
        side_w = max(1, round(w * math.sqrt(scale)))
        top = int(rng.integers(0, h - side_h + 1))
        left = int(rng.integers(0, w - side_w + 1))
        crop = out[top:top + side_h, left:left + side_w, :]
        if (side_h, side_w) != (h, w):
            out = ndi.zoom(crop, (h / side_h, w / side_w, 1.0), order=1, mode="nearest")
            out = out[:h, :w, :]
        else:
            out = crop

    if config.hflip_prob > 0 and rng.random() < config.hflip_prob:
        out = out[:, ::-1, :]

    brightness, contrast, saturation, hue = config.color_jitter
    if brightness > 0:
        out = out * (1.0 + float(rng.uniform(-brightness, brightness)))
    if contrast > 0:
        mean = out.mean()
        out = mean + (out - mean) * (1.0 + float(rng.uniform(-contrast, contrast)))
    if saturation > 0:
        gray = out.mean(axis=-1, keepdims=True)
        out = gray + (out - gray) * (1.0 + float(rng.uniform(-saturation, saturation)))
    if hue > 0:
        hsv = _rgb_to_hsv(np.clip(out, 0.0, 1.0).astype(np.float64))
        hsv[..., 0] = (hsv[..., 0] + float(rng.uniform(-hue, hue))) % 1.0
        out = _hsv_to_rgb(hsv)

    return np.ascontiguousarray(np.clip(out, 0.0, 1.0), dtype=np.float32)


# ---------------------------------------------------------------------------
# disk layout
# ---------------------------------------------------------------------------

def write_split(root: str | Path, split: DatasetSplit, task: Task) -> None:
    """Write annotations and per-video image containers under `root`."""
    root = Path(root)
    ann_dir = root / task.value / split.name.value
    img_dir = root / "images"
    ann_dir.mkdir(parents=True, exist_ok=True)
    img_dir.mkdir(parents=True, exist_ok=True)
    for seq in split.sequences:
        if task is Task.VA:
            entries = [(f.frame_index, f.va) for f in seq.frames]
            text = serialize_va_labels(entries)
        elif task is Task.EXPR:
            entries = [(f.frame_index, f.expr) for f in seq.frames]
            text = serialize_expr_labels(entries)
        else:
            entries = [(f.frame_index, f.aus) for f in seq.frames]
            text = serialize_au_labels(entries)
        (ann_dir / f"{seq.video_id}.txt").write_text(text, encoding="utf-8")
        frames = np.stack([f.image for f in seq.frames]).astype(np.float32)
        np.savez_compressed(img_dir / f"{seq.video_id}.npz", frames=frames)


def _load_video_images(img_dir: Path, video_id: str, n_frames: int) -> np.ndarray:
    container = img_dir / f"{video_id}.npz"
    if container.exists():
        frames = np.load(container)["frames"].astype(np.float32)
        if frames.shape[0] < n_frames:
            raise ParseError(
                f"{container}: has {frames.shape[0]} frames, annotations need {n_frames}"
            )
        return frames
    frame_dir = img_dir / video_id
    if frame_dir.is_dir():
        from PIL import Image

        frames = []
        for idx in range(n_frames):
            path = frame_dir / f"{idx:05d}.jpg"
            if not path.exists():
                raise ParseError(f"missing frame image: {path}")
            frames.append(np.asarray(Image.open(path), dtype=np.float32) / 255.0)
        return np.stack(frames)
    raise ParseError(f"no images found for video {video_id!r} under {img_dir}")


def load_split(root: str | Path, task: Task, split_name: SplitName) -> DatasetSplit:
    """Load a split from the documented directory layout."""
    root = Path(root)
    ann_dir = root / task.value / split_name.value
    if not ann_dir.is_dir():
        raise ParseError(f"annotation directory not found: {ann_dir}")
    img_dir = root / "images"
    sequences = []
    for path in sorted(ann_dir.glob("*.txt")):
        video_id = path.stem
        text = path.read_text(encoding="utf-8")
        if task is Task.VA:
            entries = parse_va_file(text, video_id)
        elif task is Task.EXPR:
            entries = parse_expr_file(text, video_id)
        else:
            entries = parse_au_file(text, video_id)
        images = _load_video_images(img_dir, video_id, len(entries))
        label_field = {Task.VA: "va", Task.EXPR: "expr", Task.AU: "aus"}[task]
        frames = []
        for frame_index, label in entries:
            frames.append(
                FrameRecord(video_id, frame_index, images[frame_index], **{label_field: label})
            )
        sequences.append(VideoSequence(video_id, tuple(frames)))
    return DatasetSplit(split_name, tuple(sequences), provenance="disk")
