"""Data protocol: fixed-length segmentation, seeded splits, crop-box planning."""
import math
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .errors import DataError, ValidationError

SEGMENT_SECONDS = 8.0
SPLIT_RATIOS = (0.80, 0.05, 0.15)
# jawline 0-16 and brows 17-26 of the 68-point layout
EDGE_LANDMARKS = tuple(range(27))
_EPS = 1e-9


@dataclass(frozen=True)
class SequenceRecord:
    id: str
    duration: float
    fps: float = 30.0
    audio: str = ""
    motion: str = ""

    def __post_init__(self):
        if not self.duration > 0:
            raise ValidationError(f"record {self.id}: duration must be positive, got {self.duration}")
        if not self.fps > 0:
            raise ValidationError(f"record {self.id}: fps must be positive")


@dataclass(frozen=True)
class Clip:
    record_id: str
    index: int
    start_frame: int
    end_frame: int
    start_time: float
    end_time: float

    @property
    def id(self):
        return f"{self.record_id}#{self.index:04d}"


def segment(records, seg_seconds=SEGMENT_SECONDS, fps=30.0):
    """Cut each record into floor(D / seg_seconds) clips; the remainder is dropped."""
    n_frames = int(round(seg_seconds * fps))
    clips = []
    for rec in records:
        count = int(math.floor(rec.duration / seg_seconds + _EPS))
        for i in range(count):
            clips.append(Clip(rec.id, i, i * n_frames, (i + 1) * n_frames,
                              i * seg_seconds, (i + 1) * seg_seconds))
    return clips


def split_counts(n, ratios=SPLIT_RATIOS):
    """(train, val, test): val and test floored, train takes the remainder."""
    if len(ratios) != 3 or any(r < 0 for r in ratios):
        raise ValidationError(f"need three non-negative ratios, got {ratios}")
    fr = [Fraction(str(r)) for r in ratios]
    if sum(fr) != 1:
        raise ValidationError(f"split ratios must sum to 1, got {ratios}")
    val = math.floor(fr[1] * n)
    test = math.floor(fr[2] * n)
    return n - val - test, val, test


def split(clips, ratios=SPLIT_RATIOS, seed=0):
    """Seeded shuffle, then cut into (train, val, test) lists."""
    clips = list(clips)
    if not clips:
        raise DataError("cannot split an empty clip list")
    n_train, n_val, n_test = split_counts(len(clips), ratios)
    order = np.random.default_rng(seed).permutation(len(clips))
    shuffled = [clips[i] for i in order]
    return (shuffled[n_test + n_val:], shuffled[n_test:n_test + n_val], shuffled[:n_test])


@dataclass(frozen=True, eq=False)
class CropTrack:
    """68-point landmarks observed every ``check_every`` frames of one recording."""

    landmarks: np.ndarray
    frame_size: tuple
    check_every: int = 6
    n_frames: int = 0

    def __post_init__(self):
        lm = np.asarray(self.landmarks, dtype=np.float64)
        if lm.ndim != 3 or lm.shape[0] < 1 or lm.shape[1:] != (68, 2):
            raise ValidationError(f"landmarks must be (K>=1, 68, 2), got {lm.shape}")
        w, h = (float(v) for v in self.frame_size)
        if self.check_every < 1:
            raise ValidationError("check_every must be >= 1")
        first = lm[0]
        if first.min() < 0 or first[:, 0].max() > w or first[:, 1].max() > h:
            raise ValidationError("first check frame has landmarks outside the frame")
        n_frames = self.n_frames or lm.shape[0] * self.check_every
        if n_frames < (lm.shape[0] - 1) * self.check_every + 1:
            raise ValidationError(f"n_frames={n_frames} is shorter than the checked span")
        object.__setattr__(self, "landmarks", lm)
        object.__setattr__(self, "frame_size", (w, h))
        object.__setattr__(self, "n_frames", int(n_frames))


@dataclass(frozen=True)
class CropSegment:
    start_frame: int
    end_frame: int
    box: tuple  # (x0, y0, x1, y1) pixels, square
    output_size: int = 1024

    def to_dict(self):
        return {"start_frame": self.start_frame, "end_frame": self.end_frame,
                "box": list(self.box), "output_size": self.output_size}


def fit_box(points, frame_size, margin_ratio=0.25):
    """Square box around ``points`` grown by ``margin_ratio`` of the face side per edge,
    shifted (never shrunk) to lie inside the frame."""
    w, h = frame_size
    lo, hi = points.min(axis=0), points.max(axis=0)
    side = float(max(hi - lo)) * (1.0 + 2.0 * margin_ratio)
    if side > min(w, h):
        raise ValidationError(f"face box of side {side:.1f}px does not fit a {w:g}x{h:g} frame")
    cx, cy = (lo + hi) / 2
    x0 = min(max(cx - side / 2, 0.0), w - side)
    y0 = min(max(cy - side / 2, 0.0), h - side)
    return (x0, y0, x0 + side, y0 + side)


def too_close(points, box, threshold=0.05):
    """True if any edge landmark is within ``threshold`` * side of the border (or outside)."""
    x0, y0, x1, y1 = box
    p = points[list(EDGE_LANDMARKS)]
    gap = np.minimum.reduce([p[:, 0] - x0, x1 - p[:, 0], p[:, 1] - y0, y1 - p[:, 1]])
    return bool(gap.min() < threshold * (x1 - x0))


def crop_plan(track, margin_ratio=0.25, threshold=0.05, output_size=1024):
    segments = []
    start = 0
    box = fit_box(track.landmarks[0], track.frame_size, margin_ratio)
    for k in range(1, track.landmarks.shape[0]):
        if too_close(track.landmarks[k], box, threshold):
            frame = k * track.check_every
            segments.append(CropSegment(start, frame, box, output_size))
            start = frame
            box = fit_box(track.landmarks[k], track.frame_size, margin_ratio)
    segments.append(CropSegment(start, track.n_frames, box, output_size))
    return segments
