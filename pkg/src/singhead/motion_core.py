"""Parametric motion and identity types shared by every other module."""
from dataclasses import dataclass, field

import numpy as np

from . import container
from .errors import DimensionMismatchError, ManifestError, ValidationError

SHAPE_DIM = 100
EXPR_DIM = 50
POSE_DIM = 50
FRAME_DIM = EXPR_DIM + POSE_DIM
DEFAULT_FPS = 30.0


def _frozen(values, length, name, dtype=np.float32):
    arr = np.array(values, dtype=dtype).reshape(-1) if np.ndim(values) else None
    if arr is None or arr.shape != (length,):
        raise ValidationError(f"{name} must have length {length}, got shape {np.shape(values)}")
    if not np.all(np.isfinite(arr)):
        raise ValidationError(f"{name} contains non-finite values")
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True)
class ShapeParams:
    beta: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "beta", _frozen(self.beta, SHAPE_DIM, "beta"))

    def __eq__(self, other):
        if not isinstance(other, ShapeParams):
            return NotImplemented
        return np.array_equal(self.beta, other.beta)

    __hash__ = None

    @classmethod
    def zeros(cls):
        return cls(np.zeros(SHAPE_DIM))


@dataclass(frozen=True)
class MotionFrame:
    expression: np.ndarray
    pose: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "expression", _frozen(self.expression, EXPR_DIM, "expression"))
        object.__setattr__(self, "pose", _frozen(self.pose, POSE_DIM, "pose"))

    def __eq__(self, other):
        if not isinstance(other, MotionFrame):
            return NotImplemented
        return (np.array_equal(self.expression, other.expression)
                and np.array_equal(self.pose, other.pose))

    __hash__ = None


def pack_frame(frame):
    """(expression, pose) -> length-100 vector, expression first."""
    if not isinstance(frame, MotionFrame):
        raise ValidationError(f"expected MotionFrame, got {type(frame).__name__}")
    return np.concatenate([frame.expression, frame.pose])


def unpack_frame(vec):
    vec = np.asarray(vec)
    if vec.shape != (FRAME_DIM,):
        raise ValidationError(f"packed frame must have shape ({FRAME_DIM},), got {vec.shape}")
    return MotionFrame(vec[:EXPR_DIM], vec[EXPR_DIM:])


@dataclass(frozen=True, eq=False)
class MotionSequence:
    """T packed frames stored as a read-only (T, 100) float32 array."""

    data: np.ndarray
    fps: float = DEFAULT_FPS

    def __post_init__(self):
        data = np.array(self.data, dtype=np.float32)
        if data.ndim != 2 or data.shape[0] < 1 or data.shape[1] != FRAME_DIM:
            raise ValidationError(f"motion data must be (T>=1, {FRAME_DIM}), got {data.shape}")
        if not np.all(np.isfinite(data)):
            raise ValidationError("motion data contains non-finite values")
        if not self.fps > 0:
            raise ValidationError(f"fps must be positive, got {self.fps}")
        data.flags.writeable = False
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "fps", float(self.fps))

    @classmethod
    def from_frames(cls, frames, fps=DEFAULT_FPS):
        frames = list(frames)
        if not frames:
            raise ValidationError("a motion sequence needs at least one frame")
        return cls(np.stack([pack_frame(f) for f in frames]), fps)

    @property
    def frames(self):
        return tuple(unpack_frame(row) for row in self.data)

    @property
    def expression(self):
        return self.data[:, :EXPR_DIM]

    @property
    def pose(self):
        return self.data[:, EXPR_DIM:]

    @property
    def duration(self):
        return len(self) / self.fps

    def __len__(self):
        return self.data.shape[0]

    def __eq__(self, other):
        if not isinstance(other, MotionSequence):
            return NotImplemented
        return self.fps == other.fps and np.array_equal(self.data, other.data)

    __hash__ = None


@dataclass(frozen=True)
class CameraParams:
    """Weak-perspective camera: pixel = scale * (x, y) + translation."""

    scale: float
    translation: tuple = field(default=(0.0, 0.0))

    def __post_init__(self):
        scale = float(self.scale)
        if not (np.isfinite(scale) and scale > 0):
            raise ValidationError(f"camera scale must be positive, got {self.scale}")
        t = tuple(float(v) for v in self.translation)
        if len(t) != 2 or not all(np.isfinite(t)):
            raise ValidationError(f"camera translation must be 2 finite reals, got {self.translation}")
        object.__setattr__(self, "scale", scale)
        object.__setattr__(self, "translation", t)

    def as_vector(self):
        return np.array([self.scale, *self.translation])


def save_motion(seq, shape, path, identity=""):
    meta = {
        "kind": "motion",
        "identity": str(identity),
        "fps": seq.fps,
        "T": len(seq),
        "frame_dim": FRAME_DIM,
        "shape_dim": SHAPE_DIM,
    }
    container.write_arrays(path, {"shape": shape.beta, "frames": seq.data}, meta)


def load_motion(path, with_identity=False):
    meta, arrays = container.read_arrays(path)
    if meta.get("kind") != "motion":
        raise ManifestError(f"{path}: not a motion file (kind={meta.get('kind')!r})")
    try:
        T, fd, sd, fps = int(meta["T"]), int(meta["frame_dim"]), int(meta["shape_dim"]), meta["fps"]
    except (KeyError, TypeError, ValueError) as exc:
        raise ManifestError(f"{path}: incomplete motion manifest ({exc})") from None
    if set(arrays) != {"shape", "frames"}:
        raise ManifestError(f"{path}: expected arrays 'shape' and 'frames', got {sorted(arrays)}")
    if fd != FRAME_DIM or sd != SHAPE_DIM:
        raise DimensionMismatchError(f"{path}: unsupported dims frame={fd} shape={sd}")
    if arrays["frames"].shape != (T, fd) or arrays["shape"].shape != (sd,):
        raise DimensionMismatchError(
            f"{path}: manifest says T={T}, arrays are {arrays['frames'].shape} / {arrays['shape'].shape}")
    seq = MotionSequence(arrays["frames"], fps)
    shape = ShapeParams(arrays["shape"])
    if with_identity:
        return seq, shape, meta.get("identity", "")
    return seq, shape
