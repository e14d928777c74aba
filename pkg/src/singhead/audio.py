"""Audio loading, feature extraction backends and frame-rate alignment."""
import threading
from dataclasses import dataclass
from math import gcd

import numpy as np
from scipy import signal
from scipy.io import wavfile

from .errors import DataError, ValidationError

SAMPLE_RATE = 16000


@dataclass(frozen=True, eq=False)
class AudioClip:
    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        samples = np.array(self.samples, dtype=np.float64).reshape(-1)
        if samples.size == 0:
            raise ValidationError("audio clip is empty")
        if not np.all(np.isfinite(samples)):
            raise ValidationError("audio clip contains non-finite samples")
        if int(self.sample_rate) <= 0:
            raise ValidationError(f"sample rate must be positive, got {self.sample_rate}")
        samples.flags.writeable = False
        object.__setattr__(self, "samples", samples)
        object.__setattr__(self, "sample_rate", int(self.sample_rate))

    @property
    def duration(self):
        return self.samples.size / self.sample_rate


@dataclass(frozen=True, eq=False)
class AudioFeatureSequence:
    features: np.ndarray
    frame_rate: float

    def __post_init__(self):
        feats = np.asarray(self.features, dtype=np.float64)
        if feats.ndim != 2 or feats.shape[0] < 1:
            raise ValidationError(f"features must be (T_a>=1, d_a), got {feats.shape}")
        if not np.all(np.isfinite(feats)):
            raise ValidationError("features contain NaN/Inf")
        object.__setattr__(self, "features", feats)

    def __len__(self):
        return self.features.shape[0]

    @property
    def dim(self):
        return self.features.shape[1]


def load_wav(path, target_rate=SAMPLE_RATE):
    """Read a PCM WAV file as mono float in [-1, 1], resampled to ``target_rate``."""
    try:
        rate, data = wavfile.read(path)
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot read WAV {path}: {exc}") from None
    if np.issubdtype(data.dtype, np.integer):
        info = np.iinfo(data.dtype)
        data = data.astype(np.float64) / max(abs(info.min), info.max)
    else:
        data = data.astype(np.float64)
    if data.ndim == 2:
        data = data.mean(axis=1)
    if rate != target_rate:
        g = gcd(rate, target_rate)
        data = signal.resample_poly(data, target_rate // g, rate // g)
    return AudioClip(np.clip(data, -1.0, 1.0), target_rate)


def write_wav(path, clip):
    pcm = np.round(np.clip(clip.samples, -1.0, 1.0) * 32767).astype("<i2")
    wavfile.write(path, clip.sample_rate, pcm)


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(n_mels, n_fft, sample_rate, fmin=0.0, fmax=None):
    """Triangular HTK-mel filters, shape (n_mels, n_fft // 2 + 1), peak weight 1."""
    fmax = sample_rate / 2 if fmax is None else fmax
    edges = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))
    freqs = np.arange(n_fft // 2 + 1) * sample_rate / n_fft
    lower, center, upper = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (freqs - lower) / (center - lower)
    falling = (upper - freqs) / (upper - center)
    return np.maximum(0.0, np.minimum(rising, falling))


class FilterbankBackend:
    """Deterministic log-mel features: 25 ms Hann window, 10 ms hop."""

    def __init__(self, n_mels=80, sample_rate=SAMPLE_RATE, win_ms=25.0, hop_ms=10.0,
                 n_fft=512, floor=1e-10):
        self.n_mels = n_mels
        self.sample_rate = sample_rate
        self.win_length = int(round(sample_rate * win_ms / 1000))
        self.hop_length = int(round(sample_rate * hop_ms / 1000))
        self.n_fft = max(n_fft, self.win_length)
        self.floor = floor
        self.window = signal.get_window("hann", self.win_length, fftbins=True)
        self.filters = mel_filterbank(n_mels, self.n_fft, sample_rate)

    @property
    def dim(self):
        return self.n_mels

    @property
    def frame_rate(self):
        return self.sample_rate / self.hop_length

    def frames(self, samples):
        x = np.asarray(samples, dtype=np.float64)
        if x.size < self.win_length:
            x = np.pad(x, (0, self.win_length - x.size))
        n = 1 + (x.size - self.win_length) // self.hop_length
        idx = np.arange(self.win_length)[None, :] + self.hop_length * np.arange(n)[:, None]
        return x[idx] * self.window

    def power_spectrum(self, samples):
        return np.abs(np.fft.rfft(self.frames(samples), n=self.n_fft, axis=1)) ** 2

    def __call__(self, samples):
        energy = self.power_spectrum(samples) @ self.filters.T
        return np.log(np.maximum(energy, self.floor))


class Wav2Vec2Backend:
    """Adapter for a pretrained self-supervised speech encoder (HuggingFace wav2vec 2.0).

    The wrapped torch module is not assumed thread-safe; each thread lazily
    gets its own handle. Pass ``model`` to reuse an already constructed module
    (single-threaded use only).
    """

    sample_rate = SAMPLE_RATE
    frame_rate = 50.0

    def __init__(self, name_or_path="facebook/wav2vec2-base-960h", model=None):
        self.name_or_path = name_or_path
        self._shared = model
        self._local = threading.local()

    def _model(self):
        if self._shared is not None:
            return self._shared
        model = getattr(self._local, "model", None)
        if model is None:
            from transformers import Wav2Vec2Model

            model = Wav2Vec2Model.from_pretrained(self.name_or_path).eval()
            self._local.model = model
        return model

    @property
    def dim(self):
        return self._model().config.hidden_size

    def __call__(self, samples):
        import torch

        x = np.asarray(samples, dtype=np.float32)
        x = (x - x.mean()) / np.sqrt(x.var() + 1e-7)
        with torch.no_grad():
            out = self._model()(torch.from_numpy(x)[None]).last_hidden_state[0]
        return out.double().numpy()


def extract_features(clip, backend=None):
    backend = FilterbankBackend() if backend is None else backend
    if not isinstance(clip, AudioClip):
        raise ValidationError(f"expected AudioClip, got {type(clip).__name__}")
    if clip.sample_rate != backend.sample_rate:
        raise ValidationError(
            f"backend expects {backend.sample_rate} Hz audio, clip is {clip.sample_rate} Hz")
    return AudioFeatureSequence(backend(clip.samples), backend.frame_rate)


def align_to_frames(feat, T):
    """Linearly resample features along time to exactly T rows (endpoints aligned)."""
    x = feat.features if isinstance(feat, AudioFeatureSequence) else np.asarray(feat, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] == 0:
        raise ValidationError(f"need at least one feature row, got shape {x.shape}")
    T = int(T)
    if T < 1:
        raise ValidationError(f"target frame count must be >= 1, got {T}")
    n = x.shape[0]
    if n == T:
        return x.copy()
    if T == 1 or n == 1:
        pos = np.zeros(T)
    else:
        pos = np.arange(T) * (n - 1) / (T - 1)
    lo = np.minimum(np.floor(pos).astype(int), n - 1)
    hi = np.minimum(lo + 1, n - 1)
    w = (pos - lo)[:, None]
    return x[lo] + w * (x[hi] - x[lo])


def frames_for_duration(duration, fps=30.0):
    return int(round(duration * fps))


def features_for_motion(clip, fps=30.0, backend=None, T=None):
    """Extract features and align them to the motion frame grid of ``clip``."""
    T = frames_for_duration(clip.duration, fps) if T is None else T
    if T < 1:
        raise ValidationError(f"audio of {clip.duration:.4f}s is too short for one frame at {fps} fps")
    return align_to_frames(extract_features(clip, backend), T)
