"""3D motion metrics (MinDist, MeanDist, APD) and 2D frame metrics (LMD, SSIM, FID)."""
from dataclasses import dataclass

import numpy as np
from scipy.signal import convolve2d

from .errors import ValidationError
from .losses import motion_distance

# lip points of the 68-landmark layout (outer 48-59, inner 60-67)
MOUTH_INDICES = tuple(range(48, 68))


@dataclass(frozen=True, eq=False)
class SampleSet:
    samples: tuple

    def __post_init__(self):
        arrs = tuple(np.asarray(getattr(s, "data", s), dtype=np.float64) for s in self.samples)
        if not arrs:
            raise ValidationError("a sample set needs at least one sample")
        if len({a.shape for a in arrs}) != 1:
            raise ValidationError("all samples must share one shape")
        object.__setattr__(self, "samples", arrs)

    def __len__(self):
        return len(self.samples)


def _set(samples):
    return samples if isinstance(samples, SampleSet) else SampleSet(tuple(samples))


def _distances(samples, gt):
    s = _set(samples)
    gt = np.asarray(getattr(gt, "data", gt), dtype=np.float64)
    return np.array([motion_distance(x, gt) for x in s.samples])


def min_dist(samples, gt):
    return float(_distances(samples, gt).min())


def mean_dist(samples, gt):
    return float(_distances(samples, gt).mean())


def apd(samples):
    """Mean distance over ordered pairs (i, j), i != j."""
    s = _set(samples)
    n = len(s)
    if n < 2:
        raise ValidationError("APD needs at least 2 samples")
    total = sum(motion_distance(s.samples[i], s.samples[j])
                for i in range(n) for j in range(i + 1, n))
    return float(2.0 * total / (n * (n - 1)))


@dataclass(frozen=True, eq=False)
class LandmarkTrack:
    points: np.ndarray
    mouth: tuple = MOUTH_INDICES

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim != 3 or pts.shape[2] != 2:
            raise ValidationError(f"landmarks must be (frames, points, 2), got {pts.shape}")
        if max(self.mouth) >= pts.shape[1]:
            raise ValidationError("mouth indices exceed the landmark count")
        object.__setattr__(self, "points", pts)


def lmd(pred, gt):
    pred = pred if isinstance(pred, LandmarkTrack) else LandmarkTrack(pred)
    gt = gt if isinstance(gt, LandmarkTrack) else LandmarkTrack(gt)
    if pred.points.shape != gt.points.shape:
        raise ValidationError(f"track shapes differ: {pred.points.shape} vs {gt.points.shape}")
    idx = list(gt.mouth)
    diff = pred.points[:, idx] - gt.points[:, idx]
    return float(np.sqrt((diff ** 2).sum(-1)).mean())


def gaussian_window(size=11, sigma=1.5):
    ax = np.arange(size) - (size - 1) / 2
    g = np.exp(-(ax ** 2) / (2 * sigma ** 2))
    w = np.outer(g, g)
    return w / w.sum()


def _gray(img):
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 3:
        img = img.mean(axis=2)
    if img.ndim != 2:
        raise ValidationError(f"image must be (H, W) or (H, W, C), got {img.shape}")
    return img


def ssim(a, b, data_range=255.0, k1=0.01, k2=0.03, win_size=11, sigma=1.5):
    """Mean SSIM over the valid region of an 11x11 Gaussian window (colour averaged to gray)."""
    a, b = _gray(a), _gray(b)
    if a.shape != b.shape:
        raise ValidationError(f"image sizes differ: {a.shape} vs {b.shape}")
    if min(a.shape) < win_size:
        raise ValidationError(f"images must be at least {win_size}x{win_size}")
    w = gaussian_window(win_size, sigma)

    def filt(x):
        return convolve2d(x, w, mode="valid")

    c1, c2 = (k1 * data_range) ** 2, (k2 * data_range) ** 2
    mu_a, mu_b = filt(a), filt(b)
    var_a = filt(a * a) - mu_a ** 2
    var_b = filt(b * b) - mu_b ** 2
    cov = filt(a * b) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)
    return float(np.clip((num / den).mean(), -1.0, 1.0))


def _psd_sqrt(m):
    vals, vecs = np.linalg.eigh((m + m.T) / 2)
    return (vecs * np.sqrt(np.clip(vals, 0, None))) @ vecs.T


def frechet_distance(mu_a, cov_a, mu_b, cov_b, eps=1e-6):
    mu_a, mu_b = np.atleast_1d(mu_a), np.atleast_1d(mu_b)
    cov_a, cov_b = np.atleast_2d(cov_a), np.atleast_2d(cov_b)
    eye = np.eye(cov_a.shape[0]) * eps
    cov_a, cov_b = cov_a + eye, cov_b + eye
    root_a = _psd_sqrt(cov_a)
    # tr (A B)^{1/2} = tr (A^{1/2} B A^{1/2})^{1/2}, the latter symmetric PSD
    inner = root_a @ cov_b @ root_a
    vals = np.linalg.eigvalsh((inner + inner.T) / 2)
    tr_sqrt = np.sqrt(np.clip(vals, 0, None)).sum()
    diff = mu_a - mu_b
    value = diff @ diff + np.trace(cov_a) + np.trace(cov_b) - 2 * tr_sqrt
    return float(max(value, 0.0))


def fid(embeds_a, embeds_b, eps=1e-6):
    a = np.asarray(embeds_a, dtype=np.float64)
    b = np.asarray(embeds_b, dtype=np.float64)
    a = a[:, None] if a.ndim == 1 else a
    b = b[:, None] if b.ndim == 1 else b
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ValidationError(f"embedding sets must be (n, e) with equal e, got {a.shape} and {b.shape}")
    if len(a) < 2 or len(b) < 2:
        raise ValidationError("each embedding set needs at least 2 vectors")
    return frechet_distance(a.mean(0), np.cov(a, rowvar=False), b.mean(0), np.cov(b, rowvar=False), eps)
