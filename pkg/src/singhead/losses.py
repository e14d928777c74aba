"""Training losses. Work on numpy arrays, torch tensors, or MotionSequence.

Squared norms are normalised by element count so values do not scale with T.
The same ``motion_distance`` functional backs the evaluation metrics.
"""
from dataclasses import dataclass

import numpy as np

from .errors import ValidationError


def _arr(x):
    data = getattr(x, "data", None)
    if data is not None and hasattr(x, "fps"):
        return np.asarray(data, dtype=np.float64)
    return x


def _is_torch(x):
    return type(x).__module__.startswith("torch")


def _check_pair(pred, gt):
    if tuple(pred.shape) != tuple(gt.shape):
        raise ValidationError(f"shape mismatch: {tuple(pred.shape)} vs {tuple(gt.shape)}")


def motion_distance(pred, gt):
    """Element-mean squared difference."""
    pred, gt = _arr(pred), _arr(gt)
    _check_pair(pred, gt)
    return ((pred - gt) ** 2).mean()


loss_reconstruction = motion_distance


def _velocity(x):
    return x[..., 1:, :] - x[..., :-1, :]


def loss_velocity(pred, gt):
    pred, gt = _arr(pred), _arr(gt)
    _check_pair(pred, gt)
    if pred.shape[-2] < 2:
        raise ValidationError("velocity loss needs at least 2 frames")
    return ((_velocity(pred) - _velocity(gt)) ** 2).mean()


def loss_kl(mu, sigma=None):
    """KL(N(mu, sigma^2) || N(0, I)), summed over latent dims (mean over any batch)."""
    if sigma is None:
        mu, sigma = mu.mu, mu.sigma
    if _is_torch(sigma):
        import torch

        if bool((sigma <= 0).any()):
            raise ValidationError("sigma must be strictly positive")
        var = sigma ** 2
        kl = 0.5 * (mu ** 2 + var - 1.0 - torch.log(var)).sum(-1)
    else:
        mu, sigma = np.asarray(mu, dtype=np.float64), np.asarray(sigma, dtype=np.float64)
        if np.any(sigma <= 0):
            raise ValidationError("sigma must be strictly positive")
        var = sigma ** 2
        kl = 0.5 * (mu ** 2 + var - 1.0 - np.log(var)).sum(-1)
    return kl.mean() if kl.ndim else kl


@dataclass(frozen=True)
class LossWeights:
    lambda_r: float = 1.0
    lambda_v: float = 1.0
    lambda_k: float = 1e-4

    def __post_init__(self):
        w = (self.lambda_r, self.lambda_v, self.lambda_k)
        if any(not np.isfinite(v) or v < 0 for v in w):
            raise ValidationError(f"loss weights must be finite and >= 0, got {w}")
        if not any(w):
            raise ValidationError("at least one loss weight must be positive")


def loss_components(pred, gt, mu, sigma=None):
    return loss_reconstruction(pred, gt), loss_velocity(pred, gt), loss_kl(mu, sigma)


def loss_total(pred, gt, dist, weights=LossWeights(), sigma=None):
    rec, vel, kl = loss_components(pred, gt, dist, sigma)
    return weights.lambda_r * rec + weights.lambda_v * vel + weights.lambda_k * kl


# closed-form gradients (numpy); used by gradient checks

def loss_reconstruction_grad(pred, gt):
    pred, gt = np.asarray(pred, dtype=np.float64), np.asarray(gt, dtype=np.float64)
    _check_pair(pred, gt)
    return 2.0 * (pred - gt) / pred.size


def loss_velocity_grad(pred, gt):
    pred, gt = np.asarray(pred, dtype=np.float64), np.asarray(gt, dtype=np.float64)
    _check_pair(pred, gt)
    r = _velocity(pred) - _velocity(gt)
    g = np.zeros_like(pred)
    scale = 2.0 / r.size
    g[..., 1:, :] += scale * r
    g[..., :-1, :] -= scale * r
    return g


def loss_kl_grad(mu, sigma):
    mu, sigma = np.asarray(mu, dtype=np.float64), np.asarray(sigma, dtype=np.float64)
    return mu.copy(), sigma - 1.0 / sigma
