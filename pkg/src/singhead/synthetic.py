"""Small synthetic (audio, shape, motion) datasets for smoke tests and demos."""
import numpy as np

from .motion_core import EXPR_DIM, FRAME_DIM, SHAPE_DIM
from .training import Example


def smooth_features(rng, T, dim, fps=30.0, n_waves=4):
    t = np.arange(T)[:, None] / fps
    freqs = rng.uniform(0.3, 3.0, size=(n_waves, dim))
    phases = rng.uniform(0, 2 * np.pi, size=(n_waves, dim))
    amps = rng.normal(size=(n_waves, dim)) / np.sqrt(n_waves)
    return sum(amps[k] * np.sin(2 * np.pi * freqs[k] * t + phases[k]) for k in range(n_waves))


def make_dataset(n, T=60, d_a=80, seed=0, fps=30.0):
    """Motion is a fixed linear function of the audio plus a per-identity bias."""
    rng = np.random.default_rng(seed)
    audio_map = rng.normal(size=(d_a, FRAME_DIM)) / np.sqrt(d_a)
    audio_map[:, EXPR_DIM + 6:] = 0.0  # most pose dims stay still
    shape_map = rng.normal(size=(SHAPE_DIM, FRAME_DIM)) * 0.02
    out = []
    for _ in range(n):
        audio = smooth_features(rng, T, d_a, fps)
        shape = rng.normal(size=SHAPE_DIM)
        motion = 0.5 * audio @ audio_map + shape @ shape_map
        out.append(Example(audio, shape, motion))
    return out


def make_landmark_sequence(model, T=60, seed=0, beta=None, fps=30.0, noise_px=0.0):
    """Smooth ground-truth head motion and its projected 68-point tracks.

    Returns (beta, X, observed): X is (T, 59) per-frame [expression, jaw,
    global rotation, scale, tx, ty], observed is (T, 68, 2) pixels.
    """
    from .headfit import N_FRAME_PARAMS, _frame_residual, _landmark_bases

    rng = np.random.default_rng(seed)
    beta = rng.normal(size=SHAPE_DIM) * 0.5 if beta is None else np.asarray(beta, dtype=np.float64)
    t = np.arange(T)[:, None] / fps
    X = np.zeros((T, N_FRAME_PARAMS))
    X[:, :EXPR_DIM] = smooth_features(rng, T, EXPR_DIM, fps) * 0.8
    X[:, EXPR_DIM:EXPR_DIM + 6] = smooth_features(rng, T, 6, fps) * 0.08
    X[:, EXPR_DIM + 6] = 2000.0 * (1 + 0.05 * np.sin(2 * np.pi * 0.4 * t[:, 0]))
    X[:, EXPR_DIM + 7:] = 256.0 + 10.0 * smooth_features(rng, T, 2, fps)
    base, E = _landmark_bases(model, beta)
    zero = np.zeros((68, 2))
    observed = np.stack([_frame_residual(model, base, E, x, zero, need_jac=False)[0].reshape(68, 2)
                         for x in X])
    if noise_px:
        observed = observed + rng.normal(scale=noise_px, size=observed.shape)
    return beta, X, observed
