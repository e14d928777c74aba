"""Decoder-only sampling of diverse motion sequences."""
import json
import os

import numpy as np
import torch

from .audio import AudioClip, features_for_motion, frames_for_duration
from .errors import ValidationError
from .motion_core import DEFAULT_FPS, MotionSequence, save_motion


def sample_seed(seed, index):
    """Counter-based per-sample seed: sample i never depends on how many are drawn."""
    return int(np.random.SeedSequence([int(seed), int(index)]).generate_state(1, dtype=np.uint64)[0])


def sample_latent(seed, index, d):
    return np.random.default_rng(sample_seed(seed, index)).standard_normal(d)


def generate(model, audio, shape, n=1, seed=0, fps=DEFAULT_FPS, backend=None, z=None):
    """Return ``n`` sequences decoded from independent prior draws.

    ``audio`` may be an :class:`AudioClip` or a pre-aligned (T, d_a) feature
    matrix. ``z`` forces the latent of every sample (shape (d,) or (n, d)).
    """
    if n < 1:
        raise ValidationError(f"sample count must be >= 1, got {n}")
    if isinstance(audio, AudioClip):
        T = frames_for_duration(audio.duration, fps)
        if T < 1:
            raise ValidationError(
                f"audio of {audio.duration:.4f}s is shorter than one frame at {fps} fps")
        feats = features_for_motion(audio, fps, backend, T)
    else:
        feats = np.asarray(audio, dtype=np.float64)
        if feats.ndim != 2 or feats.shape[0] < 1:
            raise ValidationError(f"aligned audio must be (T>=1, d_a), got {feats.shape}")
    d = model.cfg.d
    if z is None:
        latents = np.stack([sample_latent(seed, i, d) for i in range(n)])
    else:
        latents = np.broadcast_to(np.asarray(z, dtype=np.float64), (n, d)).copy()

    dtype = next(model.parameters()).dtype
    audio_t = torch.as_tensor(feats, dtype=dtype)[None]
    shape_t = torch.tensor(shape.beta, dtype=dtype)[None]
    out = []
    model.eval()
    with torch.no_grad():
        # one decode per sample keeps sample i bitwise independent of n
        for i in range(n):
            zi = torch.as_tensor(latents[i], dtype=dtype)[None]
            motion = model.decode(zi, shape_t, audio_t)[0]
            out.append(MotionSequence(motion.double().numpy(), fps))
    return out


def write_samples(samples, shape, out_dir, seed, extra=None):
    """Write one motion file per sample plus ``manifest.json``; returns the manifest path."""
    os.makedirs(out_dir, exist_ok=True)
    entries = []
    for i, seq in enumerate(samples):
        name = f"sample_{i:03d}.motion"
        save_motion(seq, shape, os.path.join(out_dir, name), identity=f"sample-{i}")
        entries.append({"index": i, "file": name, "seed": sample_seed(seed, i), "T": len(seq)})
    manifest = {"seed": int(seed), "n": len(samples), "samples": entries}
    manifest.update(extra or {})
    path = os.path.join(out_dir, "manifest.json")
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path
