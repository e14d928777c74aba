"""Transformer conditional VAE over (expression, pose) motion sequences.

Both the encoder and the decoder are stacks of transformer decoder layers:
self-attention over the token stream, then cross-attention into the projected
audio features under a frame-aligned mask.
"""
import math
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from . import container
from .errors import DimensionMismatchError, ManifestError, ValidationError
from .motion_core import FRAME_DIM, SHAPE_DIM

SIGMA_FLOOR = 1e-6


@dataclass(frozen=True)
class ModelConfig:
    d: int = 256
    n_layers_enc: int = 2
    n_layers_dec: int = 2
    n_heads: int = 4
    ppe_period: int = 30
    d_a: int = 80
    ff_mult: int = 4
    dropout: float = 0.0
    mask_band: int = 0

    def __post_init__(self):
        for name in ("d", "n_layers_enc", "n_layers_dec", "n_heads", "ppe_period", "d_a", "ff_mult"):
            if int(getattr(self, name)) < 1:
                raise ValidationError(f"{name} must be positive, got {getattr(self, name)}")
        if self.d % self.n_heads:
            raise ValidationError(f"d={self.d} is not divisible by n_heads={self.n_heads}")
        if self.mask_band < 0:
            raise ValidationError("mask_band must be >= 0")
        if not 0.0 <= self.dropout < 1.0:
            raise ValidationError("dropout must lie in [0, 1)")


@dataclass(frozen=True, eq=False)
class LatentDistribution:
    mu: np.ndarray
    sigma: np.ndarray

    def __post_init__(self):
        mu = np.asarray(self.mu, dtype=np.float64).reshape(-1)
        sigma = np.asarray(self.sigma, dtype=np.float64).reshape(-1)
        if mu.shape != sigma.shape:
            raise ValidationError(f"mu {mu.shape} and sigma {sigma.shape} differ in shape")
        if not (np.all(np.isfinite(mu)) and np.all(np.isfinite(sigma))):
            raise ValidationError("latent distribution has non-finite parameters")
        if np.any(sigma <= 0):
            raise ValidationError("sigma must be strictly positive")
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "sigma", sigma)

    @property
    def d(self):
        return self.mu.size


def ppe(T, d, period):
    """Sinusoidal encoding of (position mod period); returns a (T, d) float64 array."""
    if T < 1 or period < 1:
        raise ValidationError(f"need T >= 1 and period >= 1, got T={T}, period={period}")
    pos = np.arange(period, dtype=np.float64)[:, None]
    div = np.exp(np.arange(0, d, 2, dtype=np.float64) * (-math.log(10000.0) / d))
    table = np.zeros((period, d))
    table[:, 0::2] = np.sin(pos * div)
    table[:, 1::2] = np.cos(pos * div[: d // 2])
    return table[np.arange(T) % period]


def alignment_mask(T_q, T_k, n_extra=0, band=0):
    """Boolean (n_extra + T_q, T_k) matrix, True where attention is allowed.

    Frame row t sees audio columns within ``band`` of t; the leading
    ``n_extra`` rows see every column.
    """
    if T_q != T_k:
        raise DimensionMismatchError(f"motion frames ({T_q}) and audio frames ({T_k}) differ")
    idx = np.arange(T_q)
    frames = np.abs(idx[:, None] - idx[None, :]) <= band
    return np.concatenate([np.ones((n_extra, T_k), dtype=bool), frames], axis=0)


def reparameterize(dist, noise):
    noise = np.asarray(noise, dtype=np.float64).reshape(-1)
    if noise.shape != dist.mu.shape:
        raise ValidationError(f"noise has shape {noise.shape}, latent is {dist.mu.shape}")
    return dist.mu + dist.sigma * noise


class _Stack(nn.Module):
    def __init__(self, cfg, n_layers):
        super().__init__()
        self.layers = nn.ModuleList(
            nn.TransformerDecoderLayer(
                cfg.d, cfg.n_heads, cfg.ff_mult * cfg.d, dropout=cfg.dropout,
                batch_first=True, norm_first=True)
            for _ in range(n_layers))
        self.norm = nn.LayerNorm(cfg.d)

    def forward(self, tokens, memory, memory_mask):
        # torch masks mark *blocked* positions
        blocked = ~memory_mask
        for layer in self.layers:
            tokens = layer(tokens, memory, memory_mask=blocked)
        return self.norm(tokens)


class MotionCVAE(nn.Module):
    def __init__(self, cfg=ModelConfig()):
        super().__init__()
        self.cfg = cfg
        d = cfg.d
        self.shape_embed = nn.Linear(SHAPE_DIM, d)
        self.audio_proj = nn.Linear(cfg.d_a, d)
        self.motion_proj = nn.Linear(FRAME_DIM, d)
        self.mu_token = nn.Parameter(torch.zeros(d))
        self.sigma_token = nn.Parameter(torch.zeros(d))
        self.encoder = _Stack(cfg, cfg.n_layers_enc)
        self.decoder = _Stack(cfg, cfg.n_layers_dec)
        self.out_proj = nn.Linear(d, FRAME_DIM)
        self.reset_parameters()

    def reset_parameters(self):
        for name, p in self.named_parameters():
            if p.dim() >= 2:
                nn.init.trunc_normal_(p, std=0.02, a=-0.04, b=0.04)
            elif name.endswith("bias"):
                nn.init.zeros_(p)
            elif "norm" in name:
                nn.init.ones_(p)
        nn.init.trunc_normal_(self.mu_token, std=0.02, a=-0.04, b=0.04)
        nn.init.trunc_normal_(self.sigma_token, std=0.02, a=-0.04, b=0.04)

    def _ppe(self, n, like):
        return torch.as_tensor(ppe(n, self.cfg.d, self.cfg.ppe_period), dtype=like.dtype)

    def _memory_mask(self, T, n_extra):
        mask = alignment_mask(T, T, n_extra, self.cfg.mask_band)
        return torch.from_numpy(mask)

    def _check(self, audio, shape, T, motion=None):
        if audio.dim() != 3 or audio.shape[-1] != self.cfg.d_a:
            raise DimensionMismatchError(f"audio must be (B, T, {self.cfg.d_a}), got {tuple(audio.shape)}")
        if audio.shape[1] != T:
            raise DimensionMismatchError(f"audio has {audio.shape[1]} rows, expected T={T}")
        if shape.dim() != 2 or shape.shape != (audio.shape[0], SHAPE_DIM):
            raise DimensionMismatchError(f"shape must be (B, {SHAPE_DIM}), got {tuple(shape.shape)}")
        if motion is not None and (motion.dim() != 3 or motion.shape[0] != audio.shape[0]
                                   or motion.shape[2] != FRAME_DIM):
            raise DimensionMismatchError(f"motion must be (B, T, {FRAME_DIM}), got {tuple(motion.shape)}")

    def encode(self, motion, shape, audio):
        """(B, T, 100), (B, 100), (B, T, d_a) -> mu, sigma each (B, d)."""
        B, T = motion.shape[:2]
        self._check(audio, shape, T, motion)
        frames = self.motion_proj(motion) + self.shape_embed(shape)[:, None, :]
        extra = torch.stack([self.mu_token, self.sigma_token]).expand(B, -1, -1)
        tokens = torch.cat([extra, frames], dim=1)
        tokens = tokens + self._ppe(T + 2, tokens)
        out = self.encoder(tokens, self.audio_proj(audio), self._memory_mask(T, 2))
        return out[:, 0], F.softplus(out[:, 1]) + SIGMA_FLOOR

    def decode(self, z, shape, audio):
        """(B, d), (B, 100), (B, T, d_a) -> motion (B, T, 100)."""
        B, T = audio.shape[:2]
        self._check(audio, shape, T)
        if z.shape != (B, self.cfg.d):
            raise DimensionMismatchError(f"z must be (B, {self.cfg.d}), got {tuple(z.shape)}")
        tokens = torch.cat([self.shape_embed(shape)[:, None, :],
                            z[:, None, :].expand(B, T, self.cfg.d)], dim=1)
        tokens = tokens + self._ppe(T + 1, tokens)
        out = self.decoder(tokens, self.audio_proj(audio), self._memory_mask(T, 1))
        return self.out_proj(out[:, 1:])

    def forward(self, motion, shape, audio, noise):
        mu, sigma = self.encode(motion, shape, audio)
        z = mu + sigma * noise
        return self.decode(z, shape, audio), mu, sigma


# numpy-facing wrappers around single (unbatched) examples

def _tensor(x, model):
    dtype = next(model.parameters()).dtype
    return torch.tensor(np.asarray(x), dtype=dtype)[None]


def encode(model, seq, shape, audio):
    from .motion_core import MotionSequence

    motion = seq.data if isinstance(seq, MotionSequence) else seq
    with torch.no_grad():
        mu, sigma = model.encode(_tensor(motion, model), _tensor(shape.beta, model), _tensor(audio, model))
    return LatentDistribution(mu[0].double().numpy(), sigma[0].double().numpy())


def decode(model, z, shape, audio, T=None, fps=30.0):
    from .motion_core import MotionSequence

    audio = np.asarray(audio)
    if T is not None and audio.shape[0] != T:
        raise DimensionMismatchError(f"audio has {audio.shape[0]} rows, expected T={T}")
    with torch.no_grad():
        out = model.decode(_tensor(z, model), _tensor(shape.beta, model), _tensor(audio, model))
    return MotionSequence(out[0].double().numpy(), fps)


def save_checkpoint(path, model, extra_arrays=None, extra_meta=None):
    arrays = {f"param.{k}": v.detach().cpu().numpy() for k, v in model.state_dict().items()}
    arrays.update(extra_arrays or {})
    meta = {"kind": "checkpoint", "config": asdict(model.cfg)}
    meta.update(extra_meta or {})
    container.write_arrays(path, arrays, meta)


def load_checkpoint(path, with_extras=False):
    meta, arrays = container.read_arrays(path)
    if meta.get("kind") != "checkpoint":
        raise ManifestError(f"{path}: not a checkpoint (kind={meta.get('kind')!r})")
    try:
        cfg = ModelConfig(**meta["config"])
    except (KeyError, TypeError) as exc:
        raise ManifestError(f"{path}: bad model config ({exc})") from None
    model = MotionCVAE(cfg)
    state = model.state_dict()
    params = {k[len("param."):]: v for k, v in arrays.items() if k.startswith("param.")}
    if set(params) != set(state):
        raise ManifestError(f"{path}: parameter names do not match the model config")
    for k, v in params.items():
        if tuple(v.shape) != tuple(state[k].shape):
            raise DimensionMismatchError(f"{path}: {k} has shape {v.shape}, expected {tuple(state[k].shape)}")
    model.load_state_dict({k: torch.from_numpy(v.copy()) for k, v in params.items()})
    model.eval()
    if with_extras:
        rest = {k: v for k, v in arrays.items() if not k.startswith("param.")}
        return model, meta, rest
    return model
