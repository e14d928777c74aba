"""Training loop, checkpoint/resume and config files."""
import configparser
import csv
import logging
import os
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np
import torch

from . import cvae
from .errors import DataError, DivergenceError, ManifestError, ValidationError
from .losses import LossWeights, loss_kl, loss_reconstruction, loss_velocity
from .motion_core import FRAME_DIM, SHAPE_DIM

log = logging.getLogger(__name__)

HISTORY_COLUMNS = ("epoch", "L_re", "L_vel", "L_kl", "total")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 100
    batch_size: int = 8
    lr: float = 1e-4
    seed: int = 0
    checkpoint_every: int = 0
    grad_clip: float = 1.0
    weights: LossWeights = field(default_factory=LossWeights)

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1 or self.checkpoint_every < 0:
            raise ValidationError("epochs and batch_size must be positive, checkpoint_every >= 0")
        if not self.lr > 0:
            raise ValidationError(f"lr must be positive, got {self.lr}")


@dataclass(frozen=True, eq=False)
class Example:
    """One (audio, shape, motion) triple; audio already aligned to the motion frames."""

    audio: np.ndarray
    shape: np.ndarray
    motion: np.ndarray

    def __post_init__(self):
        audio = np.asarray(self.audio, dtype=np.float32)
        shape = np.asarray(getattr(self.shape, "beta", self.shape), dtype=np.float32)
        motion = np.asarray(getattr(self.motion, "data", self.motion), dtype=np.float32)
        if motion.ndim != 2 or motion.shape[1] != FRAME_DIM:
            raise ValidationError(f"motion must be (T, {FRAME_DIM}), got {motion.shape}")
        if audio.ndim != 2 or audio.shape[0] != motion.shape[0]:
            raise ValidationError(f"audio rows {audio.shape} do not match T={motion.shape[0]}")
        if shape.shape != (SHAPE_DIM,):
            raise ValidationError(f"shape must have length {SHAPE_DIM}")
        object.__setattr__(self, "audio", audio)
        object.__setattr__(self, "shape", shape)
        object.__setattr__(self, "motion", motion)


@dataclass
class TrainResult:
    model: cvae.MotionCVAE
    history: list
    step_history: list


def build_model(cfg, seed):
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return cvae.MotionCVAE(cfg)


def _stream_seed(*key):
    return int(np.random.SeedSequence(list(key)).generate_state(1, dtype=np.uint64)[0] >> 1)


def _batches(dataset, cfg, epoch):
    order = np.random.default_rng([cfg.seed, epoch]).permutation(len(dataset))
    for start in range(0, len(order), cfg.batch_size):
        items = [dataset[i] for i in order[start:start + cfg.batch_size]]
        if len({it.motion.shape[0] for it in items}) != 1:
            raise ValidationError("all sequences in a batch must have the same length")
        yield (torch.from_numpy(np.stack([it.motion for it in items])),
               torch.from_numpy(np.stack([it.shape for it in items])),
               torch.from_numpy(np.stack([it.audio for it in items])))


def _optimizer_arrays(opt):
    arrays, steps = {}, {}
    for idx, st in opt.state_dict()["state"].items():
        steps[str(idx)] = float(st["step"])
        arrays[f"opt.{idx}.exp_avg"] = st["exp_avg"].numpy()
        arrays[f"opt.{idx}.exp_avg_sq"] = st["exp_avg_sq"].numpy()
    return arrays, steps


def _restore_optimizer(opt, arrays, steps):
    sd = opt.state_dict()
    state = {}
    for key, step in steps.items():
        idx = int(key)
        try:
            state[idx] = {
                "step": torch.tensor(step),
                "exp_avg": torch.from_numpy(arrays[f"opt.{idx}.exp_avg"].copy()),
                "exp_avg_sq": torch.from_numpy(arrays[f"opt.{idx}.exp_avg_sq"].copy()),
            }
        except KeyError as exc:
            raise ManifestError(f"checkpoint is missing optimizer array {exc}") from None
    sd["state"] = state
    opt.load_state_dict(sd)


def save_training_state(path, model, opt, cfg, epoch, step, history, step_history):
    arrays, steps = _optimizer_arrays(opt)
    meta = {
        "train_config": _config_dict(cfg),
        "epoch": epoch,
        "step": step,
        "adam_steps": steps,
        "history": history,
        "step_history": step_history,
    }
    cvae.save_checkpoint(path, model, arrays, meta)


def _config_dict(cfg):
    d = asdict(cfg)
    d["weights"] = asdict(cfg.weights)
    return d


def train(model, dataset, cfg=TrainConfig(), checkpoint_dir=None, resume_from=None):
    """Fit ``model`` on a list of :class:`Example`. Returns a :class:`TrainResult`.

    Per-epoch history rows hold the mean pre-update component losses over the
    epoch's steps. Noise and shuffling come from counter-based streams keyed
    on (seed, step) and (seed, epoch), so a resumed run replays exactly.
    """
    dataset = list(dataset)
    if not dataset:
        raise DataError("training dataset is empty")
    w = cfg.weights
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr)
    history, step_history, start_epoch, step = [], [], 0, 0

    if resume_from is not None:
        loaded, meta, extras = cvae.load_checkpoint(resume_from, with_extras=True)
        if loaded.cfg != model.cfg:
            raise ValidationError("checkpoint model config differs from the model being trained")
        model.load_state_dict(loaded.state_dict())
        _restore_optimizer(opt, extras, meta.get("adam_steps", {}))
        start_epoch, step = int(meta["epoch"]), int(meta["step"])
        history = [dict(r) for r in meta.get("history", [])]
        step_history = [dict(r) for r in meta.get("step_history", [])]

    model.train()
    for epoch in range(start_epoch, cfg.epochs):
        sums = np.zeros(4)
        n_steps = 0
        for motion, shape, audio in _batches(dataset, cfg, epoch):
            gen = torch.Generator().manual_seed(_stream_seed(cfg.seed, step))
            noise = torch.randn(motion.shape[0], model.cfg.d, generator=gen)
            pred, mu, sigma = model(motion, shape, audio, noise)
            rec = loss_reconstruction(pred, motion)
            vel = loss_velocity(pred, motion) if motion.shape[1] > 1 else pred.new_zeros(())
            kl = loss_kl(mu, sigma)
            total = w.lambda_r * rec + w.lambda_v * vel + w.lambda_k * kl
            values = [rec.item(), vel.item(), kl.item(), total.item()]
            if not np.all(np.isfinite(values)):
                raise DivergenceError(
                    f"non-finite loss at epoch {epoch} step {step}: {values}", trace=step_history)
            opt.zero_grad(set_to_none=True)
            total.backward()
            if cfg.grad_clip > 0:
                torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
            opt.step()
            step_history.append(dict(zip(("L_re", "L_vel", "L_kl", "total"), values)))
            sums += values
            n_steps += 1
            step += 1
        row = {"epoch": epoch + 1, **dict(zip(HISTORY_COLUMNS[1:], (sums / n_steps).tolist()))}
        history.append(row)
        log.debug("epoch %d: %s", epoch + 1, row)

        done = epoch + 1 == cfg.epochs
        if checkpoint_dir is not None and (done or (cfg.checkpoint_every and (epoch + 1) % cfg.checkpoint_every == 0)):
            os.makedirs(checkpoint_dir, exist_ok=True)
            path = os.path.join(checkpoint_dir, f"epoch_{epoch + 1:06d}.ckpt")
            save_training_state(path, model, opt, cfg, epoch + 1, step, history, step_history)
    model.eval()
    return TrainResult(model, history, step_history)


def write_history_csv(path, history):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(HISTORY_COLUMNS)
        for row in history:
            writer.writerow([row["epoch"]] + [repr(float(row[k])) for k in HISTORY_COLUMNS[1:]])


def load_config(path, model_cfg=None, train_cfg=None):
    """Read ``[model]`` and ``[train]`` sections of an INI file over the given defaults."""
    parser = configparser.ConfigParser()
    if not parser.read(path):
        raise DataError(f"cannot read config file {path}")
    model_cfg = model_cfg or cvae.ModelConfig()
    train_cfg = train_cfg or TrainConfig()

    def typed(section, target):
        updates = {}
        types = {f.name: f.type for f in fields(target)}
        for key, raw in parser.items(section) if parser.has_section(section) else []:
            if key not in types or key == "weights":
                raise ValidationError(f"unknown key {key!r} in [{section}]")
            default = getattr(target, key)
            try:
                updates[key] = type(default)(raw)
            except ValueError:
                raise ValidationError(f"bad value for {section}.{key}: {raw!r}") from None
        return replace(target, **updates)

    model_cfg = typed("model", model_cfg)
    weights = typed("weights", train_cfg.weights)
    train_cfg = replace(typed("train", train_cfg), weights=weights)
    return model_cfg, train_cfg
