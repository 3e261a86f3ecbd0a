"""SGD training loop over synthetic clips."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .autodiff import backward
from .backbone import Model, forward
from .dataio import DetectionClip
from .gridpool import SaturatedConfidences
from .losseval import detection_loss, evaluate

log = logging.getLogger(__name__)


class NonFiniteLoss(FloatingPointError):
    def __init__(self, message: str, grid=None, step: int = -1):
        super().__init__(message)
        self.grid = grid
        self.step = step


@dataclass
class OptimConfig:
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 5e-4
    milestones: tuple[int, ...] = (20,)
    gamma: float = 0.1
    fusion_lr_mult: float = 10.0
    grid_lr_mult: float = 3.0
    clip_norm: float = 5.0
    warmup_steps: int = 0


def _multiplier(cfg: OptimConfig, name: str) -> float:
    if name.startswith("fusion."):
        return cfg.fusion_lr_mult
    if ".gridhead." in name:
        return cfg.grid_lr_mult
    return 1.0


class SGD:
    """Momentum SGD with a per-parameter learning-rate multiplier."""

    def __init__(self, model: Model, cfg: OptimConfig):
        self.model = model
        self.cfg = cfg
        self.buffers: dict[str, np.ndarray] = {}
        self.mult = {n: _multiplier(cfg, n) for n in model.params}

    def step(self, lr: float) -> float:
        params = self.model.params
        sq = 0.0
        for p in params.values():
            if p.grad is not None:
                sq += float(np.sum(p.grad * p.grad))
        norm = math.sqrt(sq)
        scale = 1.0
        if self.cfg.clip_norm and norm > self.cfg.clip_norm:
            scale = self.cfg.clip_norm / norm
        for name, p in params.items():
            if p.grad is None:
                continue
            g = p.grad * scale
            if self.cfg.weight_decay:
                g = g + self.cfg.weight_decay * p.values
            buf = self.buffers.get(name)
            buf = g if buf is None else self.cfg.momentum * buf + g
            self.buffers[name] = buf
            # rebinding keeps any tensor that captured the old array intact
            p.values = p.values - lr * self.mult[name] * buf
        return norm


def lr_at(cfg: OptimConfig, epoch: int, step: int) -> float:
    lr = cfg.lr * cfg.gamma ** sum(epoch >= m for m in cfg.milestones)
    if cfg.warmup_steps and step < cfg.warmup_steps:
        lr *= (step + 1) / cfg.warmup_steps
    return lr


def make_batch(clips: Sequence[DetectionClip], model: Model, rng: np.random.Generator):
    """Strided features, random coarse segments and their raw-resolution labels."""
    cfg = model.config
    s = cfg.input_stride
    feats = np.stack([c.features[:, ::s] for c in clips])
    length = feats.shape[2]
    offs = rng.integers(0, length - cfg.T + 1, size=len(clips))
    labels = np.stack([c.labels[:, o * s:(o + cfg.T) * s] for c, o in zip(clips, offs)]).astype(np.float64)
    return feats, offs, labels


def train_step(model: Model, opt: SGD, feats, offs, labels, lr: float, step: int = -1) -> float:
    model.zero_grad()
    try:
        logits, spec = forward(model, feats, offs, T_out=labels.shape[-1], return_grid=True)
    except SaturatedConfidences as e:
        # saturated confidences make the grid degenerate; a numerical failure like a NaN loss
        raise NonFiniteLoss(f"degenerate sampling grid at step {step}: {e}", grid=e.p, step=step) from e
    loss = detection_loss(logits, labels)
    value = loss.item()
    if not math.isfinite(value):
        raise NonFiniteLoss(f"non-finite loss {value} at step {step}", grid=spec, step=step)
    backward(loss)
    opt.step(lr)
    return value


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_map: float
    lr: float


def fit(model: Model, train_clips: Sequence[DetectionClip], val_clips: Sequence[DetectionClip],
        optim: OptimConfig, epochs: int, batch_size: int, seed: int, eval_mode: str = "all-frames",
        start_epoch: int = 0, opt: Optional[SGD] = None,
        on_epoch: Optional[Callable[[EpochRecord, SGD], None]] = None) -> list[EpochRecord]:
    """Train for ``epochs`` epochs starting at ``start_epoch``; each epoch's shuffling is seeded by (seed, epoch)."""
    opt = opt or SGD(model, optim)
    steps_per_epoch = max(1, len(train_clips) // batch_size)
    history = []
    for epoch in range(start_epoch, start_epoch + epochs):
        rng = np.random.default_rng([seed, epoch])
        order = rng.permutation(len(train_clips))
        losses = []
        lr = lr_at(optim, epoch, 0)
        for b in range(steps_per_epoch):
            idx = order[b * batch_size:(b + 1) * batch_size]
            feats, offs, labels = make_batch([train_clips[i] for i in idx], model, rng)
            step = epoch * steps_per_epoch + b
            lr = lr_at(optim, epoch, step)
            losses.append(train_step(model, opt, feats, offs, labels, lr, step))
        val = evaluate(model, val_clips, eval_mode).mAP if len(val_clips) else float("nan")
        rec = EpochRecord(epoch, float(np.mean(losses)), val, lr)
        log.info("epoch %d loss %.5f val mAP %.4f", epoch, rec.train_loss, rec.val_map)
        history.append(rec)
        if on_epoch:
            on_epoch(rec, opt)
    return history


def overfit(model: Model, clips: Sequence[DetectionClip], optim: OptimConfig, steps: int, seed: int,
            target: Optional[float] = None) -> list[float]:
    """Repeat one fixed batch; stops early once the loss drops below ``target``."""
    opt = SGD(model, optim)
    rng = np.random.default_rng([seed, 0])
    feats, offs, labels = make_batch(clips, model, rng)
    losses = []
    for step in range(steps):
        losses.append(train_step(model, opt, feats, offs, labels, lr_at(optim, 0, step), step))
        if target is not None and losses[-1] < target:
            break
    return losses
