"""Training loop: lesion-biased window sampling, augmentation, Adam."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import checkpoint
from .config import TrainConfig, lr_at, value_at
from .data.augment import augment
from .data.volume import Volume, dataset_mean
from .data.windows import WindowSampler
from .losses import LOSSES
from .model import SpinModel
from .optim import AdamState, adam_step
from .tensor import backward

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainResult:
    model: SpinModel
    adam: AdamState
    mu: float
    losses: list[tuple[int, float]] = field(default_factory=list)
    steps_per_epoch: int = 0
    seconds: float = 0.0


def steps_per_epoch(cfg: TrainConfig, num_windows: int) -> int:
    if cfg.steps_per_epoch:
        return cfg.steps_per_epoch
    return max(1, math.ceil(num_windows / cfg.batch_size))


def make_batch(windows) -> tuple[np.ndarray, np.ndarray]:
    x = np.stack([w.x for w in windows]).astype(np.float32, copy=False)
    y = np.stack([w.ybar for w in windows]).astype(np.float32)
    return x, y


def _input_stats(x: np.ndarray, y: np.ndarray) -> str:
    return (
        f"x shape={x.shape} min={x.min():.4g} max={x.max():.4g} mean={x.mean():.4g} "
        f"finite={bool(np.isfinite(x).all())}; label positives={int(y.sum())}"
    )


def train(
    volumes: list[Volume],
    cfg: TrainConfig,
    model: SpinModel | None = None,
    checkpoint_path=None,
    on_step=None,
) -> TrainResult:
    """Train ``model`` (a fresh one seeded with ``cfg.seed`` by default).

    The dataset mean used for slice padding is taken over ``volumes`` only.
    With ``checkpoint_path`` set and ``cfg.checkpoint_every`` > 0, a checkpoint
    is written every that many epochs and at the end.
    """
    if not volumes:
        raise ValueError("training set is empty")
    if model is None:
        model = SpinModel(cfg.model_config(), seed=cfg.seed)
    mu = dataset_mean(volumes)
    sampler = WindowSampler(volumes, cfg.input_slices, mu, cfg.lesion_probability)
    spe = steps_per_epoch(cfg, sampler.num_windows)
    rng = np.random.default_rng(cfg.seed)
    adam = AdamState()
    loss_fn = LOSSES[cfg.loss]
    result = TrainResult(model=model, adam=adam, mu=mu, steps_per_epoch=spe)
    t0 = time.perf_counter()
    step = 0
    done = False
    for epoch in range(cfg.epochs):
        lr = lr_at(cfg.lr_schedule, epoch)
        p = value_at(cfg.aug_prob_schedule, epoch)
        for _ in range(spe):
            batch = [augment(sampler.sample(rng), rng, p) for _ in range(cfg.batch_size)]
            x, y = make_batch(batch)
            model.zero_grad()
            out = model(x)
            loss = loss_fn(out.f, y)
            value = loss.data.item()
            if not math.isfinite(value):
                raise TrainingError(f"non-finite loss {value} at step {step + 1}: {_input_stats(x, y)}")
            if lr > 0:
                backward(loss)
                adam_step(model.params, model.grads(), adam, lr)
            step += 1
            result.losses.append((step, value))
            if on_step is not None:
                on_step(step, epoch, value)
            if cfg.max_steps and step >= cfg.max_steps:
                done = True
                break
        if checkpoint_path is not None and cfg.checkpoint_every and (epoch + 1) % cfg.checkpoint_every == 0:
            checkpoint.save(checkpoint_path, model.state_dict(), adam)
        if done:
            break
    model.zero_grad()
    result.seconds = time.perf_counter() - t0
    if checkpoint_path is not None:
        checkpoint.save(checkpoint_path, model.state_dict(), adam)
    log.info("trained %d steps in %.1fs, final loss %.4g", step, result.seconds, result.losses[-1][1])
    return result


def format_loss_curve(losses) -> str:
    return "".join(f"{s}\t{v!r}\n" for s, v in losses)


def write_loss_curve(path, losses) -> None:
    checkpoint.atomic_write_bytes(Path(path), format_loss_curve(losses).encode())
