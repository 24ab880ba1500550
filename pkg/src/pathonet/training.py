"""MSE + Adam training loop with step-decayed learning rate."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .labels import LabelRenderConfig, augment, render_density_map
from .model import ModelParams, forward
from .tensor import AdamState, LrSchedule, Tensor, adam_step, grad, mse

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 1
    schedule: LrSchedule = LrSchedule()
    seed: int = 0
    augment: bool = True
    max_steps: int | None = None

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")


@dataclass
class EpochLog:
    epoch: int
    lr: float
    mean_loss: float
    steps: int

    def line(self) -> str:
        return f"epoch={self.epoch} lr={self.lr:.6g} loss={self.mean_loss:.6f} steps={self.steps}"


@dataclass
class TrainHistory:
    step_losses: list[float] = field(default_factory=list)
    epochs: list[EpochLog] = field(default_factory=list)


def to_input(image: np.ndarray) -> np.ndarray:
    """H x W x 3 uint8 -> 3 x H x W float32 in [0, 1]."""
    return (np.asarray(image, dtype=np.float32) / 255.0).transpose(2, 0, 1)


def make_samples(tiles: Sequence[tuple[np.ndarray, np.ndarray]], use_augment: bool = True
                 ) -> list[tuple[np.ndarray, np.ndarray]]:
    """(image, label) pairs -> network-ready (input, target) pairs, optionally
    expanded with the six flip/rotation variants."""
    samples = []
    for image, label in tiles:
        variants = augment(image, label) if use_augment else [(image, label)]
        samples.extend((to_input(im), lab.astype(np.float32)) for im, lab in variants)
    return samples


def samples_from_annotations(tiles, render_cfg: LabelRenderConfig | None = None, use_augment: bool = True):
    """(image, cells) pairs -> training samples with rendered density labels."""
    pairs = [(im, render_density_map(cells, im.shape[:2], render_cfg)) for im, cells in tiles]
    return make_samples(pairs, use_augment)


def dataset_loss(params: ModelParams, samples: Sequence[tuple[np.ndarray, np.ndarray]]) -> float:
    total = 0.0
    for x, y in samples:
        total += float(mse(forward(params, x), y[None]).data)
    return total / len(samples)


def train(params: ModelParams, samples: Sequence[tuple[np.ndarray, np.ndarray]],
          cfg: TrainConfig | None = None, state: AdamState | None = None) -> TrainHistory:
    """Train ``params`` in place.

    One epoch is one shuffled pass over ``samples`` (already augmented); the
    learning rate for epoch e is ``cfg.schedule.lr(e)``.  Training stops early
    after ``cfg.max_steps`` optimizer steps.
    """
    cfg = cfg or TrainConfig()
    if not samples:
        raise ValueError("no training samples")
    params.requires_grad_(True)
    names = list(params.tensors)
    state = state or AdamState.zeros_like(params.tensors)
    rng = np.random.default_rng(cfg.seed)
    history = TrainHistory()
    steps = 0
    for epoch in range(cfg.epochs):
        lr = cfg.schedule.lr(epoch)
        order = rng.permutation(len(samples))
        losses = []
        for start in range(0, len(order), cfg.batch_size):
            if cfg.max_steps is not None and steps >= cfg.max_steps:
                break
            idx = order[start:start + cfg.batch_size]
            x = Tensor(np.stack([samples[i][0] for i in idx]))
            y = np.stack([samples[i][1] for i in idx])
            loss = mse(forward(params, x), y)
            grads = grad(loss, [params.tensors[n] for n in names])
            adam_step(params.tensors, dict(zip(names, grads)), state, lr)
            losses.append(float(loss.data))
            steps += 1
        if losses:
            entry = EpochLog(epoch, lr, float(np.mean(losses)), len(losses))
            history.epochs.append(entry)
            history.step_losses.extend(losses)
            log.info(entry.line())
        if cfg.max_steps is not None and steps >= cfg.max_steps:
            break
    for t in params.tensors.values():
        t.grad = None
    params.requires_grad_(False)
    return history
