"""Minibatch training loop with Adam and loss-plateau stopping."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable

import torch

from .optim import AdamState, adam_step

log = logging.getLogger(__name__)


class TrainingDivergedError(FloatingPointError):
    pass


class PlateauStopper:
    """Stop once the best loss has not improved by ``rel_threshold`` for ``patience`` evaluations."""

    def __init__(self, rel_threshold: float = 1e-3, patience: int = 10):
        self.rel_threshold = rel_threshold
        self.patience = patience
        self.best = math.inf
        self.stale = 0

    def update(self, value: float) -> bool:
        if value < self.best * (1.0 - self.rel_threshold) or self.best == math.inf:
            self.best = value
            self.stale = 0
        else:
            self.stale += 1
        return self.stale >= self.patience


def batch_indices(n: int, batch_size: int, seed: int, step: int) -> torch.Tensor:
    """Indices of the minibatch used at global ``step``; a pure function of its arguments."""
    batch_size = min(batch_size, n)
    per_epoch = n // batch_size
    epoch, k = divmod(step, per_epoch)
    perm = torch.randperm(n, generator=torch.Generator().manual_seed(seed * 1_000_003 + epoch))
    return perm[k * batch_size:(k + 1) * batch_size]


@dataclass
class TrainResult:
    losses: list[float] = field(default_factory=list)
    evaluations: list[float] = field(default_factory=list)
    steps: int = 0
    stopped_early: bool = False
    optimizer: AdamState | None = None


def fit(
    params: list[torch.Tensor],
    loss_fn: Callable[[torch.Tensor], torch.Tensor],
    n_samples: int,
    *,
    batch_size: int = 32,
    max_steps: int = 1000,
    lr: float = 1e-4,
    seed: int = 0,
    eval_every: int = 50,
    patience: int = 10,
    rel_threshold: float = 1e-3,
    start_step: int = 0,
    optimizer: AdamState | None = None,
    after_step: Callable[[int, float], None] | None = None,
) -> TrainResult:
    """Run Adam on ``loss_fn(batch_idx)`` until the step cap or a plateau.

    ``loss_fn`` receives the minibatch indices and returns a scalar loss
    tensor. A non-finite loss aborts with :class:`TrainingDivergedError`.
    """
    if n_samples < 1:
        raise ValueError("cannot train on an empty dataset")
    state = optimizer if optimizer is not None else AdamState(lr=lr)
    stopper = PlateauStopper(rel_threshold, patience)
    result = TrainResult(optimizer=state)
    window: list[float] = []
    step = start_step
    while step < max_steps:
        idx = batch_indices(n_samples, batch_size, seed, step)
        loss = loss_fn(idx)
        value = float(loss.detach())
        if not math.isfinite(value):
            raise TrainingDivergedError(f"loss became {value} at step {step}")
        grads = torch.autograd.grad(loss, params, allow_unused=True)
        adam_step(params, grads, state)
        step += 1
        result.losses.append(value)
        window.append(value)
        if after_step is not None:
            after_step(step, value)
        if len(window) == eval_every:
            mean = sum(window) / len(window)
            window.clear()
            result.evaluations.append(mean)
            log.debug("step %d loss %.6f", step, mean)
            if stopper.update(mean):
                result.stopped_early = True
                break
    result.steps = step
    return result
