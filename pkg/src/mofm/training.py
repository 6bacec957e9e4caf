"""Shared epoch/batch loop with seeded, index-ordered randomness."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .kernel import AdamW, LRSchedule, backward, make_rng

log = logging.getLogger(__name__)


def epoch_rng(seed: int, epoch: int, salt: int = 0) -> np.random.Generator:
    """Randomness for one epoch depends only on (seed, epoch), so resuming is exact."""
    return make_rng([int(seed), int(epoch), int(salt)])


@dataclass
class TrainState:
    params: dict
    optimizer: AdamW
    schedule: LRSchedule
    steps_per_epoch: int
    epoch: int = 0
    history: list = field(default_factory=list)

    @property
    def step(self) -> int:
        return self.optimizer.state["step"]


def make_state(params: dict, cfg, n_items: int, decoupled: bool | None = None) -> TrainState:
    if n_items <= 0:
        raise ValueError("cannot train on an empty dataset")
    steps = math.ceil(n_items / cfg.batch_size)
    total = max(int(math.ceil(cfg.epochs * steps)), 1)
    kind = getattr(cfg, "schedule", "warmup_cosine")
    warm = int(round(cfg.warmup_epochs * steps))
    if decoupled is None:
        decoupled = getattr(cfg, "optimizer", "adamw") == "adamw"
    opt = AdamW(params, lr=cfg.peak_lr, betas=tuple(cfg.betas), weight_decay=cfg.weight_decay,
                decoupled=decoupled)
    return TrainState(params, opt, LRSchedule(kind, total, cfg.base_lr, cfg.peak_lr, warm), steps)


def run_epochs(state: TrainState, n_items: int, batch_size: int, epochs: float, step_fn, seed: int,
               stop_epoch: int | None = None, on_epoch=None) -> TrainState:
    """Train from ``state.epoch`` up to ``epochs`` (or ``stop_epoch``).

    ``step_fn(indices, rng, step)`` returns ``(loss, metrics)``; a ``None``
    loss skips the update. A fractional ``epochs`` trains the last epoch on
    a prefix of its batches.
    """
    total_steps = state.schedule.total_steps
    n_epochs = math.ceil(epochs)
    last = n_epochs if stop_epoch is None else min(stop_epoch, n_epochs)
    while state.epoch < last:
        rng = epoch_rng(seed, state.epoch)
        order = rng.permutation(n_items)
        sums: dict = {}
        count = 0
        for b in range(state.steps_per_epoch):
            if state.step >= total_steps:
                break
            idx = order[b * batch_size:(b + 1) * batch_size]
            loss, metrics = step_fn(idx, rng, state.step)
            if loss is None:
                continue
            grads = backward(loss, params=list(state.params.values()))
            named = {k: grads[p] for k, p in state.params.items()}
            state.optimizer.step(named, lr=state.schedule(state.step))
            metrics = dict(metrics, loss=float(loss.data))
            for k, v in metrics.items():
                sums[k] = sums.get(k, 0.0) + float(v)
            count += 1
        record = {k: v / max(count, 1) for k, v in sums.items()}
        record["epoch"] = state.epoch + 1
        state.history.append(record)
        log.info("epoch %d: %s", state.epoch + 1,
                 ", ".join(f"{k}={v:.4g}" for k, v in record.items() if k != "epoch"))
        state.epoch += 1
        if on_epoch is not None:
            on_epoch(state)
    return state
