"""Training loops for the shortcut policy and the noise-prediction baseline."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .diffnet import AdamWState, PolicyNetwork, adamw_step
from .sampler import NoiseSchedule, build_ddpm_batch, ddpm_loss
from .shortcut import (
    K_SPLIT,
    P_DROP,
    STREAM_IDS,
    NumericalError,
    RngStreams,
    StepSizeGrid,
    TrainingSet,
    build_batch,
    dropout_rows,
    shortcut_loss,
)

log = logging.getLogger(__name__)


@dataclass
class TrainSettings:
    engine: str = "shortcut"
    epochs: int = 500
    batch_size: int = 256
    batches_per_epoch: int = 0  # 0: ceil(len(dataset) / batch_size)
    lr: float = 1e-4
    lr_schedule: str = "constant"  # or "cosine": decay from lr to 0 over all steps
    weight_decay: float = 0.1
    k_split: float = K_SPLIT
    grid_levels: int = 7
    p_drop: float = P_DROP
    mode: str = "action-concat"
    film_time: bool = False
    hidden: tuple[int, ...] = (256, 256, 256)
    diffusion_steps: int = 100
    num_tasks: int = 3

    def steps_per_epoch(self, n_records: int) -> int:
        if self.batches_per_epoch > 0:
            return self.batches_per_epoch
        return max(1, math.ceil(n_records / self.batch_size))

    def lr_at(self, step: int, total: int) -> float:
        """Learning rate for optimizer step ``step`` (0-based) of ``total``."""
        if self.lr_schedule == "constant":
            return self.lr
        if self.lr_schedule == "cosine":
            return 0.5 * self.lr * (1.0 + math.cos(math.pi * step / total))
        raise ValueError(f"unknown lr schedule {self.lr_schedule!r}")


@dataclass
class TrainState:
    net: PolicyNetwork
    opt: AdamWState
    streams: RngStreams
    epoch: int = 0
    history: list[tuple[int, float, float, float]] = field(default_factory=list)


def init_state(data: TrainingSet, seed: int, settings: TrainSettings) -> TrainState:
    num_tasks = int(data.task.max()) + 1
    init_rng = np.random.default_rng(seed ^ STREAM_IDS["init"])
    net = PolicyNetwork.create(init_rng, data.actions.shape[1], data.obs.shape[1],
                               max(num_tasks, settings.num_tasks), hidden=settings.hidden, mode=settings.mode,
                               film_time=settings.film_time)
    opt = AdamWState(lr=settings.lr, weight_decay=settings.weight_decay)
    return TrainState(net, opt, RngStreams.from_seed(seed))


def train(data: TrainingSet, seed: int, settings: TrainSettings, state: TrainState | None = None,
          on_epoch: Callable[[int, float, float, float], None] | None = None) -> TrainState:
    """Run epochs ``state.epoch .. settings.epochs - 1``.

    The logged loss of an epoch is the mean over its minibatches. Raises
    :class:`NumericalError` carrying the epoch and record index on a
    non-finite loss.
    """
    if len(data) == 0:
        raise ValueError("dataset is empty")
    state = state or init_state(data, seed, settings)
    grid = StepSizeGrid(settings.grid_levels)
    schedule = NoiseSchedule(settings.diffusion_steps)
    n_batches = settings.steps_per_epoch(len(data))
    total_steps = settings.epochs * n_batches
    net, opt, streams = state.net, state.opt, state.streams

    for epoch in range(state.epoch, settings.epochs):
        totals = np.zeros(3)
        for b in range(n_batches):
            opt.lr = settings.lr_at(epoch * n_batches + b, total_steps)
            try:
                if settings.engine == "shortcut":
                    batch = build_batch(data, streams, settings.batch_size, grid, settings.k_split)
                    batch.cond = dropout_rows(batch.cond, streams.dropout, settings.p_drop,
                                              net.num_tasks)
                    report = shortcut_loss(net, batch, grid=grid)
                    loss, grads = report.loss, report.grads
                    totals += (loss, report.flow, report.consistency)
                else:
                    dbatch = build_ddpm_batch(data, streams, settings.batch_size, schedule)
                    dbatch.cond = dropout_rows(dbatch.cond, streams.dropout, settings.p_drop,
                                               net.num_tasks)
                    loss, grads = ddpm_loss(net, dbatch, schedule)
                    totals += (loss, loss, 0.0)
            except NumericalError as exc:
                raise NumericalError(f"epoch {epoch}: {exc}", exc.record) from exc
            adamw_step(opt, net.params, grads)
        totals /= n_batches
        state.history.append((epoch, *map(float, totals)))
        state.epoch = epoch + 1
        if on_epoch is not None:
            on_epoch(epoch, *map(float, totals))
        if epoch % 50 == 0 or epoch == settings.epochs - 1:
            log.debug("epoch %d loss %.6f", epoch, totals[0])
    if not net.is_finite():
        raise NumericalError("parameters became non-finite")
    return state
