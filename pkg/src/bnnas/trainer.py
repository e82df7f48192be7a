"""Supernet training under a sampling policy, and subnet retraining from scratch."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from . import engine
from .data import Dataset
from .engine import LrSchedule, NonFiniteError, OptimState, lr_at, sgd_step
from .indicator import top1_accuracy
from .space import (SpaceConfig, Supernet, backward_path, build_subnet, forward_path,
                    sample_fair_round, sample_uniform, trainable_filter)

log = logging.getLogger(__name__)

POLICIES = ("uniform", "fair")
MODES = ("bn_only", "all_params")


@dataclass
class TrainConfig:
    epochs: int = 10
    policy: str = "uniform"
    mode: str = "bn_only"
    batch_size: int = 64
    warmup_epochs: int = 5
    lr_start: float = 0.2
    lr_peak: float = 0.8
    smooth: float = 0.1
    weight_decay: float = 1e-4
    momentum: float = 0.9
    snapshot_every: int = 1
    train_stem_head_bn: bool = True

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.snapshot_every < 1:
            raise ValueError("snapshot_every must be >= 1")
        if self.policy not in POLICIES:
            raise ValueError(f"policy must be one of {POLICIES}")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")

    @property
    def schedule(self) -> LrSchedule:
        # short desk-scale runs cannot afford the full warm-up
        return LrSchedule(self.epochs, min(self.warmup_epochs, self.epochs - 1), self.lr_start, self.lr_peak)

    def to_dict(self) -> dict:
        return asdict(self)


def bn_only_epochs(all_params_epochs: int) -> int:
    """Supernet epochs for BN-only training: one tenth of the full budget, rounded up."""
    return max(1, math.ceil(all_params_epochs / 10))


@dataclass
class BnSnapshot:
    epoch: int
    gammas: list  # gammas[l][n] = |gamma| of op (l, n)'s last BN
    loss: float | None = None

    def scores(self) -> np.ndarray:
        return np.array([[float(np.mean(np.abs(g), dtype=np.float64)) for g in row] for row in self.gammas])


def take_snapshot(supernet: Supernet, epoch: int, loss: float | None = None) -> BnSnapshot:
    gammas = [[np.abs(op.project_bn.gamma).copy() for op in row] for row in supernet.ops]
    return BnSnapshot(epoch, gammas, loss)


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch: int, iteration: int, lr: float):
        super().__init__(f"non-finite loss at epoch {epoch}, iteration {iteration}, lr={lr:.6g}")
        self.epoch, self.iteration, self.lr = epoch, iteration, lr


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    perm = rng.permutation(n)
    for i in range(0, n, batch_size):
        yield perm[i:i + batch_size]


def _accumulate(total: dict, grads: dict) -> None:
    for k, g in grads.items():
        if k in total:
            total[k] = total[k] + g
        else:
            total[k] = g


def _step(net, archs, xb, yb, want, smooth):
    grads: dict = {}
    losses = []
    for arch in archs:
        logits, cache = forward_path(net, arch, xb, train=True)
        loss, g = engine.softmax_ce_label_smoothing(logits, yb, smooth)
        losses.append(loss)
        _accumulate(grads, backward_path(net, cache, g, want))
    return float(np.mean(losses)), grads


IterationHook = Callable[[int, int, list, float], None]


def train_supernet(supernet: Supernet, data: Dataset, cfg: TrainConfig, rng: np.random.Generator,
                   state: OptimState | None = None, on_iteration: IterationHook | None = None) -> list[BnSnapshot]:
    """Train the supernet; returns BN snapshots (epoch 0 = initial state).

    ``uniform`` draws one random path per iteration. ``fair`` draws N paths
    covering every candidate once per layer, sums their gradients and takes
    a single optimizer step. ``on_iteration(epoch, it, archs, loss)`` is
    called after every optimizer step.
    """
    if len(data) == 0:
        raise ValueError("training set is empty")
    if state is None:
        state = OptimState(cfg.momentum, cfg.weight_decay)
    want = trainable_filter(cfg.mode, cfg.train_stem_head_bn)
    params = supernet.parameters()
    schedule = cfg.schedule
    iters = math.ceil(len(data) / cfg.batch_size)
    snapshots = [take_snapshot(supernet, 0)]
    for epoch in range(cfg.epochs):
        losses = []
        for it, idx in enumerate(_batches(len(data), cfg.batch_size, rng)):
            lr = lr_at(schedule, epoch + it / iters)
            if cfg.policy == "fair":
                archs = sample_fair_round(supernet.space, rng)
            else:
                archs = [sample_uniform(supernet.space, rng)]
            try:
                loss, grads = _step(supernet, archs, data.x[idx], data.y[idx], want, cfg.smooth)
            except NonFiniteError as e:
                raise TrainingDiverged(epoch, it, lr) from e
            sgd_step(params, grads, state, lr)
            losses.append(loss)
            if on_iteration is not None:
                on_iteration(epoch, it, archs, loss)
        mean_loss = float(np.mean(losses))
        log.info("supernet epoch %d/%d loss %.4f", epoch + 1, cfg.epochs, mean_loss)
        if (epoch + 1) % cfg.snapshot_every == 0:
            snapshots.append(take_snapshot(supernet, epoch + 1, mean_loss))
    return snapshots


def train_subnet(net, train: Dataset, cfg: TrainConfig, rng: np.random.Generator) -> list[float]:
    """Train every parameter of a standalone subnet; returns per-epoch mean loss."""
    state = OptimState(cfg.momentum, cfg.weight_decay)
    params = net.parameters()
    want = trainable_filter("all_params")
    schedule = cfg.schedule
    iters = math.ceil(len(train) / cfg.batch_size)
    history = []
    for epoch in range(cfg.epochs):
        losses = []
        for it, idx in enumerate(_batches(len(train), cfg.batch_size, rng)):
            lr = lr_at(schedule, epoch + it / iters)
            try:
                loss, grads = _step(net, [None], train.x[idx], train.y[idx], want, cfg.smooth)
            except NonFiniteError as e:
                raise TrainingDiverged(epoch, it, lr) from e
            sgd_step(params, grads, state, lr)
            losses.append(loss)
        history.append(float(np.mean(losses)))
    return history


def retrain_subnet(space: SpaceConfig, arch, train: Dataset, val: Dataset, cfg: TrainConfig, seed: int):
    """Fresh init + full training of ``arch``; returns (subnet, val top-1 accuracy)."""
    net = build_subnet(space, arch, seed)
    train_subnet(net, train, cfg, np.random.default_rng(seed))
    return net, evaluate(net, val)


def evaluate(net, split: Dataset, arch=None) -> float:
    """Eval-mode top-1 accuracy. ``arch`` is required for a supernet."""
    return top1_accuracy(net, arch, split.x, split.y)
