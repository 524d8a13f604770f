"""
Joint optimization of the mean network f_θ and the covariance network g_Θ.

Every method trained with the same seed consumes the same batch schedule. Each
network has its own Adam state and step-decay schedule.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from app.schemas.experiment import MethodKind, TrainConfig
from app.services.covariance_service import head_width
from app.services.data_service import Dataset
from app.services.loss_service import Method, method_objective
from app.services.mlp_service import (
    Mlp,
    ParamGrads,
    backprop_params,
    forward,
    forward_with_input_derivatives,
    init_mlp,
)

logger = logging.getLogger(__name__)

BatchSchedule = list[list[np.ndarray]]


class TrainingError(Exception):
    pass


class DivergedLoss(TrainingError):
    """A loss, gradient or parameter update became non-finite."""


class Adam:
    """Adam with bias correction; updates the parameter arrays in place."""

    def __init__(
        self,
        params: Sequence[np.ndarray],
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
    ) -> None:
        self.params = list(params)
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p) for p in self.params]
        self.v = [np.zeros_like(p) for p in self.params]

    def step(self, grads: Sequence[np.ndarray], lr: float) -> None:
        if len(grads) != len(self.params):
            raise TrainingError(f"Got {len(grads)} gradients for {len(self.params)} parameters")
        t = self.t + 1
        new_m = []
        new_v = []
        updated = []
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m_t = self.beta1 * m + (1.0 - self.beta1) * g
            v_t = self.beta2 * v + (1.0 - self.beta2) * g * g
            m_hat = m_t / (1.0 - self.beta1**t)
            v_hat = v_t / (1.0 - self.beta2**t)
            candidate = p - lr * m_hat / (np.sqrt(v_hat) + self.eps)
            if not np.all(np.isfinite(candidate)):
                raise DivergedLoss(f"Adam step {t} produced non-finite parameters")
            new_m.append(m_t)
            new_v.append(v_t)
            updated.append(candidate)

        # Commit only after every array passed the finiteness check.
        for p, value in zip(self.params, updated):
            p[...] = value
        self.m = new_m
        self.v = new_v
        self.t = t


@dataclass(frozen=True)
class StepDecay:
    base_lr: float
    factor: float
    decay_epoch: int

    @classmethod
    def for_config(cls, config: TrainConfig) -> StepDecay:
        return cls(
            base_lr=config.learning_rate,
            factor=config.lr_decay_factor,
            decay_epoch=math.ceil(config.epochs * config.lr_decay_at),
        )

    def lr_at(self, epoch: int) -> float:
        return self.base_lr * self.factor if epoch >= self.decay_epoch else self.base_lr


@dataclass(frozen=True)
class TrainedPair:
    method: MethodKind
    mean_net: Mlp
    cov_net: Optional[Mlp]
    loss_trace: list[float] = field(default_factory=list)
    deterministic: bool = True


def make_batch_schedule(n_samples: int, batch_size: int, epochs: int, seed: int) -> BatchSchedule:
    """One shuffled permutation per epoch, cut into batches; the last batch keeps the remainder."""
    if n_samples < 1 or batch_size < 1 or epochs < 1:
        raise TrainingError("n_samples, batch_size and epochs must all be >= 1")
    rng = np.random.default_rng(seed)
    schedule: BatchSchedule = []
    for _ in range(epochs):
        perm = rng.permutation(n_samples)
        schedule.append([perm[i : i + batch_size] for i in range(0, n_samples, batch_size)])
    return schedule


def build_networks(config: TrainConfig, input_dim: int, target_dim: int) -> tuple[Mlp, Optional[Mlp]]:
    hidden = list(config.hidden_dims)
    mean_net = init_mlp([input_dim, *hidden, target_dim], config.activation, seed=config.seed)
    width = head_width(config.method, target_dim)
    if width == 0:
        return mean_net, None
    cov_net = init_mlp([input_dim, *hidden, width], config.activation, seed=config.seed + 1)
    return mean_net, cov_net


@dataclass(frozen=True)
class _ChunkGrads:
    loss_sum: float
    mean: ParamGrads
    cov: Optional[ParamGrads]


def _chunk_grads(
    method: Method,
    mean_net: Mlp,
    cov_net: Optional[Mlp],
    x: np.ndarray,
    y: np.ndarray,
    scale: float,
) -> _ChunkGrads:
    diff = None
    if method.kind == MethodKind.TIC:
        diff = forward_with_input_derivatives(mean_net, x)
        y_hat = diff.value
    else:
        y_hat = forward(mean_net, x)
    head_raw = forward(cov_net, x) if cov_net is not None else None

    obj = method_objective(method, y - y_hat, head_raw, diff)
    loss_sum = float(np.sum(obj.value))
    if not math.isfinite(loss_sum):
        raise DivergedLoss(f"Non-finite {method.kind.value} loss on a batch of {x.shape[0]}")

    mean_grads = backprop_params(mean_net, x, obj.grad_mean * scale)
    cov_grads = None
    if cov_net is not None and obj.grad_head is not None:
        cov_grads = backprop_params(cov_net, x, obj.grad_head * scale)
    return _ChunkGrads(loss_sum=loss_sum, mean=mean_grads, cov=cov_grads)


def _batch_grads(
    method: Method,
    mean_net: Mlp,
    cov_net: Optional[Mlp],
    x: np.ndarray,
    y: np.ndarray,
    pool: Optional[ThreadPoolExecutor],
    workers: int,
) -> _ChunkGrads:
    scale = 1.0 / x.shape[0]
    if pool is None or x.shape[0] < 2 * workers:
        return _chunk_grads(method, mean_net, cov_net, x, y, scale)

    bounds = np.array_split(np.arange(x.shape[0]), workers)
    parts = list(pool.map(lambda idx: _chunk_grads(method, mean_net, cov_net, x[idx], y[idx], scale), bounds))
    total = parts[0]
    for part in parts[1:]:
        total = _ChunkGrads(
            loss_sum=total.loss_sum + part.loss_sum,
            mean=total.mean + part.mean,
            cov=None if total.cov is None or part.cov is None else total.cov + part.cov,
        )
    return total


def train(config: TrainConfig, dataset: Dataset, schedule: Optional[BatchSchedule] = None) -> TrainedPair:
    if dataset.n_samples < 1:
        raise TrainingError("Cannot train on an empty dataset")
    if schedule is None:
        schedule = make_batch_schedule(dataset.n_samples, config.batch_size, config.epochs, config.seed)
    if len(schedule) != config.epochs:
        raise TrainingError(f"Schedule has {len(schedule)} epochs, config asks for {config.epochs}")

    method = Method(kind=config.method, beta=config.beta)
    mean_net, cov_net = build_networks(config, dataset.input_dim, dataset.target_dim)
    mean_opt = Adam(mean_net.params(), config.adam_beta1, config.adam_beta2, config.adam_eps)
    cov_opt = Adam(cov_net.params(), config.adam_beta1, config.adam_beta2, config.adam_eps) if cov_net else None
    lr_schedule = StepDecay.for_config(config)

    x_all = dataset.inputs
    y_all = dataset.targets
    trace: list[float] = []
    pool = ThreadPoolExecutor(max_workers=config.workers) if config.workers > 1 else None
    try:
        for epoch, batches in enumerate(schedule):
            lr = lr_schedule.lr_at(epoch)
            loss_sum = 0.0
            seen = 0
            for idx in batches:
                grads = _batch_grads(method, mean_net, cov_net, x_all[idx], y_all[idx], pool, config.workers)
                if not grads.mean.all_finite() or (grads.cov is not None and not grads.cov.all_finite()):
                    raise DivergedLoss(f"Non-finite gradients. method={config.method.value} epoch={epoch}")
                mean_opt.step(grads.mean.as_list(), lr)
                if cov_opt is not None and grads.cov is not None:
                    cov_opt.step(grads.cov.as_list(), lr)
                loss_sum += grads.loss_sum
                seen += len(idx)

            epoch_loss = loss_sum / max(seen, 1)
            if not math.isfinite(epoch_loss):
                raise DivergedLoss(f"Non-finite epoch loss. method={config.method.value} epoch={epoch}")
            trace.append(epoch_loss)
            logger.info(
                "Epoch complete. method=%s epoch=%d loss=%.6f lr=%.3e",
                config.method.value,
                epoch,
                epoch_loss,
                lr,
            )
    finally:
        if pool is not None:
            pool.shutdown(wait=True)

    return TrainedPair(
        method=config.method,
        mean_net=mean_net,
        cov_net=cov_net,
        loss_trace=trace,
        deterministic=config.workers == 1,
    )
