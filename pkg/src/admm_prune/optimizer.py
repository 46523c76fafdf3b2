"""Plain minibatch SGD with optional gradient hooks and support masks."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from admm_prune.errors import ConfigError, DimensionError, NumericError
from admm_prune.mnist_io import Dataset, batches
from admm_prune.nn import Batch, Gradients, LossConfig, Network, loss_and_grads
from admm_prune.tensor import Rng, Tensor

log = logging.getLogger(__name__)

Objective = Callable[[Network, Batch], "tuple[float, Gradients]"]
GradHook = Callable[[Network, Gradients], Gradients]


@dataclass
class SgdConfig:
    alpha: float = 0.05
    batch_size: int = 64
    epochs: int = 20
    decay_factor: float = 0.5
    decay_every: int = 10  # 0 means constant learning rate

    def __post_init__(self):
        if not self.alpha > 0:
            raise ConfigError(f"learning rate must be > 0, got {self.alpha}")
        if self.batch_size < 1:
            raise ConfigError(f"batch size must be >= 1, got {self.batch_size}")
        if self.epochs < 0:
            raise ConfigError(f"epochs must be >= 0, got {self.epochs}")
        if self.decay_every < 0 or not self.decay_factor > 0:
            raise ConfigError("step decay needs factor > 0 and every >= 0")

    def learning_rate(self, epoch: int) -> float:
        if self.decay_every == 0:
            return self.alpha
        return self.alpha * self.decay_factor ** (epoch // self.decay_every)


def sgd_step(params: Sequence[Tensor], grads: Sequence[Tensor], alpha: float) -> Sequence[Tensor]:
    """In-place ``p -= alpha * g`` for every parameter; returns ``params``."""
    if len(params) != len(grads):
        raise DimensionError(f"{len(params)} parameters but {len(grads)} gradients")
    for p, g in zip(params, grads):
        if p.shape != g.shape:
            raise DimensionError(f"parameter {p.shape} vs gradient {g.shape}")
    for p, g in zip(params, grads):
        p -= p.dtype.type(alpha) * g
    return params


def mask_grads(grads: Gradients, mask) -> Gradients:
    """Zero weight-gradient entries where ``mask`` is False; biases pass through."""
    layers = list(mask)
    if len(layers) != len(grads.weights):
        raise DimensionError(f"{len(layers)} mask layers for {len(grads.weights)} weight gradients")
    out = []
    for g, m in zip(grads.weights, layers):
        if g.shape != m.shape:
            raise DimensionError(f"mask {m.shape} vs gradient {g.shape}")
        out.append(np.where(m, g, g.dtype.type(0)))
    return Gradients(out, grads.biases)


def apply_gradients(net: Network, grads: Gradients, alpha: float) -> None:
    sgd_step(net.params(), grads.weights + grads.biases, alpha)
    net.touch()


def train_epochs(
    net: Network,
    data: Dataset,
    sgd: SgdConfig,
    rng: Rng,
    loss_cfg: LossConfig | None = None,
    *,
    epochs: int | None = None,
    objective: Objective | None = None,
    grad_hook: GradHook | None = None,
    mask=None,
    on_epoch: Callable[[int, float], bool | None] | None = None,
    label: str = "train",
    start_epoch: int = 0,
) -> list[float]:
    """Run SGD epochs in place; returns the mean objective value of each epoch.

    ``on_epoch(epoch, mean_loss)`` may return True to stop early. ``start_epoch``
    offsets the learning-rate schedule so a run can continue an earlier one.
    """
    loss_cfg = loss_cfg or LossConfig()
    if objective is None:
        def objective(n, b):
            return loss_and_grads(n, b, loss_cfg)
    n_epochs = sgd.epochs if epochs is None else epochs
    history = []
    for epoch in range(n_epochs):
        alpha = sgd.learning_rate(start_epoch + epoch)
        total, count = 0.0, 0
        for step, batch in enumerate(batches(data, sgd.batch_size, rng)):
            loss, grads = objective(net, batch)
            if not math.isfinite(loss):
                raise NumericError(f"{label}: loss {loss} at epoch {epoch} step {step}")
            if grad_hook is not None:
                grads = grad_hook(net, grads)
            if mask is not None:
                grads = mask_grads(grads, mask)
            apply_gradients(net, grads, alpha)
            total += loss * batch.size
            count += batch.size
        mean = total / count
        history.append(mean)
        log.info("%s epoch %d lr %.4g loss %.5f", label, epoch, alpha, mean)
        if on_epoch is not None and on_epoch(epoch, mean):
            break
    return history
