"""ADMM solver for per-layer cardinality-constrained training.

The split problem is ``min f(W, b) + sum_i g_i(Z_i)  s.t.  W_i = Z_i`` with
``g_i`` the indicator of ``{card(Z_i) <= l_i}``. Each iteration

* W-step: SGD on ``f + sum_i rho_i/2 ||W_i - Z_i + U_i||_F^2``, warm started,
* Z-step: ``Z_i = project_cardinality(W_i + U_i, l_i)``,
* U-step: ``U_i += W_i - Z_i`` (scaled dual; ``Lambda_i = rho_i U_i`` is never formed).

Biases are never constrained.
"""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from admm_prune.errors import ConfigError, InputError, StateError
from admm_prune.mnist_io import Dataset
from admm_prune.nn import Batch, Gradients, LossConfig, Network, loss_and_grads
from admm_prune.optimizer import Objective, SgdConfig, train_epochs
from admm_prune.tensor import Rng, Tensor, frobenius_norm_sq

log = logging.getLogger(__name__)


def top_indices(t: Tensor, l: int) -> np.ndarray:
    """Flat indices of the ``l`` largest-magnitude entries, lowest index first on ties."""
    n = t.size
    if not 0 <= l <= n:
        raise InputError(f"cardinality budget {l} outside [0, {n}]")
    if l == 0:
        return np.empty(0, dtype=np.intp)
    if l == n:
        return np.arange(n)
    mag = np.abs(t.reshape(-1))
    cutoff = np.partition(mag, n - l)[n - l]
    above = np.flatnonzero(mag > cutoff)
    ties = np.flatnonzero(mag == cutoff)[: l - above.size]
    return np.sort(np.concatenate([above, ties]))


def top_support(t: Tensor, l: int) -> np.ndarray:
    """Boolean mask with exactly ``l`` True entries at :func:`top_indices`."""
    mask = np.zeros(t.size, dtype=bool)
    mask[top_indices(t, l)] = True
    return mask.reshape(t.shape)


def project_cardinality(t: Tensor, l: int) -> Tensor:
    """Euclidean projection onto ``{x : card(x) <= l}``.

    Keeps the ``l`` largest-magnitude entries and zeroes the rest. Among equal
    magnitudes the lowest flat (row-major) index is kept first.
    """
    keep = top_indices(t, l)
    if keep.size == t.size:
        return t.copy()
    out = np.zeros_like(t)
    out.reshape(-1)[keep] = t.reshape(-1)[keep]
    return out


def default_eps(net: Network, scale: float = 1e-7) -> list[float]:
    return [scale * w.size for w in net.weights]


@dataclass
class AdmmConfig:
    rho: float = 1e-2
    eps_scale: float = 1e-7
    max_iterations: int = 30
    epochs_per_update: int = 3
    # W-steps continue one learning-rate schedule across iterations instead of restarting it
    continue_schedule: bool = True

    def __post_init__(self):
        if not self.rho > 0:
            raise ConfigError(f"rho must be > 0, got {self.rho}")
        if not self.eps_scale > 0:
            raise ConfigError(f"eps scale must be > 0, got {self.eps_scale}")
        if self.max_iterations < 1 or self.epochs_per_update < 1:
            raise ConfigError("max_iterations and epochs_per_update must be >= 1")


@dataclass
class AdmmState:
    Z: list[Tensor]
    U: list[Tensor]
    rho: list[float]
    l: list[int]
    eps: list[float]
    k: int = 0

    def check(self, net: Network | None = None) -> None:
        n = len(self.Z)
        if not (len(self.U) == len(self.rho) == len(self.l) == len(self.eps) == n):
            raise StateError("per-layer ADMM fields disagree in length")
        if any(not r > 0 for r in self.rho) or any(not e > 0 for e in self.eps):
            raise ConfigError("rho_i and eps_i must all be > 0")
        for i, (z, u) in enumerate(zip(self.Z, self.U)):
            if z.shape != u.shape or (net is not None and z.shape != net.weights[i].shape):
                raise StateError(f"layer {i}: Z {z.shape}, U {u.shape} disagree with W")


def _per_layer(value, n: int, what: str) -> list:
    if np.isscalar(value):
        return [value] * n
    value = list(value)
    if len(value) != n:
        raise ConfigError(f"{what}: {len(value)} values for {n} layers")
    return value


def init_admm(pretrained: Network, targets: Sequence[int], rho=1e-2, eps=None) -> AdmmState:
    """``Z^0`` keeps the ``l_i`` largest weights of the pretrained net, ``U^0 = 0``."""
    n = len(pretrained.weights)
    targets = [int(x) for x in _per_layer(targets, n, "targets")]
    for i, (l, w) in enumerate(zip(targets, pretrained.weights)):
        if not 1 <= l <= w.size:
            raise ConfigError(f"layer {i}: budget {l} outside [1, {w.size}]")
    rho = [float(r) for r in _per_layer(rho, n, "rho")]
    eps = default_eps(pretrained) if eps is None else [float(e) for e in _per_layer(eps, n, "eps")]
    state = AdmmState(
        Z=[project_cardinality(w, l) for w, l in zip(pretrained.weights, targets)],
        U=[np.zeros_like(w) for w in pretrained.weights],
        rho=rho,
        l=targets,
        eps=eps,
    )
    state.check(pretrained)
    return state


def proximal_gradient(net: Network, state: AdmmState) -> list[Tensor]:
    """``rho_i (W_i - Z_i + U_i)`` for every layer."""
    return [w.dtype.type(r) * (w - z + u) for w, z, u, r in zip(net.weights, state.Z, state.U, state.rho)]


def proximal_penalty(net: Network, state: AdmmState) -> float:
    return sum(r / 2 * frobenius_norm_sq(w - z + u) for w, z, u, r in zip(net.weights, state.Z, state.U, state.rho))


def augmented_hook(state: AdmmState) -> Callable[[Network, Gradients], Gradients]:
    def hook(net: Network, grads: Gradients) -> Gradients:
        prox = proximal_gradient(net, state)
        return Gradients([g + p for g, p in zip(grads.weights, prox)], grads.biases)
    return hook


def augmented_loss_and_grads(net: Network, state: AdmmState, batch: Batch, loss_cfg: LossConfig):
    """Value and gradient of the W-subproblem objective on one batch."""
    f, grads = loss_and_grads(net, batch, loss_cfg)
    return f + proximal_penalty(net, state), augmented_hook(state)(net, grads)


def w_update(
    net: Network,
    state: AdmmState,
    sgd: SgdConfig,
    data: Dataset,
    rng: Rng,
    loss_cfg: LossConfig | None = None,
    *,
    epochs: int | None = None,
    objective: Objective | None = None,
    start_epoch: int = 0,
) -> list[float]:
    """Warm-started SGD on the W-subproblem, in place; returns per-epoch mean ``f``."""
    state.check(net)
    return train_epochs(
        net, data, sgd, rng, loss_cfg,
        epochs=epochs,
        objective=objective,
        grad_hook=augmented_hook(state),
        label=f"admm iter {state.k + 1}",
        start_epoch=start_epoch,
    )


def z_update(net: Network, state: AdmmState) -> AdmmState:
    state.Z = [project_cardinality(w + u, l) for w, u, l in zip(net.weights, state.U, state.l)]
    return state


def u_update(net: Network, state: AdmmState) -> AdmmState:
    state.U = [u + w - z for u, w, z in zip(state.U, net.weights, state.Z)]
    state.k += 1
    return state


@dataclass
class StopCheck:
    status: str  # "converged" | "max_iterations" | "continue"
    primal: list[float]
    drift: list[float]

    @property
    def done(self) -> bool:
        return self.status != "continue"


def residuals(net: Network, state: AdmmState, prev_Z: Sequence[Tensor]) -> tuple[list[float], list[float]]:
    primal = [frobenius_norm_sq(w - z) for w, z in zip(net.weights, state.Z)]
    drift = [frobenius_norm_sq(z - zp) for z, zp in zip(state.Z, prev_Z)]
    return primal, drift


def check_stop(state: AdmmState, prev_Z: Sequence[Tensor], net: Network, max_iterations: int | None = None) -> StopCheck:
    """Converged when every layer has both squared residuals within its ``eps_i``."""
    primal, drift = residuals(net, state, prev_Z)
    ok = all(p <= e and d <= e for p, d, e in zip(primal, drift, state.eps))
    if ok:
        status = "converged"
    elif max_iterations is not None and state.k >= max_iterations:
        status = "max_iterations"
    else:
        status = "continue"
    return StopCheck(status, primal, drift)


@dataclass
class TraceRecord:
    iteration: int
    layer: str
    primal_residual_sq: float
    z_drift_sq: float
    loss: float
    seconds: float


@dataclass
class AdmmTrace:
    records: list[TraceRecord] = field(default_factory=list)
    status: str = "continue"

    COLUMNS = ("iteration", "layer", "primal_residual_sq", "z_drift_sq", "loss", "seconds")

    def iterations(self) -> int:
        return max((r.iteration for r in self.records), default=0)

    def layer_series(self, layer: str, column: str) -> list[float]:
        return [getattr(r, column) for r in self.records if r.layer == layer]

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(self.COLUMNS)
            for r in self.records:
                writer.writerow([r.iteration, r.layer, repr(r.primal_residual_sq), repr(r.z_drift_sq),
                                 repr(r.loss), repr(r.seconds)])


def run_admm(
    net: Network,
    state: AdmmState,
    cfg: AdmmConfig,
    sgd: SgdConfig,
    data: Dataset,
    rng: Rng,
    loss_cfg: LossConfig | None = None,
    *,
    clock: Callable[[], float] = time.perf_counter,
    on_iteration: Callable[[Network, AdmmState, StopCheck], None] | None = None,
) -> AdmmTrace:
    """Iterate W/Z/U updates until both residuals are within tolerance or the cap is hit."""
    trace = AdmmTrace()
    while True:
        start = clock()
        offset = state.k * cfg.epochs_per_update if cfg.continue_schedule else 0
        losses = w_update(net, state, sgd, data, rng, loss_cfg, epochs=cfg.epochs_per_update, start_epoch=offset)
        prev_Z = state.Z
        z_update(net, state)
        for i, (z, l) in enumerate(zip(state.Z, state.l)):
            if np.count_nonzero(z) > l:
                raise StateError(f"layer {net.names[i]}: card(Z) {np.count_nonzero(z)} > {l}")
        u_update(net, state)
        check = check_stop(state, prev_Z, net, cfg.max_iterations)
        elapsed = clock() - start
        for name, p, d in zip(net.names, check.primal, check.drift):
            trace.records.append(TraceRecord(state.k, name, p, d, losses[-1], elapsed))
        log.info(
            "admm iter %d loss %.5f primal %s drift %s",
            state.k, losses[-1],
            " ".join(f"{p:.4g}" for p in check.primal),
            " ".join(f"{d:.4g}" for d in check.drift),
        )
        if on_iteration is not None:
            on_iteration(net, state, check)
        if check.done:
            trace.status = check.status
            return trace
