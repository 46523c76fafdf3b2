"""Hard pruning, masked retraining, evaluation and the proportional budget search."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from admm_prune.admm import project_cardinality, top_support
from admm_prune.errors import ConfigError, DimensionError, InputError
from admm_prune.mnist_io import Dataset
from admm_prune.nn import LossConfig, Network, predict
from admm_prune.optimizer import SgdConfig, train_epochs
from admm_prune.tensor import Rng

log = logging.getLogger(__name__)


class PruneMask:
    """Per-layer boolean support of the surviving weights (read-only)."""

    def __init__(self, layers: Sequence[np.ndarray]):
        frozen = []
        for m in layers:
            m = np.array(m, dtype=bool, copy=True)
            m.flags.writeable = False
            frozen.append(m)
        self._layers = tuple(frozen)

    @classmethod
    def full(cls, net: Network) -> "PruneMask":
        return cls([np.ones(w.shape, dtype=bool) for w in net.weights])

    @classmethod
    def from_support(cls, net: Network) -> "PruneMask":
        return cls([w != 0 for w in net.weights])

    def __iter__(self):
        return iter(self._layers)

    def __len__(self) -> int:
        return len(self._layers)

    def __getitem__(self, i) -> np.ndarray:
        return self._layers[i]

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, PruneMask)
            and len(self) == len(other)
            and all(a.shape == b.shape and np.array_equal(a, b) for a, b in zip(self, other))
        )

    def counts(self) -> list[int]:
        return [int(m.sum()) for m in self._layers]


@dataclass
class SparsityTarget:
    """Per-layer budgets as absolute counts or keep fractions, times a global scale.

    ``resolve`` turns fractions into counts by round-to-nearest; a scale below
    one is applied with ceiling. Every budget is floored at 1.
    """

    counts: list[int] | None = None
    fractions: list[float] | None = None
    scale: float = 1.0

    def __post_init__(self):
        if (self.counts is None) == (self.fractions is None):
            raise ConfigError("give exactly one of counts or fractions")
        if not 0 < self.scale <= 1:
            raise ConfigError(f"scale must lie in (0, 1], got {self.scale}")

    def base_counts(self, net: Network) -> list[int]:
        sizes = net.num_weights()
        if self.counts is not None:
            base = [int(c) for c in self.counts]
        else:
            base = [max(1, int(math.floor(f * n + 0.5))) for f, n in zip(self.fractions, sizes)]
            if len(self.fractions) != len(sizes):
                raise ConfigError(f"{len(self.fractions)} fractions for {len(sizes)} layers")
        if len(base) != len(sizes):
            raise ConfigError(f"{len(base)} budgets for {len(sizes)} layers")
        for b, n in zip(base, sizes):
            if not 1 <= b <= n:
                raise ConfigError(f"budget {b} outside [1, {n}]")
        return base

    def resolve(self, net: Network) -> list[int]:
        base = self.base_counts(net)
        if self.scale == 1.0:
            return base
        return [max(1, math.ceil(self.scale * b - 1e-9)) for b in base]

    def scaled(self, scale: float) -> "SparsityTarget":
        return SparsityTarget(self.counts, self.fractions, scale)


def hard_prune(net: Network, targets) -> tuple[Network, PruneMask]:
    """Keep the ``l_i`` largest-magnitude weights per layer; biases untouched."""
    budgets = targets.resolve(net) if isinstance(targets, SparsityTarget) else list(targets)
    if len(budgets) != len(net.weights):
        raise ConfigError(f"{len(budgets)} budgets for {len(net.weights)} layers")
    for b, w in zip(budgets, net.weights):
        if not 1 <= b <= w.size:
            raise ConfigError(f"budget {b} outside [1, {w.size}]")
    pruned = net.copy()
    pruned.weights = [project_cardinality(w, b) for w, b in zip(net.weights, budgets)]
    mask = PruneMask([top_support(w, b) for w, b in zip(net.weights, budgets)])
    return pruned, mask


def evaluate(net: Network, ds: Dataset) -> float:
    """Top-1 accuracy; arg-max ties resolve to the lowest class index."""
    if len(ds) == 0:
        raise InputError("cannot evaluate on an empty dataset")
    return float(np.mean(predict(net, ds.images) == ds.labels))


@dataclass
class RetrainResult:
    losses: list[float]
    val_accuracy: list[float] = field(default_factory=list)
    epochs_run: int = 0


def retrain(
    net: Network,
    mask: PruneMask,
    sgd: SgdConfig,
    data: Dataset,
    rng: Rng,
    loss_cfg: LossConfig | None = None,
    *,
    val: Dataset | None = None,
    patience: int = 3,
    min_gain: float = 0.0005,
) -> RetrainResult:
    """Masked SGD on ``f``; pruned weights never move.

    With ``val`` given, stops once validation accuracy fails to improve by
    ``min_gain`` for ``patience`` consecutive epochs.
    """
    for m, w in zip(mask, net.weights):
        if m.shape != w.shape:
            raise DimensionError(f"mask {m.shape} vs weight {w.shape}")
    result = RetrainResult([])
    best, stale = -1.0, 0

    def on_epoch(epoch, loss):
        nonlocal best, stale
        result.epochs_run = epoch + 1
        if val is None:
            return False
        acc = evaluate(net, val)
        result.val_accuracy.append(acc)
        log.info("retrain epoch %d val acc %.4f", epoch, acc)
        if acc >= best + min_gain:
            best, stale = acc, 0
        else:
            stale += 1
        return stale >= patience

    result.losses = train_epochs(net, data, sgd, rng, loss_cfg, mask=mask, on_epoch=on_epoch, label="retrain")
    return result


@dataclass
class LayerRow:
    layer: str
    weights: int
    weights_after: int

    @property
    def percent(self) -> float:
        return 100.0 * self.weights_after / self.weights


@dataclass
class CompressionReport:
    rows: list[LayerRow]
    baseline_accuracy: float | None = None
    accuracy: float | None = None

    @property
    def total_before(self) -> int:
        return sum(r.weights for r in self.rows)

    @property
    def total_after(self) -> int:
        return sum(r.weights_after for r in self.rows)

    @property
    def percent(self) -> float:
        return 100.0 * self.total_after / self.total_before

    @property
    def ratio(self) -> float:
        return self.total_before / self.total_after if self.total_after else math.inf

    def csv_rows(self) -> list[list[str]]:
        out = [["layer", "weights", "weights_after", "percent"]]
        for r in self.rows:
            out.append([r.layer, str(r.weights), str(r.weights_after), f"{r.percent:.2f}"])
        out.append(["total", str(self.total_before), str(self.total_after), f"{self.percent:.2f}"])
        return out

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            csv.writer(fh, lineterminator="\n").writerows(self.csv_rows())

    def to_table(self) -> str:
        lines = [f"{'Layer':<8}{'Weights':>10}{'After':>10}{'Kept %':>9}"]
        for r in self.rows:
            lines.append(f"{r.layer:<8}{_k(r.weights):>10}{_k(r.weights_after):>10}{r.percent:>8.2f}%")
        lines.append(f"{'Total':<8}{_k(self.total_before):>10}{_k(self.total_after):>10}{self.percent:>8.2f}%")
        lines.append(f"compression ratio {self.ratio:.1f}x")
        if self.baseline_accuracy is not None:
            lines.append(f"baseline accuracy {100 * self.baseline_accuracy:.2f}%")
        if self.accuracy is not None:
            lines.append(f"pruned accuracy   {100 * self.accuracy:.2f}%")
        return "\n".join(lines)


def _k(n: int) -> str:
    return f"{n / 1000:.2f}K" if n >= 1000 else str(n)


def compression_report(before: Network, after: Network, mask: PruneMask | None = None,
                       baseline_accuracy: float | None = None, accuracy: float | None = None) -> CompressionReport:
    """Per-layer weight counts before and after pruning.

    Surviving weights are read from ``mask`` when given, else counted as nonzeros.
    """
    if [w.shape for w in before.weights] != [w.shape for w in after.weights]:
        raise DimensionError("networks have different weight shapes")
    kept = mask.counts() if mask is not None else [int(np.count_nonzero(w)) for w in after.weights]
    before_counts = [int(np.count_nonzero(w)) for w in before.weights]
    rows = [LayerRow(n, b, a) for n, b, a in zip(after.names, before_counts, kept)]
    return CompressionReport(rows, baseline_accuracy, accuracy)


@dataclass
class SearchResult:
    scale: float
    target: SparsityTarget
    probes: list[tuple[float, float]]  # (scale, accuracy drop) in probe order
    feasible: bool = True


def min_scale(base_counts: Sequence[int]) -> float:
    """Largest scale at which every ceil-rounded budget is already 1."""
    return 1.0 / max(base_counts)


def sparsity_search(
    probe: Callable[[float], float],
    base_counts: Sequence[int],
    loss_budget: float,
    tol: float = 0.05,
) -> SearchResult:
    """Binary search for the smallest global scale whose accuracy drop is within budget.

    ``probe(scale)`` runs the full prune pipeline at ``scale`` and returns the
    accuracy drop versus baseline. Scale 1 is probed first; if it already
    breaks the budget the result is marked infeasible. Bisection then narrows
    ``(lo, hi]`` until ``hi - lo < tol`` and returns ``hi``.
    """
    lo = min_scale(base_counts)
    probes = []

    def run(s):
        drop = probe(s)
        probes.append((s, drop))
        log.info("search probe scale %.4f drop %.4f", s, drop)
        return drop <= loss_budget

    if not run(1.0):
        return SearchResult(1.0, None, probes, feasible=False)
    if loss_budget >= 1.0:
        # a drop can never exceed 1, so the floor budget is always acceptable
        return SearchResult(lo, None, probes)
    hi = 1.0
    while hi - lo >= tol:
        mid = (lo + hi) / 2
        if run(mid):
            hi = mid
        else:
            lo = mid
    return SearchResult(hi, None, probes)


def search_budgets(
    pipeline: Callable[[list[int]], float],
    net: Network,
    initial: SparsityTarget,
    baseline_accuracy: float,
    loss_budget: float,
    tol: float = 0.05,
) -> SearchResult:
    """Proportional budget search driving ``pipeline(budgets) -> accuracy``."""
    base = initial.base_counts(net)

    def probe(scale):
        budgets = initial.scaled(scale).resolve(net)
        return baseline_accuracy - pipeline(budgets)

    result = sparsity_search(probe, base, loss_budget, tol)
    result.target = initial.scaled(result.scale)
    return result
