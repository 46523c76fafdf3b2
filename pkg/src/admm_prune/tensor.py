"""Dense tensor primitives and the seeded generator.

Tensors are plain row-major :class:`numpy.ndarray` values. Two precisions are
used: ``STANDARD`` (float32) for training and ``HIGH`` (float64) for gradient
checks and projection oracles.
"""

from __future__ import annotations

import numpy as np

from admm_prune.errors import DimensionError, NumericError

STANDARD = np.float32
HIGH = np.float64

Tensor = np.ndarray


def as_tensor(values, precision=STANDARD) -> Tensor:
    """Copy ``values`` into a fresh C-contiguous array of the given precision."""
    return np.array(values, dtype=precision, order="C", copy=True)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of an (m, n) and an (n, p) tensor."""
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    return a @ b


def relu(t: Tensor) -> Tensor:
    return np.maximum(t, 0, dtype=t.dtype)


def frobenius_norm_sq(t: Tensor) -> float:
    """Sum of squared entries, accumulated in float64."""
    flat = np.asarray(t, dtype=HIGH).ravel()
    return float(np.dot(flat, flat))


def check_finite(t: Tensor, what: str = "tensor") -> Tensor:
    if not np.all(np.isfinite(t)):
        raise NumericError(f"{what} contains NaN or Inf")
    return t


class Rng:
    """Seeded Philox stream.

    Philox is counter based, so the sample stream for a given seed is the same
    on every platform. ``split`` derives independent child streams without
    consuming draws from the parent.
    """

    def __init__(self, seed: int, _seed_seq: np.random.SeedSequence | None = None):
        self.seed = int(seed)
        self._seq = _seed_seq if _seed_seq is not None else np.random.SeedSequence(self.seed)
        self._gen = np.random.Generator(np.random.Philox(self._seq))

    def split(self, n: int = 1) -> list["Rng"]:
        return [Rng(self.seed, child) for child in self._seq.spawn(n)]

    def child(self, *key: int) -> "Rng":
        """Deterministic substream addressed by an integer key path."""
        seq = np.random.SeedSequence(self.seed, spawn_key=tuple(self._seq.spawn_key) + tuple(key))
        return Rng(self.seed, seq)

    def normal(self, shape, scale: float = 1.0, precision=STANDARD) -> Tensor:
        return (self._gen.standard_normal(shape, dtype=HIGH) * scale).astype(precision)

    def uniform(self, shape, low: float = 0.0, high: float = 1.0, precision=STANDARD) -> Tensor:
        return self._gen.uniform(low, high, size=shape).astype(precision)

    def integers(self, low: int, high: int, size=None):
        return self._gen.integers(low, high, size=size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def random(self, size=None):
        return self._gen.random(size)
