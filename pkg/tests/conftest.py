import os
from pathlib import Path

import numpy as np
import pytest

from admm_prune import nn
from admm_prune.tensor import HIGH, Rng

DATA_DIR = Path(os.environ.get("ADMM_PRUNE_DATA", "/root/data/mnist"))


def mnist_available() -> bool:
    return (DATA_DIR / "train-images-idx3-ubyte").exists() or (DATA_DIR / "train-images-idx3-ubyte.gz").exists()


needs_mnist = pytest.mark.skipif(not mnist_available(), reason=f"MNIST IDX files not found in {DATA_DIR}")


def central_difference(fn, x: np.ndarray, index, h: float = 1e-5) -> float:
    """d fn / d x[index] by central differences; restores x afterwards."""
    old = x[index]
    x[index] = old + h
    up = fn()
    x[index] = old - h
    down = fn()
    x[index] = old
    return (up - down) / (2 * h)


def rel_err(a: float, b: float, floor: float = 1e-8) -> float:
    return abs(a - b) / max(abs(a), abs(b), floor)


@pytest.fixture
def tiny_conv_net():
    layers = [
        nn.Conv2d(2, 3, 3, 3, stride=1, pad=1), nn.ReLU(), nn.MaxPool(2, 2, 2),
        nn.Conv2d(3, 4, 2, 2, stride=2, pad=0), nn.ReLU(),
        nn.Flatten(), nn.FullyConnected(4 * 2 * 2, 5), nn.ReLU(), nn.FullyConnected(5, 3),
    ]
    return nn.init_network(layers, (2, 8, 8), Rng(11), precision=HIGH)


@pytest.fixture
def tiny_batch():
    rng = Rng(12)
    return nn.Batch(rng.normal((4, 2, 8, 8), precision=HIGH), np.array([0, 2, 1, 2]))


# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
