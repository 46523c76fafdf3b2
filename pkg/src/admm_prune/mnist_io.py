"""MNIST IDX ingestion, train/validation splitting and seeded minibatching."""

from __future__ import annotations

import gzip
import os
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np

from admm_prune.errors import ConsistencyError, FormatError, InputError, LengthError
from admm_prune.nn import Batch
from admm_prune.tensor import STANDARD, Rng

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801
DATA_ENV = "ADMM_PRUNE_DATA"

FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


@dataclass(frozen=True)
class Dataset:
    images: np.ndarray  # (count, 1, 28, 28), float32 in [0, 1]
    labels: np.ndarray  # (count,), int64 in [0, 10)

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise ConsistencyError(f"{len(self.images)} images but {len(self.labels)} labels")

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, index) -> "Dataset":
        return Dataset(self.images[index], self.labels[index])

    def as_batch(self) -> Batch:
        return Batch(self.images, self.labels)


def _read_bytes(path) -> bytes:
    path = Path(path)
    with open(path, "rb") as fh:
        head = fh.read(2)
    opener = gzip.open if head == b"\x1f\x8b" else open
    with opener(path, "rb") as fh:
        return fh.read()


def _parse_images(raw: bytes, path) -> np.ndarray:
    if len(raw) < 16:
        raise LengthError(f"{path}: {len(raw)} bytes, header needs 16")
    magic, count, rows, cols = struct.unpack(">IIII", raw[:16])
    if magic != IMAGES_MAGIC:
        raise FormatError(f"{path}: image magic 0x{magic:08X}, expected 0x{IMAGES_MAGIC:08X}")
    expected = 16 + count * rows * cols
    if len(raw) != expected:
        raise LengthError(f"{path}: expected {expected} bytes, found {len(raw)}")
    pixels = np.frombuffer(raw, dtype=np.uint8, offset=16).reshape(count, 1, rows, cols)
    return pixels.astype(STANDARD) / STANDARD(255)


def _parse_labels(raw: bytes, path) -> np.ndarray:
    if len(raw) < 8:
        raise LengthError(f"{path}: {len(raw)} bytes, header needs 8")
    magic, count = struct.unpack(">II", raw[:8])
    if magic != LABELS_MAGIC:
        raise FormatError(f"{path}: label magic 0x{magic:08X}, expected 0x{LABELS_MAGIC:08X}")
    if len(raw) != 8 + count:
        raise LengthError(f"{path}: expected {8 + count} bytes, found {len(raw)}")
    labels = np.frombuffer(raw, dtype=np.uint8, offset=8).astype(np.int64)
    if labels.size and labels.max() > 9:
        raise FormatError(f"{path}: label {labels.max()} outside [0, 10)")
    return labels


def load_idx(images_path, labels_path) -> Dataset:
    """Parse a pair of (optionally gzipped) big-endian IDX files."""
    images = _parse_images(_read_bytes(images_path), images_path)
    labels = _parse_labels(_read_bytes(labels_path), labels_path)
    if len(images) != len(labels):
        raise ConsistencyError(
            f"{images_path} holds {len(images)} images but {labels_path} holds {len(labels)} labels"
        )
    return Dataset(images, labels)


def resolve_data_dir(data_dir=None) -> Path:
    if data_dir is None:
        data_dir = os.environ.get(DATA_ENV, "data/mnist")
    return Path(data_dir)


def _locate(data_dir: Path, stem: str) -> Path:
    for name in (stem, stem + ".gz"):
        if (data_dir / name).exists():
            return data_dir / name
    raise FileNotFoundError(f"{stem}[.gz] not found in {data_dir}")


def load_split(split: str, data_dir=None) -> Dataset:
    data_dir = resolve_data_dir(data_dir)
    img, lab = FILES[split]
    return load_idx(_locate(data_dir, img), _locate(data_dir, lab))


def train_val_split(ds: Dataset, val_size: int) -> tuple[Dataset, Dataset | None]:
    """Hold out the last ``val_size`` examples (no shuffling, so splits are stable)."""
    if val_size <= 0:
        return ds, None
    if val_size >= len(ds):
        raise InputError(f"validation size {val_size} leaves no training data")
    cut = len(ds) - val_size
    return ds.subset(slice(0, cut)), ds.subset(slice(cut, None))


def batches(ds: Dataset, batch_size: int, rng: Rng | None) -> Iterator[Batch]:
    """One epoch of minibatches; shuffled with ``rng`` when given, last short batch kept."""
    if batch_size < 1:
        raise InputError(f"batch size must be >= 1, got {batch_size}")
    order = rng.permutation(len(ds)) if rng is not None else np.arange(len(ds))
    for start in range(0, len(ds), batch_size):
        idx = order[start:start + batch_size]
        yield Batch(ds.images[idx], ds.labels[idx])
