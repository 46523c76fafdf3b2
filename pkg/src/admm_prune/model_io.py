"""Checkpoint files and per-layer weight histograms.

Checkpoint layout (all integers little-endian)::

    b"ADMMPRUNE"                    9 bytes
    version                         uint32
    header length H                 uint32
    header                          H bytes of UTF-8 JSON (sorted keys)
    for each weighted layer:  W     float32[numel(W)]
                              b     float32[numel(b)]
    if header["has_mask"]:
    for each weighted layer:  mask  ceil(numel(W) / 8) bytes, packed bits, LSB first

The header carries the architecture descriptor (layer specs, input shape,
layer names) and free-form metadata.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import os
import struct
from pathlib import Path

import numpy as np

from admm_prune import nn
from admm_prune.errors import FormatError, InputError, LengthError
from admm_prune.pruner import PruneMask

MAGIC = b"ADMMPRUNE"
VERSION = 1
_PREFIX = len(MAGIC) + 8

_SPEC_TYPES = {cls.__name__: cls for cls in (nn.FullyConnected, nn.Conv2d, nn.MaxPool, nn.ReLU, nn.Flatten)}


def describe(net: nn.Network) -> dict:
    return {
        "input_shape": list(net.input_shape),
        "layers": [{"kind": type(s).__name__, **dataclasses.asdict(s)} for s in net.layers],
        "names": list(net.names),
    }


def _layers_from(desc: dict) -> list:
    out = []
    for item in desc["layers"]:
        item = dict(item)
        kind = item.pop("kind")
        if kind not in _SPEC_TYPES:
            raise FormatError(f"unknown layer kind {kind!r}")
        out.append(_SPEC_TYPES[kind](**item))
    return out


def _header_bytes(net: nn.Network, mask, meta: dict) -> bytes:
    header = {"architecture": describe(net), "has_mask": mask is not None, "meta": meta or {}}
    return json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")


def payload_size(net: nn.Network, with_mask: bool) -> int:
    size = sum(4 * w.size + 4 * b.size for w, b in zip(net.weights, net.biases))
    if with_mask:
        size += sum((w.size + 7) // 8 for w in net.weights)
    return size


def save_checkpoint(net: nn.Network, mask: PruneMask | None, meta: dict, path) -> None:
    path = Path(path)
    header = _header_bytes(net, mask, meta)
    parts = [MAGIC, struct.pack("<II", VERSION, len(header)), header]
    for w, b in zip(net.weights, net.biases):
        parts.append(np.ascontiguousarray(w, dtype="<f4").tobytes())
        parts.append(np.ascontiguousarray(b, dtype="<f4").tobytes())
    if mask is not None:
        if [m.shape for m in mask] != [w.shape for w in net.weights]:
            raise InputError("mask shapes do not match the network")
        for m in mask:
            parts.append(np.packbits(m.reshape(-1), bitorder="little").tobytes())
    try:
        with open(path, "wb") as fh:
            for p in parts:
                fh.write(p)
            fh.flush()
            os.fsync(fh.fileno())
    except OSError as exc:
        raise OSError(f"cannot write checkpoint {path}: {exc}") from exc


def load_checkpoint(path) -> tuple[nn.Network, PruneMask | None, dict]:
    raw = Path(path).read_bytes()
    if len(raw) < _PREFIX:
        raise LengthError(f"{path}: {len(raw)} bytes is shorter than the {_PREFIX}-byte prefix")
    if raw[: len(MAGIC)] != MAGIC:
        raise FormatError(f"{path}: bad magic {raw[:len(MAGIC)]!r}")
    version, hlen = struct.unpack_from("<II", raw, len(MAGIC))
    if version != VERSION:
        raise FormatError(f"{path}: checkpoint version {version}, this reader handles {VERSION}")
    if len(raw) < _PREFIX + hlen:
        raise LengthError(f"{path}: header needs {_PREFIX + hlen} bytes, file has {len(raw)}")
    try:
        header = json.loads(raw[_PREFIX:_PREFIX + hlen].decode("utf-8"))
        arch = header["architecture"]
        layers = _layers_from(arch)
    except (ValueError, KeyError, TypeError) as exc:
        raise FormatError(f"{path}: malformed header ({exc})") from exc

    specs = [s for s in layers if isinstance(s, nn.WEIGHTED)]
    has_mask = bool(header.get("has_mask"))
    w_sizes = [int(np.prod(nn.weight_shape(s))) for s in specs]
    expected = _PREFIX + hlen + sum(4 * n + 4 * nn.bias_shape(s)[0] for n, s in zip(w_sizes, specs))
    if has_mask:
        expected += sum((n + 7) // 8 for n in w_sizes)
    if len(raw) != expected:
        raise LengthError(f"{path}: expected {expected} bytes, found {len(raw)}")

    offset = _PREFIX + hlen
    weights, biases = [], []
    for spec in specs:
        for shape, bucket in ((nn.weight_shape(spec), weights), (nn.bias_shape(spec), biases)):
            n = int(np.prod(shape))
            arr = np.frombuffer(raw, dtype="<f4", count=n, offset=offset).astype(np.float32).reshape(shape)
            bucket.append(arr)
            offset += 4 * n
    mask = None
    if has_mask:
        layers_mask = []
        for spec, n in zip(specs, w_sizes):
            nbytes = (n + 7) // 8
            bits = np.unpackbits(np.frombuffer(raw, dtype=np.uint8, count=nbytes, offset=offset),
                                 count=n, bitorder="little")
            layers_mask.append(bits.astype(bool).reshape(nn.weight_shape(spec)))
            offset += nbytes
        mask = PruneMask(layers_mask)
    net = nn.Network(layers, tuple(arch["input_shape"]), weights, biases, list(arch["names"]))
    return net, mask, header.get("meta", {})


def histogram(w: np.ndarray, bins: int = 100) -> tuple[np.ndarray, np.ndarray]:
    """Counts over the symmetric range ``[-max|w|, max|w|]``; zero lands in bin ``bins // 2``."""
    if bins < 2:
        raise InputError(f"need at least 2 bins, got {bins}")
    bound = float(np.max(np.abs(w))) if w.size else 0.0
    if bound == 0.0:
        bound = 1.0
    counts, edges = np.histogram(np.asarray(w, dtype=np.float64).ravel(), bins=bins, range=(-bound, bound))
    return counts, edges


def export_histograms(net: nn.Network, path, bins: int = 100, prefix: str = "hist") -> list[Path]:
    """Write ``<prefix>_<layer>.csv`` (bin_left, bin_right, count) per weighted layer."""
    out_dir = Path(path)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for name, w in zip(net.names, net.weights):
        counts, edges = histogram(w, bins)
        target = out_dir / f"{prefix}_{name}.csv"
        with open(target, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["bin_left", "bin_right", "count"])
            for lo, hi, c in zip(edges[:-1], edges[1:], counts):
                writer.writerow([repr(float(lo)), repr(float(hi)), int(c)])
        written.append(target)
    return written
