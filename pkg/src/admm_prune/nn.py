"""Feed-forward / convolutional networks: forward pass, loss and backprop.

Activations are batch-major: a batch of ``t`` examples is an array whose first
axis has length ``t``. Fully connected weights are stored ``(out, in)`` so a
layer computes ``W h + b`` per example; convolution weights are
``(out_ch, in_ch, kH, kW)``. Scores are returned class-major, ``(k, t)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from math import prod
from typing import Sequence, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from admm_prune.errors import DimensionError, InputError, StateError
from admm_prune.tensor import HIGH, STANDARD, Rng, Tensor, frobenius_norm_sq, matmul


@dataclass(frozen=True)
class FullyConnected:
    in_features: int
    out_features: int


@dataclass(frozen=True)
class Conv2d:
    in_channels: int
    out_channels: int
    kh: int
    kw: int
    stride: int = 1
    pad: int = 0


@dataclass(frozen=True)
class MaxPool:
    kh: int
    kw: int
    stride: int


@dataclass(frozen=True)
class ReLU:
    pass


@dataclass(frozen=True)
class Flatten:
    pass


LayerSpec = Union[FullyConnected, Conv2d, MaxPool, ReLU, Flatten]
WEIGHTED = (FullyConnected, Conv2d)


def weight_shape(spec: LayerSpec) -> tuple[int, ...]:
    if isinstance(spec, FullyConnected):
        return (spec.out_features, spec.in_features)
    if isinstance(spec, Conv2d):
        return (spec.out_channels, spec.in_channels, spec.kh, spec.kw)
    raise TypeError(f"{spec!r} has no weights")


def bias_shape(spec: LayerSpec) -> tuple[int, ...]:
    return (weight_shape(spec)[0],)


def output_shape(spec: LayerSpec, shape: tuple[int, ...]) -> tuple[int, ...]:
    """Per-example output shape of ``spec`` given its per-example input shape."""
    if isinstance(spec, FullyConnected):
        if shape != (spec.in_features,):
            raise DimensionError(f"{spec} expects input ({spec.in_features},), got {shape}")
        return (spec.out_features,)
    if isinstance(spec, Conv2d):
        if len(shape) != 3 or shape[0] != spec.in_channels:
            raise DimensionError(f"{spec} expects ({spec.in_channels}, H, W), got {shape}")
        _, h, w = shape
        oh = (h + 2 * spec.pad - spec.kh) // spec.stride + 1
        ow = (w + 2 * spec.pad - spec.kw) // spec.stride + 1
        if oh < 1 or ow < 1:
            raise DimensionError(f"{spec} kernel larger than padded input {shape}")
        return (spec.out_channels, oh, ow)
    if isinstance(spec, MaxPool):
        if len(shape) != 3:
            raise DimensionError(f"{spec} expects (C, H, W), got {shape}")
        c, h, w = shape
        oh = (h - spec.kh) // spec.stride + 1
        ow = (w - spec.kw) // spec.stride + 1
        if oh < 1 or ow < 1:
            raise DimensionError(f"{spec} window larger than input {shape}")
        return (c, oh, ow)
    if isinstance(spec, Flatten):
        return (prod(shape),)
    if isinstance(spec, ReLU):
        return shape
    raise TypeError(f"unknown layer spec {spec!r}")


@dataclass
class Network:
    """Ordered layer specs plus one weight and one bias tensor per weighted layer."""

    layers: list
    input_shape: tuple[int, ...]
    weights: list[Tensor]
    biases: list[Tensor]
    names: list[str] = field(default_factory=list)
    version: int = 0

    def __post_init__(self):
        self.layers = list(self.layers)
        self.input_shape = tuple(self.input_shape)
        shape = self.input_shape
        for spec in self.layers:
            shape = output_shape(spec, shape)
        self.output_shape = shape
        specs = self.weighted_specs
        if len(self.weights) != len(specs) or len(self.biases) != len(specs):
            raise DimensionError(
                f"{len(specs)} weighted layers but {len(self.weights)} weights / {len(self.biases)} biases"
            )
        for spec, w, b in zip(specs, self.weights, self.biases):
            if w.shape != weight_shape(spec) or b.shape != bias_shape(spec):
                raise DimensionError(f"{spec}: weight {w.shape} / bias {b.shape} do not match")
        if not self.names:
            self.names = default_names(self.layers)

    @property
    def weighted_specs(self) -> list:
        return [s for s in self.layers if isinstance(s, WEIGHTED)]

    @property
    def dtype(self):
        return self.weights[0].dtype if self.weights else None

    def params(self) -> list[Tensor]:
        return self.weights + self.biases

    def touch(self) -> None:
        """Record an in-place parameter update; invalidates earlier caches."""
        self.version += 1

    def copy(self) -> "Network":
        return Network(
            self.layers,
            self.input_shape,
            [w.copy() for w in self.weights],
            [b.copy() for b in self.biases],
            list(self.names),
        )

    def astype(self, precision) -> "Network":
        return Network(
            self.layers,
            self.input_shape,
            [w.astype(precision) for w in self.weights],
            [b.astype(precision) for b in self.biases],
            list(self.names),
        )

    def num_weights(self) -> list[int]:
        return [w.size for w in self.weights]


def default_names(layers: Sequence[LayerSpec]) -> list[str]:
    names, n_fc, n_conv = [], 0, 0
    for spec in layers:
        if isinstance(spec, FullyConnected):
            n_fc += 1
            names.append(f"fc{n_fc}")
        elif isinstance(spec, Conv2d):
            n_conv += 1
            names.append(f"conv{n_conv}")
    return names


def init_network(layers: Sequence[LayerSpec], input_shape, rng: Rng, precision=STANDARD) -> Network:
    """He-normal weights, zero biases."""
    weights, biases = [], []
    for spec in layers:
        if isinstance(spec, WEIGHTED):
            shape = weight_shape(spec)
            fan_in = prod(shape[1:])
            weights.append(rng.normal(shape, scale=np.sqrt(2.0 / fan_in), precision=precision))
            biases.append(np.zeros(bias_shape(spec), dtype=precision))
    return Network(list(layers), tuple(input_shape), weights, biases)


def lenet300_layers() -> list:
    return [
        Flatten(),
        FullyConnected(784, 300), ReLU(),
        FullyConnected(300, 100), ReLU(),
        FullyConnected(100, 10),
    ]


def lenet5_layers() -> list:
    # Caffe-style LeNet: 20 and 50 filters, 800-500-10 classifier.
    return [
        Conv2d(1, 20, 5, 5), MaxPool(2, 2, 2), ReLU(),
        Conv2d(20, 50, 5, 5), MaxPool(2, 2, 2), ReLU(),
        Flatten(),
        FullyConnected(800, 500), ReLU(),
        FullyConnected(500, 10),
    ]


MODELS = {"lenet300": lenet300_layers, "lenet5": lenet5_layers}
MNIST_SHAPE = (1, 28, 28)


def build_model(name: str, rng: Rng, precision=STANDARD) -> Network:
    try:
        layers = MODELS[name]()
    except KeyError:
        raise InputError(f"unknown model {name!r}; choose from {sorted(MODELS)}") from None
    return init_network(layers, MNIST_SHAPE, rng, precision)


@dataclass
class Batch:
    inputs: Tensor
    labels: np.ndarray

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.labels.ndim != 1 or len(self.labels) != len(self.inputs):
            raise DimensionError(f"{len(self.inputs)} examples but labels shaped {self.labels.shape}")
        if len(self.labels) == 0:
            raise InputError("empty batch")

    @property
    def size(self) -> int:
        return len(self.labels)


@dataclass
class LossConfig:
    lam: float = 1e-4
    num_classes: int = 10

    def __post_init__(self):
        if self.lam < 0:
            raise InputError(f"L2 coefficient must be >= 0, got {self.lam}")


@dataclass
class Cache:
    net_id: int
    version: int
    batch_size: int
    records: list
    scores: Tensor


@dataclass
class Gradients:
    weights: list[Tensor]
    biases: list[Tensor]


def _conv_forward(x, w, b, spec: Conv2d):
    t = x.shape[0]
    if spec.pad:
        p = spec.pad
        x = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    s = spec.stride
    win = sliding_window_view(x, (spec.kh, spec.kw), axis=(2, 3))[:, :, ::s, ::s]
    _, c, oh, ow, kh, kw = win.shape
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(t * oh * ow, c * kh * kw)
    out = matmul(cols, w.reshape(w.shape[0], -1).T) + b
    out = out.reshape(t, oh, ow, -1).transpose(0, 3, 1, 2)
    return np.ascontiguousarray(out), (cols, x.shape, oh, ow)


def _conv_backward(dout, w, record, spec: Conv2d, need_dx: bool):
    cols, padded_shape, oh, ow = record
    o = w.shape[0]
    d2 = dout.transpose(0, 2, 3, 1).reshape(-1, o)
    dw = matmul(d2.T, cols).reshape(w.shape)
    db = d2.sum(axis=0)
    if not need_dx:
        return None, dw, db
    t, c, hp, wp = padded_shape
    s = spec.stride
    dcols = matmul(d2, w.reshape(o, -1)).reshape(t, oh, ow, c, spec.kh, spec.kw)
    dx = np.zeros(padded_shape, dtype=dout.dtype)
    for i in range(spec.kh):
        for j in range(spec.kw):
            dx[:, :, i:i + s * oh:s, j:j + s * ow:s] += dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    if spec.pad:
        p = spec.pad
        dx = dx[:, :, p:hp - p, p:wp - p]
    return dx, dw, db


def _pool_forward(x, spec: MaxPool):
    s = spec.stride
    win = sliding_window_view(x, (spec.kh, spec.kw), axis=(2, 3))[:, :, ::s, ::s]
    t, c, oh, ow, kh, kw = win.shape
    flat = win.reshape(t, c, oh, ow, kh * kw)
    arg = flat.argmax(axis=-1)  # first maximum wins ties
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
    return out, (arg, x.shape)


def _pool_backward(dout, record, spec: MaxPool):
    arg, in_shape = record
    s = spec.stride
    _, _, oh, ow = dout.shape
    dx = np.zeros(in_shape, dtype=dout.dtype)
    for i in range(spec.kh):
        for j in range(spec.kw):
            hit = arg == i * spec.kw + j
            dx[:, :, i:i + s * oh:s, j:j + s * ow:s] += np.where(hit, dout, 0)
    return dx


def _check_input(net: Network, inputs: Tensor) -> Tensor:
    if tuple(inputs.shape[1:]) != net.input_shape:
        raise DimensionError(f"network expects examples shaped {net.input_shape}, got {inputs.shape[1:]}")
    return inputs if net.dtype is None else inputs.astype(net.dtype, copy=False)


def forward_logits(net: Network, inputs: Tensor, keep: bool = False):
    """Batch-major logits ``(t, k)``; with ``keep`` also the per-layer records."""
    h = _check_input(net, inputs)
    records = []
    wi = 0
    for spec in net.layers:
        if isinstance(spec, FullyConnected):
            w, b = net.weights[wi], net.biases[wi]
            records.append(h)
            h = matmul(h, w.T) + b
            wi += 1
        elif isinstance(spec, Conv2d):
            h, rec = _conv_forward(h, net.weights[wi], net.biases[wi], spec)
            records.append(rec)
            wi += 1
        elif isinstance(spec, MaxPool):
            h, rec = _pool_forward(h, spec)
            records.append(rec)
        elif isinstance(spec, ReLU):
            h = np.maximum(h, 0)
            records.append(h > 0)
        elif isinstance(spec, Flatten):
            records.append(h.shape)
            h = h.reshape(h.shape[0], -1)
    return (h, records) if keep else h


def forward(net: Network, batch: Batch) -> tuple[Tensor, Cache]:
    """Class-major scores ``(k, t)`` and the activation record for :func:`backward`."""
    logits, records = forward_logits(net, batch.inputs, keep=True)
    scores = logits.T
    return scores, Cache(id(net), net.version, batch.size, records, scores)


def _log_softmax_cols(scores: Tensor) -> Tensor:
    z = scores - scores.max(axis=0, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=0, keepdims=True))


def _check_labels(labels, k: int, t: int):
    if len(labels) != t:
        raise DimensionError(f"{t} score columns but {len(labels)} labels")
    if np.any(labels < 0) or np.any(labels >= k):
        raise InputError(f"labels must lie in [0, {k})")


def cross_entropy(scores: Tensor, labels: np.ndarray) -> float:
    k, t = scores.shape
    _check_labels(labels, k, t)
    logp = _log_softmax_cols(scores)
    return -float(np.sum(logp[labels, np.arange(t)], dtype=HIGH)) / t


def l2_penalty(net: Network, cfg: LossConfig) -> float:
    return cfg.lam * sum(frobenius_norm_sq(w) for w in net.weights)


def loss_f(net: Network, scores: Tensor, batch: Batch, cfg: LossConfig) -> float:
    """Mean cross-entropy of the scores plus the L2 weight penalty."""
    if scores.shape[0] != cfg.num_classes:
        raise DimensionError(f"scores have {scores.shape[0]} rows, expected {cfg.num_classes}")
    return cross_entropy(scores, batch.labels) + l2_penalty(net, cfg)


def backward(net: Network, cache: Cache, batch: Batch, cfg: LossConfig) -> Gradients:
    """Exact gradients of :func:`loss_f` for every weight and bias."""
    if cache.net_id != id(net) or cache.version != net.version or cache.batch_size != batch.size:
        raise StateError("forward cache does not belong to this network state and batch")
    scores = cache.scores
    k, t = scores.shape
    _check_labels(batch.labels, k, t)
    p = np.exp(_log_softmax_cols(scores))
    p[batch.labels, np.arange(t)] -= 1
    dh = (p / t).T.astype(net.dtype, copy=False)

    n_weighted = len(net.weights)
    gw: list = [None] * n_weighted
    gb: list = [None] * n_weighted
    wi = n_weighted
    first_weighted = next(i for i, s in enumerate(net.layers) if isinstance(s, WEIGHTED))
    for li in range(len(net.layers) - 1, -1, -1):
        spec, rec = net.layers[li], cache.records[li]
        need_dx = li > first_weighted
        if isinstance(spec, FullyConnected):
            wi -= 1
            w = net.weights[wi]
            gw[wi] = matmul(dh.T, rec)
            gb[wi] = dh.sum(axis=0)
            dh = matmul(dh, w) if need_dx else None
        elif isinstance(spec, Conv2d):
            wi -= 1
            dh, gw[wi], gb[wi] = _conv_backward(dh, net.weights[wi], rec, spec, need_dx)
        elif isinstance(spec, MaxPool):
            dh = _pool_backward(dh, rec, spec)
        elif isinstance(spec, ReLU):
            dh = dh * rec
        elif isinstance(spec, Flatten):
            dh = dh.reshape(rec)
        if dh is None:
            break
    if cfg.lam:
        gw = [g + (2 * cfg.lam) * w for g, w in zip(gw, net.weights)]
    return Gradients(gw, gb)


def loss_and_grads(net: Network, batch: Batch, cfg: LossConfig) -> tuple[float, Gradients]:
    scores, cache = forward(net, batch)
    loss = loss_f(net, scores, batch, cfg)
    return loss, backward(net, cache, batch, cfg)


def predict(net: Network, inputs: Tensor, chunk: int = 1000) -> np.ndarray:
    """Arg-max class per example; ties resolve to the lowest class index."""
    out = np.empty(len(inputs), dtype=np.int64)
    for start in range(0, len(inputs), chunk):
        logits = forward_logits(net, inputs[start:start + chunk])
        out[start:start + chunk] = logits.argmax(axis=1)
    return out
