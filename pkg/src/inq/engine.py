"""Small deterministic numpy training engine.

Layers work on float64 arrays in NCHW layout. Dense weights are stored as
``(in_features, out_features)``, convolution kernels as
``(out_channels, in_channels, kh, kw)``.

The weighted sums of :class:`Dense` and :class:`Conv2D` are accumulated by
:func:`accumulate`, which adds one input feature at a time in ascending
order. Keeping that order fixed (instead of handing it to BLAS) is what
lets the shift-add runtime reproduce ``forward`` bit for bit.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

logger = logging.getLogger(__name__)


class ShapeError(ValueError):
    """Input or parameter shapes do not compose."""


class TrainingDiverged(RuntimeError):
    """Training produced a non-finite loss."""

    def __init__(self, epoch: int, net: "Network | None" = None):
        super().__init__(f"loss became non-finite in epoch {epoch}")
        self.epoch = epoch
        self.net = net


# ---------------------------------------------------------------------------
# Layer specs
# ---------------------------------------------------------------------------


def _positive(name: str, value: int) -> None:
    if int(value) != value or value <= 0:
        raise ValueError(f"{name} must be a positive integer, got {value!r}")


@dataclass(frozen=True)
class Dense:
    in_features: int
    out_features: int

    kind = "Dense"
    learnable = True

    def __post_init__(self):
        _positive("in_features", self.in_features)
        _positive("out_features", self.out_features)

    def output_shape(self, shape):
        if tuple(shape) != (self.in_features,):
            raise ShapeError(f"Dense expects ({self.in_features},), got {tuple(shape)}")
        return (self.out_features,)

    def weight_shape(self):
        return (self.in_features, self.out_features)

    def bias_shape(self):
        return (self.out_features,)

    def fans(self):
        return self.in_features, self.out_features


@dataclass(frozen=True)
class Conv2D:
    in_channels: int
    out_channels: int
    kernel_size: int
    stride: int = 1
    padding: int = 0

    kind = "Conv2D"
    learnable = True

    def __post_init__(self):
        _positive("in_channels", self.in_channels)
        _positive("out_channels", self.out_channels)
        _positive("kernel_size", self.kernel_size)
        _positive("stride", self.stride)
        if int(self.padding) != self.padding or self.padding < 0:
            raise ValueError(f"padding must be >= 0, got {self.padding!r}")

    def output_shape(self, shape):
        if len(shape) != 3 or shape[0] != self.in_channels:
            raise ShapeError(
                f"Conv2D expects ({self.in_channels}, H, W), got {tuple(shape)}")
        _, h, w = shape
        k, s, p = self.kernel_size, self.stride, self.padding
        ho = (h + 2 * p - k) // s + 1
        wo = (w + 2 * p - k) // s + 1
        if ho <= 0 or wo <= 0:
            raise ShapeError(f"Conv2D kernel {k} does not fit input {tuple(shape)}")
        return (self.out_channels, ho, wo)

    def weight_shape(self):
        k = self.kernel_size
        return (self.out_channels, self.in_channels, k, k)

    def bias_shape(self):
        return (self.out_channels,)

    def fans(self):
        k2 = self.kernel_size * self.kernel_size
        return self.in_channels * k2, self.out_channels * k2


@dataclass(frozen=True)
class ReLU:
    kind = "ReLU"
    learnable = False

    def output_shape(self, shape):
        return tuple(shape)


@dataclass(frozen=True)
class MaxPool2D:
    """Non-overlapping max pooling; trailing rows/columns that do not fill a
    window are dropped."""

    size: int

    kind = "MaxPool2D"
    learnable = False

    def __post_init__(self):
        _positive("size", self.size)

    def output_shape(self, shape):
        if len(shape) != 3:
            raise ShapeError(f"MaxPool2D expects (C, H, W), got {tuple(shape)}")
        c, h, w = shape
        if h < self.size or w < self.size:
            raise ShapeError(f"MaxPool2D window {self.size} larger than {tuple(shape)}")
        return (c, h // self.size, w // self.size)


@dataclass(frozen=True)
class Flatten:
    kind = "Flatten"
    learnable = False

    def output_shape(self, shape):
        return (int(np.prod(shape)),)


LAYER_KINDS = {cls.kind: cls for cls in (Dense, Conv2D, ReLU, MaxPool2D, Flatten)}


def layer_to_dict(layer) -> dict:
    d = {"kind": layer.kind}
    d.update({k: v for k, v in layer.__dict__.items()})
    return d


def layer_from_dict(d: dict):
    d = dict(d)
    kind = d.pop("kind")
    try:
        cls = LAYER_KINDS[kind]
    except KeyError:
        raise ValueError(f"unknown layer kind {kind!r}") from None
    return cls(**d)


# ---------------------------------------------------------------------------
# Network
# ---------------------------------------------------------------------------


class Network:
    """A feed-forward stack of layers with one ``[weights, bias]`` pair per
    learnable layer.

    ``params[l]`` belongs to the l-th learnable layer (0-based);
    ``learnable_index[l]`` is its position in ``layers``.
    """

    def __init__(self, input_shape: Sequence[int], layers: Sequence, params=None,
                 seed: int = 0):
        self.input_shape = tuple(int(d) for d in input_shape)
        self.layers = list(layers)
        if not self.layers:
            raise ValueError("network needs at least one layer")
        shapes = [self.input_shape]
        for i, layer in enumerate(self.layers):
            try:
                shapes.append(tuple(layer.output_shape(shapes[-1])))
            except ShapeError as exc:
                raise ShapeError(f"layer {i} ({layer.kind}): {exc}") from None
        self.shapes = shapes
        if len(shapes[-1]) != 1:
            raise ShapeError(f"network output must be a vector, got {shapes[-1]}")
        self.learnable_index = [i for i, l in enumerate(self.layers) if l.learnable]
        if params is None:
            params = init_params(self.layers, seed)
        self.params = [[np.asarray(w, dtype=np.float64), np.asarray(b, dtype=np.float64)]
                       for w, b in params]
        if len(self.params) != len(self.learnable_index):
            raise ValueError("one (weights, bias) pair per learnable layer required")
        for l, i in enumerate(self.learnable_index):
            layer = self.layers[i]
            w, b = self.params[l]
            if w.shape != layer.weight_shape() or b.shape != layer.bias_shape():
                raise ShapeError(f"layer {i} ({layer.kind}): parameter shapes "
                                 f"{w.shape}, {b.shape} do not match spec")

    @property
    def num_classes(self) -> int:
        return self.shapes[-1][0]

    def num_weights(self) -> int:
        return sum(w.size for w, _ in self.params)

    def copy(self) -> "Network":
        return Network(self.input_shape, self.layers,
                       [[w.copy(), b.copy()] for w, b in self.params])

    def zeros_like_params(self):
        return [[np.zeros_like(w), np.zeros_like(b)] for w, b in self.params]


def init_params(layers, seed: int = 0):
    """He-uniform init for layers feeding a ReLU, Glorot-uniform otherwise.
    Biases start at zero."""
    rng = np.random.default_rng(seed)
    params = []
    for i, layer in enumerate(layers):
        if not layer.learnable:
            continue
        fan_in, fan_out = layer.fans()
        followed_by_relu = i + 1 < len(layers) and layers[i + 1].kind == "ReLU"
        if followed_by_relu:
            limit = np.sqrt(6.0 / fan_in)
        else:
            limit = np.sqrt(6.0 / (fan_in + fan_out))
        w = rng.uniform(-limit, limit, size=layer.weight_shape())
        params.append([w, np.zeros(layer.bias_shape())])
    return params


# ---------------------------------------------------------------------------
# Forward / backward primitives
# ---------------------------------------------------------------------------


def accumulate(cols_t: np.ndarray, wmat: np.ndarray) -> np.ndarray:
    """Return ``cols_t.T @ wmat`` summed over the shared axis in ascending
    order, one rank-1 update at a time.

    ``cols_t`` is ``(K, N)`` and ``wmat`` is ``(K, M)``.
    """
    k_dim, n = cols_t.shape
    out = np.zeros((n, wmat.shape[1]))
    for k in range(k_dim):
        out += cols_t[k][:, None] * wmat[k]
    return out


def im2col(x: np.ndarray, layer: Conv2D) -> np.ndarray:
    """Unfold ``x`` (B, C, H, W) into ``(C*kh*kw, B*Ho*Wo)`` patch columns."""
    b, c, h, w = x.shape
    k, s, p = layer.kernel_size, layer.stride, layer.padding
    _, ho, wo = layer.output_shape((c, h, w))
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x
    cols = np.empty((c, k, k, b, ho, wo))
    for i in range(k):
        for j in range(k):
            patch = xp[:, :, i:i + s * ho:s, j:j + s * wo:s]
            cols[:, i, j] = patch.transpose(1, 0, 2, 3)
    return cols.reshape(c * k * k, b * ho * wo)


def col2im(dcols: np.ndarray, x_shape, layer: Conv2D) -> np.ndarray:
    b, c, h, w = x_shape
    k, s, p = layer.kernel_size, layer.stride, layer.padding
    _, ho, wo = layer.output_shape((c, h, w))
    dcols = dcols.reshape(c, k, k, b, ho, wo)
    dxp = np.zeros((b, c, h + 2 * p, w + 2 * p))
    for i in range(k):
        for j in range(k):
            dxp[:, :, i:i + s * ho:s, j:j + s * wo:s] += dcols[:, i, j].transpose(1, 0, 2, 3)
    if p:
        dxp = dxp[:, :, p:p + h, p:p + w]
    return dxp


def conv_output(acc: np.ndarray, bias: np.ndarray, batch: int, ho: int, wo: int):
    """Turn an accumulated ``(B*Ho*Wo, Cout)`` block into NCHW with bias."""
    out = acc + bias
    return out.reshape(batch, ho, wo, -1).transpose(0, 3, 1, 2)


def maxpool_forward(x: np.ndarray, size: int):
    b, c, h, w = x.shape
    ho, wo = h // size, w // size
    xw = x[:, :, :ho * size, :wo * size].reshape(b, c, ho, size, wo, size)
    xw = xw.transpose(0, 1, 2, 4, 3, 5).reshape(b, c, ho, wo, size * size)
    arg = xw.argmax(axis=-1)
    out = np.take_along_axis(xw, arg[..., None], axis=-1)[..., 0]
    return out, arg


def maxpool_backward(dy: np.ndarray, arg: np.ndarray, x_shape, size: int):
    b, c, h, w = x_shape
    ho, wo = h // size, w // size
    dwin = np.zeros((b, c, ho, wo, size * size))
    np.put_along_axis(dwin, arg[..., None], dy[..., None], axis=-1)
    dwin = dwin.reshape(b, c, ho, wo, size, size).transpose(0, 1, 2, 4, 3, 5)
    dx = np.zeros(x_shape)
    dx[:, :, :ho * size, :wo * size] = dwin.reshape(b, c, ho * size, wo * size)
    return dx


def _check_batch(net: Network, batch: np.ndarray) -> np.ndarray:
    batch = np.asarray(batch, dtype=np.float64)
    if batch.ndim != len(net.input_shape) + 1 or batch.shape[1:] != net.input_shape:
        raise ShapeError(f"layer 0 ({net.layers[0].kind}): batch shape {batch.shape} "
                         f"does not match network input {net.input_shape}")
    return batch


def _forward(net: Network, batch: np.ndarray, keep: bool):
    x = _check_batch(net, batch)
    caches = []
    l = 0
    for layer in net.layers:
        kind = layer.kind
        if kind == "Dense":
            w, b = net.params[l]
            l += 1
            y = accumulate(x.T, w) + b
            cache = x
        elif kind == "Conv2D":
            w, b = net.params[l]
            l += 1
            cols_t = im2col(x, layer)
            _, ho, wo = layer.output_shape(x.shape[1:])
            wmat = w.reshape(w.shape[0], -1).T
            y = conv_output(accumulate(cols_t, wmat), b, x.shape[0], ho, wo)
            cache = (x.shape, cols_t)
        elif kind == "ReLU":
            y = np.maximum(x, 0.0)
            cache = x > 0
        elif kind == "MaxPool2D":
            y, arg = maxpool_forward(x, layer.size)
            cache = (x.shape, arg)
        elif kind == "Flatten":
            y = x.reshape(x.shape[0], -1)
            cache = x.shape
        else:  # pragma: no cover
            raise ValueError(f"unknown layer kind {kind}")
        if keep:
            caches.append(cache)
        x = y
    return x, caches


def forward(net: Network, batch: np.ndarray) -> np.ndarray:
    """Logits for ``batch`` (shape ``(B, *net.input_shape)``)."""
    return _forward(net, batch, keep=False)[0]


def _backward(net: Network, caches, dlogits: np.ndarray):
    grads = net.zeros_like_params()
    dx = dlogits
    l = len(net.params)
    for layer, cache in zip(reversed(net.layers), reversed(caches)):
        kind = layer.kind
        if kind == "Dense":
            l -= 1
            w, _ = net.params[l]
            x = cache
            grads[l][0] = x.T @ dx
            grads[l][1] = dx.sum(axis=0)
            dx = dx @ w.T
        elif kind == "Conv2D":
            l -= 1
            w, _ = net.params[l]
            x_shape, cols_t = cache
            cout = w.shape[0]
            dyf = dx.transpose(0, 2, 3, 1).reshape(-1, cout)
            grads[l][0] = (cols_t @ dyf).T.reshape(w.shape)
            grads[l][1] = dyf.sum(axis=0)
            dcols = w.reshape(cout, -1).T @ dyf.T
            dx = col2im(dcols, x_shape, layer)
        elif kind == "ReLU":
            dx = dx * cache
        elif kind == "MaxPool2D":
            x_shape, arg = cache
            dx = maxpool_backward(dx, arg, x_shape, layer.size)
        elif kind == "Flatten":
            dx = dx.reshape(cache)
    return grads


def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray):
    """Mean cross-entropy and its gradient with respect to ``logits``."""
    n = logits.shape[0]
    z = logits - logits.max(axis=1, keepdims=True)
    ez = np.exp(z)
    sums = ez.sum(axis=1)
    rows = np.arange(n)
    loss = float(np.mean(np.log(sums) - z[rows, labels]))
    dlogits = ez / sums[:, None]
    dlogits[rows, labels] -= 1.0
    return loss, dlogits / n


def loss_and_gradients(net: Network, batch: np.ndarray, labels):
    """Mean softmax cross-entropy over the batch and per-parameter gradients.

    The L2 penalty is not part of the returned loss; it is applied as weight
    decay by :func:`sgd_step`.
    """
    labels = np.asarray(labels, dtype=np.int64)
    if len(labels) == 0:
        raise ValueError("empty batch")
    if len(labels) != len(batch):
        raise ValueError(f"{len(batch)} inputs but {len(labels)} labels")
    if labels.min() < 0 or labels.max() >= net.num_classes:
        raise ValueError(f"labels must lie in [0, {net.num_classes})")
    logits, caches = _forward(net, batch, keep=True)
    loss, dlogits = softmax_cross_entropy(logits, labels)
    return loss, _backward(net, caches, dlogits), logits


# ---------------------------------------------------------------------------
# Optimisation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SgdConfig:
    learning_rate: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 5e-4
    batch_size: int = 32
    # (epoch, multiplier): from ``epoch`` on, lr = learning_rate * multiplier.
    # A negative epoch counts back from the end of the run, so (-1, 0.1)
    # lowers the rate for the final epoch whatever the run length.
    lr_schedule: tuple = ()

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")
        _positive("batch_size", self.batch_size)
        schedule = tuple((int(e), float(m)) for e, m in self.lr_schedule)
        # non-negative epochs first, then negative ones, each strictly increasing
        keys = [(e < 0, e) for e, _ in schedule]
        if any(b <= a for a, b in zip(keys, keys[1:])):
            raise ValueError("lr_schedule epochs must be strictly increasing "
                             "(non-negative entries before negative ones)")
        for _, m in schedule:
            if not m > 0:
                raise ValueError("lr_schedule multipliers must be > 0")
        object.__setattr__(self, "lr_schedule", schedule)

    def lr_at(self, epoch: int, total: int | None = None) -> float:
        """Learning rate for ``epoch`` of a run lasting ``total`` epochs.

        Negative schedule entries are ignored when ``total`` is unknown.
        """
        mult = 1.0
        for e, m in self.lr_schedule:
            if e < 0:
                if total is None:
                    continue
                e = max(total + e, 0)
            if epoch >= e:
                mult = m
        return self.learning_rate * mult


def sgd_step(net: Network, grads, velocity, cfg: SgdConfig, masks=None, lr=None):
    """One momentum-SGD update with coupled L2 weight decay, in place.

    ``masks[l]`` (same shape as the l-th weight tensor) selects trainable
    weights with 1; weights under a 0 keep their exact value and their
    velocity is held at zero. Biases are always trainable and not decayed.
    """
    lr = cfg.learning_rate if lr is None else lr
    mu, decay = cfg.momentum, cfg.weight_decay
    for l, ((w, b), (gw, gb), (vw, vb)) in enumerate(zip(net.params, grads, velocity)):
        if gw.shape != w.shape or vw.shape != w.shape or gb.shape != b.shape:
            raise ShapeError(f"learnable layer {l}: gradient/velocity shape mismatch")
        vw *= mu
        vw += lr * (gw + decay * w)
        vb *= mu
        vb += lr * gb
        if masks is None or masks[l] is None:
            w -= vw
        else:
            m = np.asarray(masks[l])
            if m.shape != w.shape:
                raise ShapeError(f"learnable layer {l}: mask shape {m.shape} != {w.shape}")
            frozen = m == 0
            vw[frozen] = 0.0
            np.subtract(w, vw, out=w, where=~frozen)
        b -= vb
    return net, velocity


@dataclass(frozen=True)
class Dataset:
    inputs: np.ndarray
    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        inputs = np.asarray(self.inputs, dtype=np.float64)
        labels = np.asarray(self.labels, dtype=np.int64)
        if labels.ndim != 1 or len(labels) != len(inputs):
            raise ValueError(f"{len(inputs)} inputs but {len(labels)} labels")
        if len(labels) and (labels.min() < 0 or labels.max() >= self.num_classes):
            raise ValueError(f"labels must lie in [0, {self.num_classes})")
        object.__setattr__(self, "inputs", inputs)
        object.__setattr__(self, "labels", labels)

    def __len__(self):
        return len(self.labels)

    def subset(self, idx) -> "Dataset":
        return Dataset(self.inputs[idx], self.labels[idx], self.num_classes)


@dataclass
class EpochMetrics:
    epoch: int
    loss: float
    accuracy: float
    lr: float

    def as_dict(self):
        return {"epoch": self.epoch, "loss": self.loss, "accuracy": self.accuracy,
                "lr": self.lr}


def train(net: Network, data: Dataset, cfg: SgdConfig, epochs: int, seed: int = 0,
          masks=None, on_epoch: Callable | None = None) -> list[EpochMetrics]:
    """Train ``net`` in place with minibatch momentum SGD.

    The batch order is a fresh seeded permutation each epoch and the
    velocity starts at zero, so identical arguments give identical weights.
    ``on_epoch(epoch, net, metrics)`` is called after every epoch.
    """
    if epochs < 1:
        raise ValueError("epochs must be >= 1")
    if len(data) == 0:
        raise ValueError("cannot train on an empty dataset")
    rng = np.random.default_rng(seed)
    velocity = net.zeros_like_params()
    history = []
    for epoch in range(epochs):
        lr = cfg.lr_at(epoch, epochs)
        order = rng.permutation(len(data))
        total_loss = 0.0
        correct = 0
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            loss, grads, logits = loss_and_gradients(net, data.inputs[idx], data.labels[idx])
            if not np.isfinite(loss):
                raise TrainingDiverged(epoch, net)
            total_loss += loss * len(idx)
            correct += int(np.sum(logits.argmax(axis=1) == data.labels[idx]))
            sgd_step(net, grads, velocity, cfg, masks=masks, lr=lr)
        metrics = EpochMetrics(epoch, total_loss / len(data), correct / len(data), lr)
        logger.debug("epoch %d loss %.5f acc %.4f", epoch, metrics.loss, metrics.accuracy)
        history.append(metrics)
        if on_epoch is not None:
            on_epoch(epoch, net, metrics)
    return history


def topk_accuracy(logits: np.ndarray, labels: np.ndarray, k: int) -> float:
    """Fraction of rows whose label is among the k highest logits; ties are
    ranked by lower class index first."""
    if len(labels) == 0:
        return 0.0
    order = np.argsort(-logits, axis=1, kind="stable")[:, :k]
    return float(np.mean(np.any(order == labels[:, None], axis=1)))


def evaluate(net: Network, data: Dataset, batch_size: int = 256) -> dict:
    """Top-1 accuracy, plus top-5 when there are at least 5 classes."""
    if len(data) == 0:
        logits = np.zeros((0, net.num_classes))
    else:
        logits = np.concatenate([forward(net, data.inputs[i:i + batch_size])
                                 for i in range(0, len(data), batch_size)])
    out = {"top1": topk_accuracy(logits, data.labels, 1)}
    if net.num_classes >= 5:
        out["top5"] = topk_accuracy(logits, data.labels, 5)
    return out
