"""Small dense/conv classifiers over a flat float64 parameter vector.

Parameters live in one contiguous vector ``w`` of length ``arch.num_params``.
Each parameterised layer stores its weights (row-major, Dense as
``(out, in)``, Conv2d as ``(out, in, kh, kw)``) followed by its bias.
``arch.index`` maps every layer to those coordinate ranges.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Union

import numpy as np

from .errors import ConfigError, NumericFault

ACTIVATIONS = ("relu", "identity")


@dataclass(frozen=True)
class Dense:
    in_dim: int
    out_dim: int
    activation: str = "identity"


@dataclass(frozen=True)
class Conv2d:
    in_channels: int
    out_channels: int
    kernel_h: int
    kernel_w: int
    stride: int = 1
    activation: str = "identity"


@dataclass(frozen=True)
class Flatten:
    pass


LayerSpec = Union[Dense, Conv2d, Flatten]


@dataclass(frozen=True)
class LayerIndex:
    """Coordinate ranges of one parameterised layer inside the flat vector."""

    layer: int
    weight: slice
    weight_shape: tuple
    bias: slice
    in_shape: tuple
    out_shape: tuple

    @property
    def start(self):
        return self.weight.start

    @property
    def stop(self):
        return self.bias.stop


@dataclass(frozen=True)
class Architecture:
    input_shape: tuple
    layers: tuple
    shapes: tuple = field(init=False, repr=False, compare=False)
    index: tuple = field(init=False, repr=False, compare=False)
    num_params: int = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(s) for s in self.input_shape))
        object.__setattr__(self, "layers", tuple(self.layers))
        if not self.layers:
            raise ConfigError("architecture needs at least one layer", key="layers")
        shapes = [self.input_shape]
        index = []
        offset = 0
        flattens = 0
        seen_conv = seen_dense = False
        for i, spec in enumerate(self.layers):
            cur = shapes[-1]
            if isinstance(spec, Flatten):
                if len(cur) != 3:
                    raise ConfigError(f"layer {i}: Flatten expects a (C, H, W) input, got {cur}", key="layers")
                flattens += 1
                shapes.append((int(np.prod(cur)),))
                index.append(None)
                continue
            if getattr(spec, "activation", None) not in ACTIVATIONS:
                raise ConfigError(f"layer {i}: unknown activation {spec.activation!r}", key="layers")
            if isinstance(spec, Dense):
                if cur != (spec.in_dim,):
                    raise ConfigError(f"layer {i}: Dense in_dim={spec.in_dim} does not match input {cur}", key="layers")
                if spec.out_dim < 1:
                    raise ConfigError(f"layer {i}: out_dim must be positive", key="layers")
                seen_dense = True
                wshape = (spec.out_dim, spec.in_dim)
                out = (spec.out_dim,)
                nbias = spec.out_dim
            elif isinstance(spec, Conv2d):
                if seen_dense:
                    raise ConfigError(f"layer {i}: Conv2d after Dense is not supported", key="layers")
                if len(cur) != 3 or cur[0] != spec.in_channels:
                    raise ConfigError(f"layer {i}: Conv2d in_channels={spec.in_channels} does not match input {cur}", key="layers")
                if spec.stride < 1 or spec.kernel_h < 1 or spec.kernel_w < 1:
                    raise ConfigError(f"layer {i}: kernel and stride must be positive", key="layers")
                _, h, w = cur
                if spec.kernel_h > h or spec.kernel_w > w:
                    raise ConfigError(f"layer {i}: kernel larger than input {cur}", key="layers")
                ho = (h - spec.kernel_h) // spec.stride + 1
                wo = (w - spec.kernel_w) // spec.stride + 1
                seen_conv = True
                wshape = (spec.out_channels, spec.in_channels, spec.kernel_h, spec.kernel_w)
                out = (spec.out_channels, ho, wo)
                nbias = spec.out_channels
            else:
                raise ConfigError(f"layer {i}: unknown layer type {type(spec).__name__}", key="layers")
            nweight = int(np.prod(wshape))
            index.append(LayerIndex(
                layer=i,
                weight=slice(offset, offset + nweight),
                weight_shape=wshape,
                bias=slice(offset + nweight, offset + nweight + nbias),
                in_shape=cur,
                out_shape=out,
            ))
            offset += nweight + nbias
            shapes.append(out)
        if seen_conv and seen_dense and flattens != 1:
            raise ConfigError("exactly one Flatten must separate the conv and dense blocks", key="layers")
        if len(shapes[-1]) != 1:
            raise ConfigError("final layer must produce a vector of class logits", key="layers")
        object.__setattr__(self, "shapes", tuple(shapes))
        object.__setattr__(self, "index", tuple(index))
        object.__setattr__(self, "num_params", offset)

    @property
    def num_classes(self):
        return self.shapes[-1][0]

    @property
    def param_layers(self):
        return [ix for ix in self.index if ix is not None]

    def to_dict(self):
        layers = []
        for spec in self.layers:
            if isinstance(spec, Flatten):
                layers.append({"type": "flatten"})
            elif isinstance(spec, Dense):
                layers.append({"type": "dense", "in_dim": spec.in_dim, "out_dim": spec.out_dim,
                               "activation": spec.activation})
            else:
                layers.append({"type": "conv2d", "in_channels": spec.in_channels,
                               "out_channels": spec.out_channels, "kernel_h": spec.kernel_h,
                               "kernel_w": spec.kernel_w, "stride": spec.stride,
                               "activation": spec.activation})
        return {"input_shape": list(self.input_shape), "layers": layers}

    @classmethod
    def from_dict(cls, d):
        """Build from a descriptor; ``in_dim``/``in_channels`` are inferred when omitted."""
        try:
            input_shape = tuple(d["input_shape"])
            raw_layers = d["layers"]
        except (KeyError, TypeError) as exc:
            raise ConfigError(f"architecture descriptor missing {exc}", key="architecture") from None
        layers = []
        cur = input_shape
        for i, ld in enumerate(raw_layers):
            ld = dict(ld)
            kind = ld.pop("type", None)
            try:
                if kind == "flatten":
                    spec = Flatten()
                    cur = (int(np.prod(cur)),)
                elif kind == "dense":
                    ld.setdefault("in_dim", cur[0] if len(cur) == 1 else -1)
                    spec = Dense(**ld)
                    cur = (spec.out_dim,)
                elif kind == "conv2d":
                    ld.setdefault("in_channels", cur[0] if len(cur) == 3 else -1)
                    spec = Conv2d(**ld)
                    if len(cur) == 3:
                        cur = (spec.out_channels,
                               (cur[1] - spec.kernel_h) // spec.stride + 1,
                               (cur[2] - spec.kernel_w) // spec.stride + 1)
                else:
                    raise ConfigError(f"layer {i}: unknown type {kind!r}", key="architecture")
            except TypeError as exc:
                raise ConfigError(f"layer {i}: {exc}", key="architecture") from None
            layers.append(spec)
        return cls(input_shape, tuple(layers))


def mlp(in_dim, hidden, num_classes):
    """Dense ReLU stack ``in_dim -> hidden... -> num_classes``."""
    dims = [in_dim, *hidden, num_classes]
    layers = [Dense(a, b, "relu") for a, b in zip(dims[:-2], dims[1:-1])]
    layers.append(Dense(dims[-2], dims[-1]))
    return Architecture((in_dim,), tuple(layers))


def init_params(arch, rng):
    """Glorot-uniform weights, zero biases."""
    w = np.zeros(arch.num_params)
    for ix in arch.param_layers:
        shape = ix.weight_shape
        receptive = int(np.prod(shape[2:])) if len(shape) == 4 else 1
        fan_in, fan_out = shape[1] * receptive, shape[0] * receptive
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        w[ix.weight] = rng.uniform(-bound, bound, size=ix.weight.stop - ix.weight.start)
    return w


def _check(arch, w, x, y):
    if w.shape != (arch.num_params,):
        raise ConfigError(f"parameter vector has shape {w.shape}, architecture needs ({arch.num_params},)")
    if x.ndim < 1 or x.shape[1:] != arch.input_shape:
        raise ConfigError(f"inputs have shape {x.shape}, architecture expects (n, *{arch.input_shape})")
    if len(x) == 0:
        raise ConfigError("empty batch")
    if y.shape != (len(x),):
        raise ConfigError(f"labels have shape {y.shape}, expected ({len(x)},)")
    if y.min() < 0 or y.max() >= arch.num_classes:
        raise ConfigError(f"labels must lie in [0, {arch.num_classes})")


def _patches(a, kh, kw, stride):
    # (n, C, H, W) -> (n, Ho, Wo, C, kh, kw)
    win = np.lib.stride_tricks.sliding_window_view(a, (kh, kw), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]
    return win.transpose(0, 2, 3, 1, 4, 5)


def _run(arch, w, x):
    """Forward pass keeping what backward needs."""
    a = x
    cache = []
    for spec, ix in zip(arch.layers, arch.index):
        if ix is None:
            cache.append(a.shape)
            a = a.reshape(len(a), -1)
            continue
        W = w[ix.weight].reshape(ix.weight_shape)
        b = w[ix.bias]
        if isinstance(spec, Dense):
            z = a @ W.T + b
            cache.append(a)
        else:
            p = _patches(a, spec.kernel_h, spec.kernel_w, spec.stride)
            n, ho, wo = p.shape[:3]
            pm = p.reshape(n * ho * wo, -1)
            z = (pm @ W.reshape(W.shape[0], -1).T + b).reshape(n, ho, wo, -1).transpose(0, 3, 1, 2)
            cache.append((a.shape, pm, (n, ho, wo)))
        if spec.activation == "relu":
            mask = z > 0
            a = z * mask
            cache[-1] = (cache[-1], mask)
        else:
            a = z
            cache[-1] = (cache[-1], None)
    return a, cache


def _softmax_ce(logits, y):
    shifted = logits - logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    nll = lse - shifted[np.arange(len(y)), y]
    return float(nll.mean()), shifted, lse


def logits(arch, w, x):
    return _run(arch, w, np.asarray(x, dtype=np.float64))[0]


def forward(arch, w, x, y):
    """Mean softmax cross-entropy and number of correct argmax predictions."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y)
    _check(arch, w, x, y)
    out, _ = _run(arch, w, x)
    loss, _, _ = _softmax_ce(out, y)
    # np.argmax keeps the lowest index on ties
    correct = int((out.argmax(axis=1) == y).sum())
    return loss, correct


def backward(arch, w, x, y):
    """Return ``(loss, grad)`` with ``grad`` aligned to ``w``."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y)
    _check(arch, w, x, y)
    out, cache = _run(arch, w, x)
    loss, shifted, lse = _softmax_ce(out, y)
    n = len(y)
    dz = np.exp(shifted - lse[:, None])
    dz[np.arange(n), y] -= 1.0
    dz /= n
    grad = np.zeros_like(w)
    da = dz
    for spec, ix, c in reversed(list(zip(arch.layers, arch.index, cache))):
        if ix is None:
            da = da.reshape(c)
            continue
        inner, relu_mask = c
        dz = da if relu_mask is None else da * relu_mask
        W = w[ix.weight].reshape(ix.weight_shape)
        if isinstance(spec, Dense):
            grad[ix.weight] = (dz.T @ inner).ravel()
            grad[ix.bias] = dz.sum(axis=0)
            if ix.layer > 0:
                da = dz @ W
        else:
            in_shape, pm, (n_, ho, wo) = inner
            dzr = dz.transpose(0, 2, 3, 1).reshape(n_ * ho * wo, -1)
            grad[ix.weight] = (dzr.T @ pm).ravel()
            grad[ix.bias] = dzr.sum(axis=0)
            if ix.layer > 0:
                dp = (dzr @ W.reshape(W.shape[0], -1)).reshape(n_, ho, wo, *W.shape[1:])
                da = np.zeros(in_shape)
                s = spec.stride
                for i in range(spec.kernel_h):
                    for j in range(spec.kernel_w):
                        da[:, :, i:i + s * ho:s, j:j + s * wo:s] += dp[..., i, j].transpose(0, 3, 1, 2)
    return loss, grad


def central_gradient(fn: Callable[[np.ndarray], float], w, step=1e-5):
    if step <= 0:
        raise ValueError("step must be positive")
    w = np.array(w, dtype=np.float64)
    g = np.empty_like(w)
    for i in range(len(w)):
        orig = w[i]
        w[i] = orig + step
        fp = fn(w)
        w[i] = orig - step
        fm = fn(w)
        w[i] = orig
        g[i] = (fp - fm) / (2 * step)
    return g


def central_diag_hessian(fn: Callable[[np.ndarray], float], w, step=1e-4):
    if step <= 0:
        raise ValueError("step must be positive")
    w = np.array(w, dtype=np.float64)
    f0 = fn(w)
    h = np.empty_like(w)
    for i in range(len(w)):
        orig = w[i]
        w[i] = orig + step
        fp = fn(w)
        w[i] = orig - step
        fm = fn(w)
        w[i] = orig
        h[i] = (fp - 2 * f0 + fm) / (step * step)
    return h


def loss_closure(arch, x, y):
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y)
    return lambda v: forward(arch, v, x, y)[0]


def fd_gradient(arch, w, x, y, step=1e-5):
    return central_gradient(loss_closure(arch, x, y), w, step)


def fd_diag_hessian(arch, w, x, y, step=1e-4):
    return central_diag_hessian(loss_closure(arch, x, y), w, step)


def sgd_step(w, grad, lr, momentum=0.0, velocity=None):
    """Heavy-ball SGD: ``v' = momentum * v + grad``, ``w' = w - lr * v'``."""
    if lr < 0:
        raise ConfigError("lr must be non-negative", key="lr")
    if not 0 <= momentum < 1:
        raise ConfigError("momentum must lie in [0, 1)", key="momentum")
    if not np.all(np.isfinite(grad)):
        raise NumericFault("non-finite gradient entries")
    v = grad.copy() if velocity is None else momentum * velocity + grad
    return w - lr * v, v
