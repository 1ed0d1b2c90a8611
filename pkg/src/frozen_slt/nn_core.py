"""Minimal float32 layer engine with hand-written forward and backward passes.

Tensors are plain ``numpy.float32`` arrays in NCHW (images) or NC (vectors)
layout.  Parameterized layers hold a single weight tensor and no bias:
dense weights are ``(fan_out, fan_in)``, conv weights are
``(C_out, C_in, kh, kw)``.  Row-major flat order of these arrays is the
canonical parameter order used everywhere else in the package.

``forward`` multiplies every weight by its mask before use, so the gradient
returned by ``backward`` is the gradient with respect to the *effective*
(masked) weight, for every position including masked-out ones.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

LAYER_KINDS = ("dense", "conv2d", "relu", "maxpool2x2", "avgpool_global", "batchnorm_nonaffine")
PARAM_KINDS = ("dense", "conv2d")

BN_MOMENTUM = 0.9
BN_EPS = 1e-5


class StructuralError(ValueError):
    """Shapes or layer definitions do not compose."""


class NumericError(FloatingPointError):
    def __init__(self, layer_index, message="non-finite activation"):
        super().__init__(f"{message} at layer {layer_index}")
        self.layer_index = layer_index


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    fan_in: int = 0
    fan_out: int = 0
    kernel: Optional[tuple] = None
    padding: int = 0

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise StructuralError(f"unknown layer kind {self.kind!r}")
        if self.kind == "conv2d":
            if self.kernel is None or min(self.kernel) < 1:
                raise StructuralError("conv2d needs kernel extents >= 1")
        elif self.kernel is not None:
            raise StructuralError(f"{self.kind} takes no kernel")
        if self.has_params and (self.fan_in < 1 or self.fan_out < 1):
            raise StructuralError(f"{self.kind} needs positive fan_in/fan_out")

    @property
    def has_params(self) -> bool:
        return self.kind in PARAM_KINDS

    @property
    def weight_shape(self) -> tuple:
        if self.kind == "dense":
            return (self.fan_out, self.fan_in)
        if self.kind == "conv2d":
            return (self.fan_out, self.fan_in) + tuple(self.kernel)
        return ()

    @property
    def size(self) -> int:
        return int(np.prod(self.weight_shape)) if self.has_params else 0


def dense(fan_in, fan_out):
    return LayerSpec("dense", fan_in, fan_out)


def conv(c_in, c_out, k=3, padding=1):
    return LayerSpec("conv2d", c_in, c_out, (k, k), padding)


RELU = LayerSpec("relu")
POOL = LayerSpec("maxpool2x2")
GAP = LayerSpec("avgpool_global")


def batchnorm(channels):
    # fan_in records the channel count; the layer still has no parameters
    return LayerSpec("batchnorm_nonaffine", channels, channels)


@dataclass(frozen=True)
class ArchSpec:
    name: str
    layers: tuple
    input_shape: tuple
    num_classes: int
    meta: dict = field(default_factory=dict, compare=False, hash=False)

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "input_shape", tuple(int(d) for d in self.input_shape))
        shapes = self.shapes()
        if shapes[-1] != (self.num_classes,):
            raise StructuralError(f"final output shape {shapes[-1]} != ({self.num_classes},)")

    def shapes(self) -> list:
        """Per-sample shapes: element 0 is the input, element i+1 the output of layer i."""
        shape = self.input_shape
        out = [shape]
        for i, spec in enumerate(self.layers):
            shape = _output_shape(spec, shape, i)
            out.append(shape)
        return out

    @property
    def param_layers(self) -> list:
        return [i for i, s in enumerate(self.layers) if s.has_params]

    @property
    def bn_layers(self) -> list:
        return [i for i, s in enumerate(self.layers) if s.kind == "batchnorm_nonaffine"]

    @property
    def num_params(self) -> int:
        return sum(s.size for s in self.layers)

    def layer_sizes(self) -> dict:
        return {i: self.layers[i].size for i in self.param_layers}


def _output_shape(spec, shape, i):
    k = spec.kind
    if k == "dense":
        if int(np.prod(shape)) != spec.fan_in:
            raise StructuralError(f"layer {i}: dense fan_in {spec.fan_in} != input size {int(np.prod(shape))}")
        return (spec.fan_out,)
    if k == "conv2d":
        if len(shape) != 3 or shape[0] != spec.fan_in:
            raise StructuralError(f"layer {i}: conv2d expects ({spec.fan_in}, H, W), got {shape}")
        kh, kw = spec.kernel
        ho = shape[1] + 2 * spec.padding - kh + 1
        wo = shape[2] + 2 * spec.padding - kw + 1
        if ho < 1 or wo < 1:
            raise StructuralError(f"layer {i}: conv2d output would be empty")
        return (spec.fan_out, ho, wo)
    if k == "relu":
        return shape
    if k == "maxpool2x2":
        if len(shape) != 3 or shape[1] < 2 or shape[2] < 2:
            raise StructuralError(f"layer {i}: maxpool2x2 needs (C, H>=2, W>=2), got {shape}")
        return (shape[0], shape[1] // 2, shape[2] // 2)
    if k == "avgpool_global":
        if len(shape) != 3:
            raise StructuralError(f"layer {i}: avgpool_global needs (C, H, W), got {shape}")
        return (shape[0],)
    if k == "batchnorm_nonaffine":
        if shape[0] != spec.fan_in:
            raise StructuralError(f"layer {i}: batchnorm over {spec.fan_in} channels, input {shape}")
        return shape
    raise StructuralError(f"layer {i}: unknown kind {k}")


# -- architectures ----------------------------------------------------------


def _w(c, width):
    return max(1, int(round(c * width)))


def mlp(input_dim, hidden=(64,), num_classes=2, batchnorm_layers=False):
    layers = []
    d = input_dim
    for h in hidden:
        layers.append(dense(d, h))
        if batchnorm_layers:
            layers.append(batchnorm(h))
        layers.append(RELU)
        d = h
    layers.append(dense(d, num_classes))
    return ArchSpec("mlp", layers, (input_dim,), num_classes,
                    meta={"hidden": list(hidden), "batchnorm": batchnorm_layers})


def _conv_stack(name, blocks, dense_widths, input_shape, num_classes, width, batchnorm_layers):
    c, h, w = input_shape
    layers = []
    for block in blocks:
        for ch in block:
            ch = _w(ch, width)
            layers.append(conv(c, ch))
            if batchnorm_layers:
                layers.append(batchnorm(ch))
            layers.append(RELU)
            c = ch
        layers.append(POOL)
        h, w = h // 2, w // 2
    d = c * h * w
    for dw in dense_widths:
        dw = _w(dw, width)
        layers.append(dense(d, dw))
        if batchnorm_layers:
            layers.append(batchnorm(dw))
        layers.append(RELU)
        d = dw
    layers.append(dense(d, num_classes))
    return ArchSpec(name, layers, input_shape, num_classes,
                    meta={"width": width, "batchnorm": batchnorm_layers})


def conv2(input_shape=(1, 28, 28), num_classes=10, width=1.0, batchnorm_layers=False):
    """conv 64, 64, pool, dense 256, 256, classes."""
    return _conv_stack("conv2", [(64, 64)], (256, 256), input_shape, num_classes, width, batchnorm_layers)


def conv4(input_shape=(3, 32, 32), num_classes=10, width=1.0, batchnorm_layers=False):
    return _conv_stack("conv4", [(64, 64), (128, 128)], (256, 256), input_shape, num_classes, width,
                       batchnorm_layers)


def conv6(input_shape=(3, 32, 32), num_classes=10, width=1.0, batchnorm_layers=False):
    """conv 64, 64, pool, 128, 128, pool, 256, 256, pool, dense 256, 256, classes."""
    return _conv_stack("conv6", [(64, 64), (128, 128), (256, 256)], (256, 256), input_shape,
                       num_classes, width, batchnorm_layers)


ARCHITECTURES = {"mlp": mlp, "conv2": conv2, "conv4": conv4, "conv6": conv6}


def build_arch(name, input_shape, num_classes, width=1.0, batchnorm_layers=False, hidden=(64,)):
    if name == "mlp":
        hidden = tuple(_w(h, width) for h in hidden)
        return mlp(int(np.prod(input_shape)), hidden, num_classes, batchnorm_layers)
    try:
        builder = ARCHITECTURES[name]
    except KeyError:
        raise StructuralError(f"unknown architecture {name!r}") from None
    return builder(tuple(input_shape), num_classes, width, batchnorm_layers)


# -- batchnorm state --------------------------------------------------------


@dataclass
class BatchNormState:
    """Running statistics for every batchnorm layer, keyed by layer index."""

    mean: dict = field(default_factory=dict)
    var: dict = field(default_factory=dict)
    momentum: float = BN_MOMENTUM
    eps: float = BN_EPS

    @classmethod
    def fresh(cls, arch: ArchSpec, momentum=BN_MOMENTUM, eps=BN_EPS):
        st = cls(momentum=momentum, eps=eps)
        for i in arch.bn_layers:
            c = arch.layers[i].fan_in
            st.mean[i] = np.zeros(c, dtype=np.float32)
            st.var[i] = np.ones(c, dtype=np.float32)
        return st

    def copy(self):
        return BatchNormState({k: v.copy() for k, v in self.mean.items()},
                              {k: v.copy() for k, v in self.var.items()},
                              self.momentum, self.eps)

    def num_values(self) -> int:
        return sum(v.size for v in self.mean.values()) + sum(v.size for v in self.var.values())


# -- layer kernels ----------------------------------------------------------


def _im2col(x, kh, kw, pad):
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))  # N, C, Ho, Wo, kh, kw
    n, c, ho, wo = win.shape[:4]
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n * ho * wo, c * kh * kw)
    return cols, (n, c, ho, wo, x.shape[2], x.shape[3])


def _conv_forward(x, w, pad):
    c_out = w.shape[0]
    kh, kw = w.shape[2:]
    cols, geom = _im2col(x, kh, kw, pad)
    n, _, ho, wo = geom[:4]
    out = cols @ w.reshape(c_out, -1).T
    return out.reshape(n, ho, wo, c_out).transpose(0, 3, 1, 2), (cols, geom, pad)


def _conv_backward(g, w, cache, need_input):
    cols, (n, c, ho, wo, hp, wp), pad = cache
    c_out, _, kh, kw = w.shape
    g2 = g.transpose(0, 2, 3, 1).reshape(-1, c_out)
    gw = (g2.T @ cols).reshape(w.shape)
    if not need_input:
        return gw, None
    # col2im accumulates in NHWC so each slice add runs over contiguous channels
    wt = np.ascontiguousarray(w.transpose(0, 2, 3, 1)).reshape(c_out, -1)
    dcols = (g2 @ wt).reshape(n, ho, wo, kh, kw, c)
    dxp = np.zeros((n, hp, wp, c), dtype=np.float32)
    for i in range(kh):
        for j in range(kw):
            dxp[:, i:i + ho, j:j + wo, :] += dcols[:, :, :, i, j, :]
    if pad:
        dxp = dxp[:, pad:hp - pad, pad:wp - pad, :]
    return gw, dxp.transpose(0, 3, 1, 2)


def _maxpool_forward(x):
    n, c, h, w = x.shape
    h2, w2 = h // 2, w // 2
    xr = x[:, :, :2 * h2, :2 * w2].reshape(n, c, h2, 2, w2, 2).transpose(0, 1, 2, 4, 3, 5)
    xr = xr.reshape(n, c, h2, w2, 4)
    arg = xr.argmax(axis=-1)
    out = np.take_along_axis(xr, arg[..., None], axis=-1)[..., 0]
    return out, (arg, x.shape)


def _maxpool_backward(g, cache):
    arg, shape = cache
    n, c, h, w = shape
    h2, w2 = h // 2, w // 2
    onehot = np.zeros((n, c, h2, w2, 4), dtype=np.float32)
    np.put_along_axis(onehot, arg[..., None], g[..., None], axis=-1)
    dx = np.zeros(shape, dtype=np.float32)
    dx[:, :, :2 * h2, :2 * w2] = (
        onehot.reshape(n, c, h2, w2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, 2 * h2, 2 * w2)
    )
    return dx


def _bn_axes(x):
    return (0, 2, 3) if x.ndim == 4 else (0,)


def _bn_view(v, x):
    return v.reshape(1, -1, 1, 1) if x.ndim == 4 else v.reshape(1, -1)


def _bn_forward(x, i, state, train):
    axes = _bn_axes(x)
    if train:
        mu = x.mean(axis=axes, dtype=np.float32)
        var = x.var(axis=axes, dtype=np.float32)
        m = state.momentum
        state.mean[i] = (m * state.mean[i] + (1 - m) * mu).astype(np.float32)
        state.var[i] = (m * state.var[i] + (1 - m) * var).astype(np.float32)
    else:
        mu, var = state.mean[i], state.var[i]
    inv = (1.0 / np.sqrt(var + np.float32(state.eps))).astype(np.float32)
    xhat = (x - _bn_view(mu, x)) * _bn_view(inv, x)
    return xhat, (xhat, inv, train)


def _bn_backward(g, cache):
    xhat, inv, train = cache
    if not train:
        return g * _bn_view(inv, g)
    axes = _bn_axes(g)
    m = np.float32(g.size // inv.size)
    sg = g.sum(axis=axes, keepdims=True)
    sgx = (g * xhat).sum(axis=axes, keepdims=True)
    return (_bn_view(inv, g) / m) * (m * g - sg - xhat * sgx)


# -- public passes -----------------------------------------------------------


@dataclass
class ForwardCache:
    arch: ArchSpec
    mode: str
    records: list
    weights: dict
    input_shape: tuple
    logits_shape: tuple


def _check_congruent(arch, params, masks):
    for i in arch.param_layers:
        shape = arch.layers[i].weight_shape
        if i not in params:
            raise StructuralError(f"layer {i}: missing parameters")
        if params[i].shape != shape:
            raise StructuralError(f"layer {i}: params shape {params[i].shape} != {shape}")
        if masks is not None and i in masks and masks[i].shape != shape:
            raise StructuralError(f"layer {i}: mask shape {masks[i].shape} != {shape}")


def effective_weights(arch, params, masks=None):
    """w * m for every parameterized layer; missing masks mean all-ones."""
    out = {}
    for i in arch.param_layers:
        w = params[i]
        if masks is not None and i in masks:
            w = w * masks[i].astype(np.float32, copy=False)
        out[i] = np.asarray(w, dtype=np.float32)
    return out


def forward(arch: ArchSpec, params: dict, masks: Optional[dict], x: np.ndarray, mode: str = "eval",
            bn_state: Optional[BatchNormState] = None):
    """Run the network; returns ``(logits, cache)``.

    In ``train`` mode batchnorm layers normalize with batch statistics and
    update ``bn_state`` in place; in ``eval`` mode they use the stored running
    statistics.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    x = np.asarray(x, dtype=np.float32)
    if x.shape[1:] != arch.input_shape:
        raise StructuralError(f"input shape {x.shape[1:]} != arch input {arch.input_shape}")
    _check_congruent(arch, params, masks)
    if arch.bn_layers:
        if bn_state is None:
            raise StructuralError("architecture has batchnorm layers but no running statistics")
        missing = [i for i in arch.bn_layers if i not in bn_state.mean]
        if missing:
            raise StructuralError(f"batchnorm statistics missing for layers {missing}")
    weights = effective_weights(arch, params, masks)
    train = mode == "train"
    records = []
    h = x
    for i, spec in enumerate(arch.layers):
        k = spec.kind
        if k == "dense":
            flat = h.reshape(h.shape[0], -1)
            rec = (flat, h.shape)
            h = flat @ weights[i].T
        elif k == "conv2d":
            h, rec = _conv_forward(h, weights[i], spec.padding)
        elif k == "relu":
            rec = h > 0
            h = h * rec
        elif k == "maxpool2x2":
            h, rec = _maxpool_forward(h)
        elif k == "avgpool_global":
            rec = h.shape
            h = h.mean(axis=(2, 3), dtype=np.float32)
        else:
            h, rec = _bn_forward(h, i, bn_state, train)
        h = h.astype(np.float32, copy=False)
        if not np.isfinite(h).all():
            raise NumericError(i)
        records.append(rec)
    return h, ForwardCache(arch, mode, records, weights, x.shape, h.shape)


def backward(cache: ForwardCache, grad_logits: np.ndarray, need_input_grad: bool = True):
    """Return ``(grad_params, grad_input)``.

    ``grad_params[i]`` is dLoss/d(w*m) for layer i, reported at every
    position.  ``grad_input`` is None when ``need_input_grad`` is False.
    """
    g = np.asarray(grad_logits, dtype=np.float32)
    if g.shape != cache.logits_shape:
        raise StructuralError(f"grad shape {g.shape} != logits shape {cache.logits_shape}")
    arch = cache.arch
    grads = {}
    first = 0 if need_input_grad else _first_param_layer(arch)
    for i in range(len(arch.layers) - 1, -1, -1):
        spec = arch.layers[i]
        rec = cache.records[i]
        k = spec.kind
        want_input = i > first or need_input_grad
        if k == "dense":
            flat, shape = rec
            grads[i] = g.T @ flat
            g = (g @ cache.weights[i]).reshape(shape) if want_input else None
        elif k == "conv2d":
            grads[i], g = _conv_backward(g, cache.weights[i], rec, want_input)
        elif k == "relu":
            g = g * rec
        elif k == "maxpool2x2":
            g = _maxpool_backward(g, rec)
        elif k == "avgpool_global":
            n, c, h, w = rec
            g = np.broadcast_to((g / np.float32(h * w))[:, :, None, None], rec).astype(np.float32)
        else:
            g = _bn_backward(g, rec)
        if g is None:
            break
        g = g.astype(np.float32, copy=False)
    return grads, (g if need_input_grad else None)


def _first_param_layer(arch):
    p = arch.param_layers
    return p[0] if p else 0


def cross_entropy(logits: np.ndarray, labels: np.ndarray):
    """Mean softmax cross-entropy and its gradient with respect to the logits."""
    logits = np.asarray(logits, dtype=np.float32)
    labels = np.asarray(labels)
    b, c = logits.shape
    if labels.shape != (b,):
        raise StructuralError(f"labels shape {labels.shape} != ({b},)")
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise ValueError(f"label out of range [0, {c})")
    shifted = logits - logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - lse
    rows = np.arange(b)
    loss = float(-logp[rows, labels].mean(dtype=np.float64))
    grad = np.exp(logp)
    grad[rows, labels] -= 1.0
    return loss, (grad / np.float32(b)).astype(np.float32)


def predict(arch, params, masks, x, bn_state=None, batch_size=500):
    out = []
    for s in range(0, len(x), batch_size):
        logits, _ = forward(arch, params, masks, x[s:s + batch_size], "eval", bn_state)
        out.append(logits)
    return np.concatenate(out) if out else np.zeros((0, arch.num_classes), np.float32)


def accuracy(arch, params, masks, x, y, bn_state=None, batch_size=500):
    if len(x) == 0:
        return float("nan")
    logits = predict(arch, params, masks, x, bn_state, batch_size)
    return float((logits.argmax(axis=1) == y).mean())
