"""Layers, models, forward/backward passes and gradient checking.

A model is described by a :class:`ModelSpec` (an ordered tuple of layer
specs plus the per-example input shape). Trained state lives in
:class:`Model`: one parameter dict per layer and running statistics for
batch-norm layers. Shapes never include the batch axis.
"""

from __future__ import annotations

import copy
from dataclasses import asdict, dataclass
from typing import ClassVar

import numpy as np

from . import tensor
from .errors import ShapeError
from .tensor import FLOAT, SeededRng


def _glorot(rng, shape, fan_in, fan_out, dtype):
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return ((2.0 * rng.uniform(shape) - 1.0) * bound).astype(dtype)


# -- layer specs -----------------------------------------------------------


@dataclass(frozen=True)
class Layer:
    kind: ClassVar[str] = ""

    def out_shape(self, in_shape):
        return in_shape

    def param_shapes(self, in_shape):
        return {}

    def init(self, in_shape, rng, dtype):
        return {}

    def to_dict(self):
        return {"type": self.kind, **asdict(self)}

    # forward returns (output, cache); backward returns (d_input, grads)
    def forward(self, params, x, ctx):
        return x, None

    def backward(self, params, cache, dout):
        return dout, {}


@dataclass(frozen=True)
class Dense(Layer):
    in_features: int
    out_features: int
    kind: ClassVar[str] = "Dense"

    def __post_init__(self):
        if self.in_features <= 0 or self.out_features <= 0:
            raise ShapeError(f"Dense extents must be positive: {self}")

    def out_shape(self, in_shape):
        if tuple(in_shape) != (self.in_features,):
            raise ShapeError(f"Dense({self.in_features}->{self.out_features}) got input {tuple(in_shape)}")
        return (self.out_features,)

    def param_shapes(self, in_shape):
        return {"W": (self.in_features, self.out_features), "b": (self.out_features,)}

    def init(self, in_shape, rng, dtype):
        w = _glorot(rng, (self.in_features, self.out_features), self.in_features, self.out_features, dtype)
        return {"W": w, "b": np.zeros(self.out_features, dtype=dtype)}

    def forward(self, params, x, ctx):
        return x @ params["W"] + params["b"], x

    def backward(self, params, x, dout):
        grads = {"W": x.T @ dout, "b": dout.sum(axis=0)}
        return dout @ params["W"].T, grads


@dataclass(frozen=True)
class Conv2D(Layer):
    c_in: int
    c_out: int
    kh: int
    kw: int
    stride: int = 1
    padding: str = "valid"
    kind: ClassVar[str] = "Conv2D"

    def __post_init__(self):
        if min(self.c_in, self.c_out, self.kh, self.kw, self.stride) <= 0:
            raise ShapeError(f"Conv2D extents must be positive: {self}")
        if self.padding not in ("valid", "same"):
            raise ShapeError(f"Conv2D padding must be valid|same, got {self.padding!r}")

    def out_shape(self, in_shape):
        if len(in_shape) != 3 or in_shape[0] != self.c_in:
            raise ShapeError(f"Conv2D expects ({self.c_in}, h, w), got {tuple(in_shape)}")
        _, h, w = in_shape
        ho = tensor.conv_output_size(h, self.kh, self.stride, self.padding)
        wo = tensor.conv_output_size(w, self.kw, self.stride, self.padding)
        if ho <= 0 or wo <= 0:
            raise ShapeError(f"kernel {self.kh}x{self.kw} larger than input {h}x{w}")
        return (self.c_out, ho, wo)

    def param_shapes(self, in_shape):
        return {"W": (self.c_out, self.c_in, self.kh, self.kw), "b": (self.c_out,)}

    def init(self, in_shape, rng, dtype):
        field_ = self.kh * self.kw
        w = _glorot(rng, (self.c_out, self.c_in, self.kh, self.kw),
                    self.c_in * field_, self.c_out * field_, dtype)
        return {"W": w, "b": np.zeros(self.c_out, dtype=dtype)}

    def forward(self, params, x, ctx):
        out, cols = tensor.conv2d_forward(x, params["W"], self.stride, self.padding)
        out += params["b"][None, :, None, None]
        return out, (x.shape, cols)

    def backward(self, params, cache, dout):
        x_shape, cols = cache
        dx, dw = tensor.conv2d_backward(x_shape, params["W"], cols, dout, self.stride, self.padding)
        return dx, {"W": dw, "b": dout.sum(axis=(0, 2, 3))}


@dataclass(frozen=True)
class ReLU(Layer):
    kind: ClassVar[str] = "ReLU"

    def forward(self, params, x, ctx):
        mask = x > 0
        return np.maximum(x, 0), mask

    def backward(self, params, mask, dout):
        return dout * mask, {}


@dataclass(frozen=True)
class MaxPool2(Layer):
    kind: ClassVar[str] = "MaxPool2"

    def out_shape(self, in_shape):
        if len(in_shape) != 3 or in_shape[1] % 2 or in_shape[2] % 2:
            raise ShapeError(f"MaxPool2 needs (c, even h, even w), got {tuple(in_shape)}")
        c, h, w = in_shape
        return (c, h // 2, w // 2)

    def forward(self, params, x, ctx):
        return tensor.maxpool2(x)

    def backward(self, params, idx, dout):
        return tensor.maxpool2_backward(dout, idx), {}


@dataclass(frozen=True)
class Flatten(Layer):
    kind: ClassVar[str] = "Flatten"

    def out_shape(self, in_shape):
        return (int(np.prod(in_shape)),)

    def forward(self, params, x, ctx):
        return x.reshape(x.shape[0], -1), x.shape

    def backward(self, params, shape, dout):
        return dout.reshape(shape), {}


@dataclass(frozen=True)
class Dropout(Layer):
    """Inverted dropout: survivors are scaled by 1/(1 - rate) at train time."""

    rate: float
    kind: ClassVar[str] = "Dropout"

    def __post_init__(self):
        if not 0.0 <= self.rate < 1.0:
            raise ShapeError(f"dropout rate must be in [0, 1), got {self.rate}")

    def forward(self, params, x, ctx):
        if not ctx.train or self.rate == 0.0:
            return x, None
        if ctx.rng is None:
            raise ValueError("train-mode dropout needs an rng")
        keep = ctx.rng.uniform(x.shape) >= self.rate
        scale = (keep / (1.0 - self.rate)).astype(x.dtype)
        return x * scale, scale

    def backward(self, params, scale, dout):
        return (dout if scale is None else dout * scale), {}


@dataclass(frozen=True)
class BatchNorm(Layer):
    """Per-channel (c×h×w input) or per-feature (flat input) normalization.

    Running statistics follow ``running = momentum * running + (1 - momentum) * batch``
    with the biased batch variance.
    """

    channels: int
    eps: float = 1e-5
    momentum: float = 0.9
    kind: ClassVar[str] = "BatchNorm"

    def __post_init__(self):
        if self.channels <= 0 or self.eps <= 0:
            raise ShapeError(f"BatchNorm needs channels > 0 and eps > 0: {self}")

    def out_shape(self, in_shape):
        if in_shape[0] != self.channels:
            raise ShapeError(f"BatchNorm({self.channels}) got input {tuple(in_shape)}")
        return in_shape

    def param_shapes(self, in_shape):
        return {"gamma": (self.channels,), "beta": (self.channels,)}

    def init(self, in_shape, rng, dtype):
        return {"gamma": np.ones(self.channels, dtype=dtype), "beta": np.zeros(self.channels, dtype=dtype)}

    @staticmethod
    def _axes(x):
        return (0,) if x.ndim == 2 else (0, 2, 3)

    @staticmethod
    def _bcast(v, x):
        return v if x.ndim == 2 else v[None, :, None, None]

    def forward(self, params, x, ctx):
        axes = self._axes(x)
        stats = ctx.stats
        if ctx.train:
            mean = x.mean(axis=axes, dtype=np.float64)
            var = ((x - self._bcast(mean, x)) ** 2).mean(axis=axes, dtype=np.float64)
            if ctx.update_stats:
                m = self.momentum
                stats["mean"][...] = m * stats["mean"] + (1 - m) * mean
                stats["var"][...] = m * stats["var"] + (1 - m) * var
        else:
            mean, var = stats["mean"], stats["var"]
        mean = mean.astype(x.dtype)
        inv_std = (1.0 / np.sqrt(var + self.eps)).astype(x.dtype)
        xhat = (x - self._bcast(mean, x)) * self._bcast(inv_std, x)
        out = xhat * self._bcast(params["gamma"], x) + self._bcast(params["beta"], x)
        return out, (xhat, inv_std, ctx.train)

    def backward(self, params, cache, dout):
        xhat, inv_std, batch_stats = cache
        axes = self._axes(dout)
        grads = {"gamma": (dout * xhat).sum(axis=axes), "beta": dout.sum(axis=axes)}
        dxhat = dout * self._bcast(params["gamma"], dout)
        if not batch_stats:
            return dxhat * self._bcast(inv_std, dout), grads
        n = dout.size // dout.shape[1]
        s1 = dxhat.sum(axis=axes)
        s2 = (dxhat * xhat).sum(axis=axes)
        dx = (dxhat - self._bcast(s1 / n, dout) - xhat * self._bcast(s2 / n, dout)) * self._bcast(inv_std, dout)
        return dx, grads


@dataclass(frozen=True)
class Output(Layer):
    """Marks the end of the network; its input is the logit vector."""

    classes: int
    kind: ClassVar[str] = "Output"

    def out_shape(self, in_shape):
        if tuple(in_shape) != (self.classes,):
            raise ShapeError(f"Output({self.classes}) got input {tuple(in_shape)}")
        return in_shape


LAYER_TYPES = {cls.kind: cls for cls in (Dense, Conv2D, ReLU, MaxPool2, Flatten, Dropout, BatchNorm, Output)}


def layer_from_dict(d):
    d = dict(d)
    kind = d.pop("type")
    if kind not in LAYER_TYPES:
        raise ShapeError(f"unknown layer type {kind!r}")
    return LAYER_TYPES[kind](**d)


# -- model spec ------------------------------------------------------------


@dataclass(frozen=True)
class ModelSpec:
    layers: tuple
    input_shape: tuple
    name: str = ""

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "input_shape", tuple(int(s) for s in self.input_shape))
        self.shapes()  # validates composition

    def shapes(self):
        """Per-layer input shapes, followed by the final output shape."""
        if not self.layers or not isinstance(self.layers[-1], Output):
            raise ShapeError("the last layer must be Output(classes)")
        if any(isinstance(layer, Output) for layer in self.layers[:-1]):
            raise ShapeError("Output may only appear as the last layer")
        if not any(isinstance(layer, Dense) for layer in self.layers):
            raise ShapeError("a model needs at least one Dense layer to produce logits")
        shapes = [self.input_shape]
        for layer in self.layers:
            shapes.append(tuple(layer.out_shape(shapes[-1])))
        return shapes

    @property
    def num_classes(self):
        return self.layers[-1].classes

    @property
    def classifier_index(self):
        """Index of the final Dense layer; its input is the penultimate activation."""
        return max(i for i, layer in enumerate(self.layers) if isinstance(layer, Dense))

    def to_dict(self):
        return {"name": self.name, "input_shape": list(self.input_shape),
                "layers": [layer.to_dict() for layer in self.layers]}

    @classmethod
    def from_dict(cls, d):
        return cls(tuple(layer_from_dict(x) for x in d["layers"]), tuple(d["input_shape"]), d.get("name", ""))


def param_count(spec: ModelSpec) -> int:
    """Weights + biases + batch-norm scale/shift over all layers."""
    shapes = spec.shapes()
    total = 0
    for layer, in_shape in zip(spec.layers, shapes):
        for s in layer.param_shapes(in_shape).values():
            total += int(np.prod(s))
    return total


# -- model -----------------------------------------------------------------


@dataclass
class _Ctx:
    train: bool
    rng: SeededRng | None
    stats: dict | None = None
    update_stats: bool = True


@dataclass
class Model:
    spec: ModelSpec
    params: list
    stats: list  # per layer: {"mean", "var"} for BatchNorm, else {}
    mode: str = "train"

    def train(self):
        self.mode = "train"
        return self

    def eval(self):
        self.mode = "eval"
        return self

    @property
    def dtype(self):
        for p in self.params:
            for v in p.values():
                return v.dtype
        return np.dtype(FLOAT)

    def astype(self, dtype):
        cast = lambda ds: [{k: v.astype(dtype) for k, v in d.items()} for d in ds]  # noqa: E731
        return Model(self.spec, cast(self.params), cast(self.stats), self.mode)

    def copy(self):
        return copy.deepcopy(self)

    def flat_params(self):
        return np.concatenate([v.ravel() for p in self.params for v in p.values()]
                              or [np.zeros(0, dtype=self.dtype)])


def init_params(spec: ModelSpec, rng: SeededRng, dtype=FLOAT) -> Model:
    """Glorot-uniform weights, zero biases, unit batch-norm scale."""
    shapes = spec.shapes()
    params, stats = [], []
    for layer, in_shape in zip(spec.layers, shapes):
        params.append(layer.init(in_shape, rng, dtype))
        if isinstance(layer, BatchNorm):
            stats.append({"mean": np.zeros(layer.channels, dtype=dtype),
                          "var": np.ones(layer.channels, dtype=dtype)})
        else:
            stats.append({})
    return Model(spec, params, stats)


def forward(model: Model, batch, rng: SeededRng | None = None, update_stats=True):
    """Run the network on a batch.

    Returns ``(logits, penultimate, caches)``; ``penultimate`` is the input of
    the final Dense layer. In train mode, dropout draws from ``rng`` and
    batch-norm layers update their running statistics. In eval mode a float32
    model is evaluated in float64 and the outputs rounded to float32.
    """
    spec = model.spec
    x = np.asarray(batch)
    if x.shape[1:] != spec.input_shape:
        raise ShapeError(f"batch shape {x.shape[1:]} does not match model input {spec.input_shape}")
    train = model.mode == "train"
    out_dtype = model.dtype
    if not train and out_dtype != np.float64:
        # float32 BLAS results depend on a row's position within the batch;
        # eval runs in float64 and rounds back so each row is batch-independent
        model = model.astype(np.float64)
    x = x.astype(model.dtype, copy=False)
    caches = []
    penultimate = None
    cls_idx = spec.classifier_index
    for i, (layer, params) in enumerate(zip(spec.layers, model.params)):
        if i == cls_idx:
            penultimate = x
        ctx = _Ctx(train, rng, model.stats[i], update_stats)
        x, cache = layer.forward(params, x, ctx)
        caches.append(cache)
    if x.dtype != out_dtype:
        x, penultimate = x.astype(out_dtype), penultimate.astype(out_dtype)
    return x, penultimate, caches


def backward(model: Model, caches, dlogits):
    """Reverse pass; returns one gradient dict per layer, shaped like ``model.params``."""
    if len(caches) != len(model.spec.layers):
        raise ShapeError("caches do not belong to this model")
    d = np.asarray(dlogits, dtype=model.dtype)
    grads = [None] * len(caches)
    for i in range(len(caches) - 1, -1, -1):
        layer = model.spec.layers[i]
        d, g = layer.backward(model.params[i], caches[i], d)
        grads[i] = g
    return grads


def predict_logits(model: Model, images, batch_size=1000, penultimate=False):
    """Eval-mode logits (and optionally penultimate activations), in chunks."""
    was = model.mode
    model.eval()
    try:
        outs, pens = [], []
        for start in range(0, len(images), batch_size):
            logits, pen, _ = forward(model, images[start:start + batch_size])
            outs.append(logits)
            if penultimate:
                pens.append(pen)
    finally:
        model.mode = was
    c = model.spec.num_classes
    logits = np.concatenate(outs) if outs else np.zeros((0, c), dtype=model.dtype)
    if penultimate:
        d = model.spec.shapes()[model.spec.classifier_index][0]
        return logits, (np.concatenate(pens) if pens else np.zeros((0, d), dtype=model.dtype))
    return logits


def grad_check(model: Model, loss_fn, batch, eps=1e-4, seed=0):
    """Worst relative error between analytic and central-difference gradients.

    ``loss_fn(logits) -> (value, dvalue_dlogits)``. The check runs on a float64
    copy of ``model`` (in its current mode); the relative error uses the
    denominator ``max(|analytic|, |numeric|, 1e-8)``. Dropout masks are
    replayed from ``seed`` on every evaluation.
    """
    m = model.astype(np.float64)
    x = np.asarray(batch, dtype=np.float64)

    def run():
        logits, _, caches = forward(m, x, SeededRng(seed), update_stats=False)
        value, dlogits = loss_fn(logits)
        if not np.isfinite(value):
            raise FloatingPointError(f"non-finite loss {value}")
        return value, dlogits, caches

    _, dlogits, caches = run()
    analytic = backward(m, caches, dlogits)
    worst = 0.0
    for layer_params, layer_grads in zip(m.params, analytic):
        for name, p in layer_params.items():
            g = layer_grads[name]
            flat = p.reshape(-1)
            for j in range(flat.size):
                orig = flat[j]
                flat[j] = orig + eps
                fp = run()[0]
                flat[j] = orig - eps
                fm = run()[0]
                flat[j] = orig
                num = (fp - fm) / (2 * eps)
                a = g.reshape(-1)[j]
                err = abs(a - num) / max(abs(a), abs(num), 1e-8)
                worst = max(worst, err)
    return worst
