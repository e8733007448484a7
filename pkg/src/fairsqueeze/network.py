"""Layer stack, forward pass, and the two reference FER architectures.

Layers are small objects holding named parameter arrays. ``forward`` returns
``(output, cache)`` and ``backward`` consumes the cache, so inference never
touches layer state. The one exception is train-mode BatchNorm, which folds
the batch statistics into its running averages.
"""
from __future__ import annotations

import copy
import json
from collections.abc import Iterator, Sequence
from pathlib import Path
from typing import Any

import numpy as np

from .errors import DimensionError, ParameterError
from .tensor import conv2d, conv2d_backward, make_rng, maxpool2, maxpool2_backward

__all__ = [
    "Layer",
    "Conv2D",
    "BatchNorm",
    "Activation",
    "MaxPool",
    "Dropout",
    "Flatten",
    "Dense",
    "Softmax",
    "Model",
    "build_ck48",
    "build_raf100",
    "build_fer_stack",
    "forward",
    "parameters",
    "load_architecture",
    "CK48_SUMMARY",
    "RAF100_SUMMARY",
]

KERAS_PREFIX = {
    "Conv2D": "conv2d",
    "BatchNorm": "batch_normalization",
    "Activation": "activation",
    "MaxPool": "max_pooling2d",
    "Dropout": "dropout",
    "Flatten": "flatten",
    "Dense": "dense",
    "Softmax": "softmax",
}


def _truncated_normal(rng: np.random.Generator, shape: tuple[int, ...], std: float) -> np.ndarray:
    z = rng.standard_normal(shape)
    bad = np.abs(z) > 2.0
    while bad.any():
        z[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(z) > 2.0
    return (z * std).astype(np.float32)


class Layer:
    kind = ""
    prunable_params: tuple[str, ...] = ()

    def __init__(self, name: str | None = None):
        self.name = name
        self.params: dict[str, np.ndarray] = {}
        self.buffers: dict[str, np.ndarray] = {}

    def build(self, input_shape: tuple[int, ...], rng: np.random.Generator) -> tuple[int, ...]:
        return self.output_shape(input_shape)

    def output_shape(self, input_shape: tuple[int, ...]) -> tuple[int, ...]:
        return input_shape

    def forward(self, x, training=False, rng=None):
        raise NotImplementedError

    def backward(self, dy, cache):
        raise NotImplementedError

    def config(self) -> dict[str, Any]:
        return {"kind": self.kind, "name": self.name}

    def __repr__(self):
        return f"{type(self).__name__}({self.name!r})"


class Conv2D(Layer):
    kind = "Conv2D"
    prunable_params = ("kernel",)

    def __init__(self, filters: int, kernel_size: int = 3, padding: str = "same", name=None):
        super().__init__(name)
        self.filters = int(filters)
        self.kernel_size = int(kernel_size)
        self.padding = padding

    def output_shape(self, input_shape):
        if len(input_shape) != 3:
            raise DimensionError(f"{self.name}: Conv2D needs an H,W,C input, got {input_shape}")
        h, w, _ = input_shape
        if self.padding == "valid":
            h, w = h - self.kernel_size + 1, w - self.kernel_size + 1
        return (h, w, self.filters)

    def build(self, input_shape, rng):
        out = self.output_shape(input_shape)
        k, cin = self.kernel_size, input_shape[2]
        fan_in = k * k * cin
        self.params["kernel"] = _truncated_normal(rng, (k, k, cin, self.filters), np.sqrt(2.0 / fan_in))
        self.params["bias"] = np.zeros(self.filters, dtype=np.float32)
        return out

    def forward(self, x, training=False, rng=None):
        y = conv2d(x, self.params["kernel"], self.padding) + self.params["bias"]
        return y, x

    def backward(self, dy, cache):
        dx, dk = conv2d_backward(cache, self.params["kernel"], dy, self.padding)
        return dx, {"kernel": dk, "bias": dy.sum(axis=(0, 1, 2))}

    def config(self):
        return {**super().config(), "filters": self.filters, "kernel_size": self.kernel_size, "padding": self.padding}


class Dense(Layer):
    kind = "Dense"
    prunable_params = ("kernel",)

    def __init__(self, units: int, name=None):
        super().__init__(name)
        self.units = int(units)

    def output_shape(self, input_shape):
        if len(input_shape) != 1:
            raise DimensionError(f"{self.name}: Dense needs a flat input, got {input_shape}")
        return (self.units,)

    def build(self, input_shape, rng):
        out = self.output_shape(input_shape)
        fan_in = input_shape[0]
        self.params["kernel"] = _truncated_normal(rng, (fan_in, self.units), np.sqrt(2.0 / fan_in))
        self.params["bias"] = np.zeros(self.units, dtype=np.float32)
        return out

    def forward(self, x, training=False, rng=None):
        return x @ self.params["kernel"] + self.params["bias"], x

    def backward(self, dy, cache):
        return dy @ self.params["kernel"].T, {"kernel": cache.T @ dy, "bias": dy.sum(axis=0)}

    def config(self):
        return {**super().config(), "units": self.units}


class BatchNorm(Layer):
    """Per-channel batch normalization over every axis but the last."""

    kind = "BatchNorm"

    def __init__(self, epsilon: float = 1e-3, momentum: float = 0.99, name=None):
        super().__init__(name)
        self.epsilon = float(epsilon)
        self.momentum = float(momentum)

    def build(self, input_shape, rng):
        c = input_shape[-1]
        self.params["gamma"] = np.ones(c, dtype=np.float32)
        self.params["beta"] = np.zeros(c, dtype=np.float32)
        self.buffers["running_mean"] = np.zeros(c, dtype=np.float32)
        self.buffers["running_var"] = np.ones(c, dtype=np.float32)
        return input_shape

    def forward(self, x, training=False, rng=None):
        gamma, beta = self.params["gamma"], self.params["beta"]
        if not training:
            inv = 1.0 / np.sqrt(self.buffers["running_var"] + self.epsilon)
            return (x - self.buffers["running_mean"]) * inv * gamma + beta, None
        axes = tuple(range(x.ndim - 1))
        mean = x.mean(axis=axes)
        var = x.var(axis=axes)
        inv = 1.0 / np.sqrt(var + self.epsilon)
        xhat = (x - mean) * inv
        return xhat * gamma + beta, (xhat, inv, mean, var)

    def update_running(self, cache) -> None:
        _, _, mean, var = cache
        m = self.momentum
        rm, rv = self.buffers["running_mean"], self.buffers["running_var"]
        self.buffers["running_mean"] = (m * rm + (1 - m) * mean).astype(rm.dtype)
        self.buffers["running_var"] = (m * rv + (1 - m) * var).astype(rv.dtype)

    def backward(self, dy, cache):
        xhat, inv, _, _ = cache
        axes = tuple(range(dy.ndim - 1))
        count = dy.size // dy.shape[-1]
        dgamma = (dy * xhat).sum(axis=axes)
        dbeta = dy.sum(axis=axes)
        dxhat = dy * self.params["gamma"]
        dx = (inv / count) * (count * dxhat - dxhat.sum(axis=axes) - xhat * (dxhat * xhat).sum(axis=axes))
        return dx, {"gamma": dgamma, "beta": dbeta}

    def config(self):
        return {**super().config(), "epsilon": self.epsilon, "momentum": self.momentum}


class Activation(Layer):
    kind = "Activation"

    def __init__(self, function: str = "relu", name=None):
        super().__init__(name)
        if function not in ("relu", "tanh", "linear"):
            raise ParameterError(f"unsupported activation {function!r}")
        self.function = function

    def forward(self, x, training=False, rng=None):
        if self.function == "relu":
            return np.maximum(x, 0), x
        if self.function == "tanh":
            y = np.tanh(x)
            return y, y
        return x, None

    def backward(self, dy, cache):
        if self.function == "relu":
            return dy * (cache > 0), {}
        if self.function == "tanh":
            return dy * (1 - cache * cache), {}
        return dy, {}

    def config(self):
        return {**super().config(), "function": self.function}


class MaxPool(Layer):
    kind = "MaxPool"

    def output_shape(self, input_shape):
        h, w, c = input_shape
        if h < 2 or w < 2:
            raise DimensionError(f"{self.name}: cannot pool {input_shape}")
        return (h // 2, w // 2, c)

    def forward(self, x, training=False, rng=None):
        return maxpool2(x), x

    def backward(self, dy, cache):
        return maxpool2_backward(cache, dy), {}


class Dropout(Layer):
    kind = "Dropout"

    def __init__(self, rate: float = 0.5, name=None):
        super().__init__(name)
        if not 0.0 <= rate < 1.0:
            raise ParameterError(f"dropout rate must lie in [0, 1), got {rate}")
        self.rate = float(rate)

    def forward(self, x, training=False, rng=None):
        if not training or self.rate == 0.0:
            return x, None
        if rng is None:
            raise ValueError("train-mode dropout needs an rng")
        mask = (rng.random(x.shape) >= self.rate).astype(x.dtype) / (1.0 - self.rate)
        return x * mask, mask

    def backward(self, dy, cache):
        return (dy if cache is None else dy * cache), {}

    def config(self):
        return {**super().config(), "rate": self.rate}


class Flatten(Layer):
    kind = "Flatten"

    def output_shape(self, input_shape):
        return (int(np.prod(input_shape)),)

    def forward(self, x, training=False, rng=None):
        return x.reshape(x.shape[0], -1), x.shape

    def backward(self, dy, cache):
        return dy.reshape(cache), {}


class Softmax(Layer):
    kind = "Softmax"

    def output_shape(self, input_shape):
        if len(input_shape) != 1:
            raise DimensionError(f"{self.name}: Softmax needs a flat input, got {input_shape}")
        return input_shape

    def forward(self, x, training=False, rng=None):
        z = x - x.max(axis=-1, keepdims=True)
        e = np.exp(z)
        y = e / e.sum(axis=-1, keepdims=True)
        return y, y

    def backward(self, dy, cache):
        y = cache
        return y * (dy - (dy * y).sum(axis=-1, keepdims=True)), {}


LAYER_KINDS = {cls.kind: cls for cls in (Conv2D, BatchNorm, Activation, MaxPool, Dropout, Flatten, Dense, Softmax)}


class Model:
    """Ordered layer stack mapping an ``input_shape`` batch to class probabilities."""

    def __init__(self, layers: Sequence[Layer], input_shape: Sequence[int], num_classes: int, seed: int = 0):
        self.layers = list(layers)
        self.input_shape = tuple(int(d) for d in input_shape)
        self.num_classes = int(num_classes)
        self.metadata: dict[str, Any] = {}
        self._shapes: list[tuple[int, ...]] = []
        self._assign_names()
        self._build(make_rng(seed, "init"))

    def _assign_names(self):
        taken = {layer.name for layer in self.layers if layer.name}
        counters: dict[str, int] = {}
        for layer in self.layers:
            if layer.name:
                continue
            prefix = KERAS_PREFIX[layer.kind]
            while True:
                i = counters.get(prefix, 0)
                counters[prefix] = i + 1
                name = prefix if i == 0 else f"{prefix}_{i}"
                if name not in taken:
                    break
            layer.name = name
            taken.add(name)
        if len(taken) != len(self.layers):
            raise ParameterError("layer names must be unique")

    def _build(self, rng):
        if not self.layers or self.layers[-1].kind != "Softmax":
            raise ParameterError("the last layer must be Softmax")
        shape = self.input_shape
        self._shapes = []
        for layer in self.layers:
            shape = layer.build(shape, rng)
            if any(d < 1 for d in shape):
                raise DimensionError(f"{layer.name}: output shape {shape} is empty")
            self._shapes.append(shape)
        if shape != (self.num_classes,):
            raise DimensionError(f"final output {shape} does not match num_classes={self.num_classes}")

    # --- introspection -------------------------------------------------

    def summary(self) -> list[tuple[str, tuple[int, ...]]]:
        """``(layer name, output shape)`` per layer, batch axis omitted."""
        return [(layer.name, shape) for layer, shape in zip(self.layers, self._shapes)]

    def parameters(self) -> list[tuple[str, np.ndarray, bool]]:
        """Trainable tensors as ``(name, array, prunable)``, in layer order."""
        out = []
        for layer in self.layers:
            for key, arr in layer.params.items():
                out.append((f"{layer.name}/{key}", arr, key in layer.prunable_params))
        return out

    def named_tensors(self) -> Iterator[tuple[str, np.ndarray]]:
        """Every stored tensor: trainable parameters followed by each layer's buffers."""
        for layer in self.layers:
            for key, arr in layer.params.items():
                yield f"{layer.name}/{key}", arr
            for key, arr in layer.buffers.items():
                yield f"{layer.name}/{key}", arr

    def get_tensor(self, name: str) -> np.ndarray:
        layer, key = self._locate(name)
        return layer.params[key] if key in layer.params else layer.buffers[key]

    def set_tensor(self, name: str, value: np.ndarray) -> None:
        layer, key = self._locate(name)
        store = layer.params if key in layer.params else layer.buffers
        if store[key].shape != np.shape(value):
            raise DimensionError(f"{name}: expected shape {store[key].shape}, got {np.shape(value)}")
        store[key] = np.asarray(value, dtype=store[key].dtype)

    def _locate(self, name: str) -> tuple[Layer, str]:
        lname, _, key = name.rpartition("/")
        for layer in self.layers:
            if layer.name == lname and (key in layer.params or key in layer.buffers):
                return layer, key
        raise KeyError(name)

    def layer(self, name: str) -> Layer:
        for layer in self.layers:
            if layer.name == name:
                return layer
        raise KeyError(f"no layer named {name!r}")

    def count_params(self, include_buffers: bool = False) -> int:
        n = sum(a.size for _, a, _ in self.parameters())
        if include_buffers:
            n += sum(a.size for layer in self.layers for a in layer.buffers.values())
        return n

    def copy(self) -> "Model":
        return copy.deepcopy(self)

    def astype(self, dtype) -> "Model":
        m = self.copy()
        for layer in m.layers:
            layer.params = {k: v.astype(dtype) for k, v in layer.params.items()}
            layer.buffers = {k: v.astype(dtype) for k, v in layer.buffers.items()}
        return m

    # --- computation ---------------------------------------------------

    def check_batch(self, batch: np.ndarray) -> None:
        if batch.ndim != len(self.input_shape) + 1 or tuple(batch.shape[1:]) != self.input_shape:
            raise DimensionError(f"batch of shape {batch.shape} does not match model input {self.input_shape}")

    def forward(self, batch: np.ndarray, mode: str = "infer", rng: np.random.Generator | None = None) -> np.ndarray:
        if mode not in ("infer", "train"):
            raise ValueError(f"mode must be 'infer' or 'train', got {mode!r}")
        probs, _ = self.forward_with_cache(batch, training=mode == "train", rng=rng)
        return probs

    def forward_with_cache(self, batch, training=False, rng=None, update_stats=True):
        self.check_batch(batch)
        dtype = next((layer_params.dtype for layer in self.layers for layer_params in layer.params.values()), np.float32)
        x = np.asarray(batch, dtype=dtype)
        caches = []
        for layer in self.layers:
            x, cache = layer.forward(x, training=training, rng=rng)
            if training and update_stats and isinstance(layer, BatchNorm):
                layer.update_running(cache)
            caches.append(cache)
        return x, caches

    # --- (de)serialization of the architecture --------------------------

    def to_config(self) -> dict[str, Any]:
        return {
            "input_shape": list(self.input_shape),
            "num_classes": self.num_classes,
            "layers": [layer.config() for layer in self.layers],
        }

    @classmethod
    def from_config(cls, config: dict[str, Any], seed: int = 0) -> "Model":
        layers = []
        for spec in config["layers"]:
            spec = dict(spec)
            kind = spec.pop("kind")
            if kind not in LAYER_KINDS:
                raise ParameterError(f"unknown layer kind {kind!r}")
            layers.append(LAYER_KINDS[kind](**spec))
        return cls(layers, config["input_shape"], config["num_classes"], seed=seed)


def forward(model: Model, batch: np.ndarray, mode: str = "infer", rng=None) -> np.ndarray:
    return model.forward(batch, mode=mode, rng=rng)


def parameters(model: Model) -> list[tuple[str, np.ndarray, bool]]:
    return model.parameters()


def load_architecture(path: str | Path, seed: int = 0) -> Model:
    """Build a freshly initialised model from a JSON architecture file."""
    with open(path, encoding="utf-8") as fh:
        return Model.from_config(json.load(fh), seed=seed)


def build_fer_stack(
    input_shape: Sequence[int],
    num_classes: int,
    conv_filters: Sequence[int] = (64, 128, 512, 512),
    conv_kernels: Sequence[int] = (3, 5, 3, 3),
    dense_units: Sequence[int] = (256, 512),
    conv_dropout: float = 0.25,
    dense_dropout: float = 0.5,
    activation: str = "relu",
    bn_epsilon: float = 1e-3,
    bn_momentum: float = 0.99,
    seed: int = 0,
) -> Model:
    """Conv blocks (conv-BN-act-pool-dropout) then dense blocks (dense-BN-act-dropout) and a softmax head."""
    layers: list[Layer] = []
    for f, k in zip(conv_filters, conv_kernels):
        layers += [
            Conv2D(f, k, "same"),
            BatchNorm(bn_epsilon, bn_momentum),
            Activation(activation),
            MaxPool(),
            Dropout(conv_dropout),
        ]
    layers.append(Flatten())
    for u in dense_units:
        layers += [Dense(u), BatchNorm(bn_epsilon, bn_momentum), Activation(activation), Dropout(dense_dropout)]
    layers += [Dense(num_classes), Softmax()]
    return Model(layers, input_shape, num_classes, seed=seed)


def _scaled(widths, width):
    return [max(1, int(round(w * width))) for w in widths]


def build_ck48(width: float = 1.0, seed: int = 0, **kwargs) -> Model:
    """48x48 grayscale, 8 classes. ``width`` scales every hidden layer for desk-sized runs."""
    return build_fer_stack(
        (48, 48, 1), 8, _scaled((64, 128, 512, 512), width), (3, 5, 3, 3), _scaled((256, 512), width), seed=seed, **kwargs
    )


def build_raf100(width: float = 1.0, channels: int = 1, seed: int = 0, **kwargs) -> Model:
    """100x100 input, 7 classes. Single channel by default: that is what reproduces the published count."""
    return build_fer_stack(
        (100, 100, channels), 7, _scaled((64, 128, 512, 512), width), (3, 5, 3, 3), _scaled((256, 512), width), seed=seed, **kwargs
    )


def _table(rows):
    return [(name, tuple(shape)) for name, shape in rows]


# Output shapes as printed by Keras for the two reference models; the
# softmax head is the activation of the final dense layer there.
CK48_SUMMARY = _table([
    ("conv2d", (48, 48, 64)), ("batch_normalization", (48, 48, 64)), ("activation", (48, 48, 64)),
    ("max_pooling2d", (24, 24, 64)), ("dropout", (24, 24, 64)),
    ("conv2d_1", (24, 24, 128)), ("batch_normalization_1", (24, 24, 128)), ("activation_1", (24, 24, 128)),
    ("max_pooling2d_1", (12, 12, 128)), ("dropout_1", (12, 12, 128)),
    ("conv2d_2", (12, 12, 512)), ("batch_normalization_2", (12, 12, 512)), ("activation_2", (12, 12, 512)),
    ("max_pooling2d_2", (6, 6, 512)), ("dropout_2", (6, 6, 512)),
    ("conv2d_3", (6, 6, 512)), ("batch_normalization_3", (6, 6, 512)), ("activation_3", (6, 6, 512)),
    ("max_pooling2d_3", (3, 3, 512)), ("dropout_3", (3, 3, 512)),
    ("flatten", (4608,)),
    ("dense", (256,)), ("batch_normalization_4", (256,)), ("activation_4", (256,)), ("dropout_4", (256,)),
    ("dense_1", (512,)), ("batch_normalization_5", (512,)), ("activation_5", (512,)), ("dropout_5", (512,)),
    ("dense_2", (8,)),
])

RAF100_SUMMARY = _table([
    ("conv2d", (100, 100, 64)), ("batch_normalization", (100, 100, 64)), ("activation", (100, 100, 64)),
    ("max_pooling2d", (50, 50, 64)), ("dropout", (50, 50, 64)),
    ("conv2d_1", (50, 50, 128)), ("batch_normalization_1", (50, 50, 128)), ("activation_1", (50, 50, 128)),
    ("max_pooling2d_1", (25, 25, 128)), ("dropout_1", (25, 25, 128)),
    ("conv2d_2", (25, 25, 512)), ("batch_normalization_2", (25, 25, 512)), ("activation_2", (25, 25, 512)),
    ("max_pooling2d_2", (12, 12, 512)), ("dropout_2", (12, 12, 512)),
    ("conv2d_3", (12, 12, 512)), ("batch_normalization_3", (12, 12, 512)), ("activation_3", (12, 12, 512)),
    ("max_pooling2d_3", (6, 6, 512)), ("dropout_3", (6, 6, 512)),
    ("flatten", (18432,)),
    ("dense", (256,)), ("batch_normalization_4", (256,)), ("activation_4", (256,)), ("dropout_4", (256,)),
    ("dense_1", (512,)), ("batch_normalization_5", (512,)), ("activation_5", (512,)), ("dropout_5", (512,)),
    ("dense_2", (7,)),
])
