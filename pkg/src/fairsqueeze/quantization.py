"""Post-training int8 quantization of Conv2D/Dense kernels and biases.

Per-tensor symmetric scheme: ``scale = max|w| / 127``, ``zero_point = 0``,
``q = clamp(round(w / scale), -127, 127)``. Activations stay float; inference
dequantizes the weights and runs the ordinary forward pass.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .network import Model

QMAX = 127


@dataclass
class QuantizedTensor:
    values: np.ndarray  # int8
    scale: float
    zero_point: int = 0

    def __post_init__(self):
        if not self.scale > 0:
            raise ValueError(f"scale must be positive, got {self.scale}")

    def dequantize(self) -> np.ndarray:
        # float64 so the round-trip bound holds without float32 rounding on top
        return float(self.scale) * (self.values.astype(np.float64) - self.zero_point)

    @property
    def shape(self):
        return self.values.shape


def quantize_tensor(w: np.ndarray) -> QuantizedTensor:
    """Symmetric int8 quantization. An all-zero tensor gets ``scale = 1`` and all-zero codes."""
    w64 = np.asarray(w, dtype=np.float64)
    peak = float(np.abs(w64).max(initial=0.0))
    if peak == 0.0:
        return QuantizedTensor(np.zeros(w64.shape, dtype=np.int8), 1.0, 0)
    scale = float(np.float32(peak / QMAX))
    q = np.clip(np.rint(w64 / scale), -QMAX, QMAX).astype(np.int8)
    return QuantizedTensor(q, scale, 0)


def quantizable(model: Model) -> list[str]:
    return [
        f"{layer.name}/{key}"
        for layer in model.layers
        if layer.kind in ("Conv2D", "Dense")
        for key in ("kernel", "bias")
    ]


@dataclass
class QuantizedModel:
    """A float model skeleton plus int8 replacements for its kernels and biases."""

    base: Model
    tensors: dict[str, QuantizedTensor]
    _dequantized: Model | None = field(default=None, repr=False, compare=False)

    @property
    def input_shape(self):
        return self.base.input_shape

    @property
    def num_classes(self):
        return self.base.num_classes

    @property
    def metadata(self):
        return self.base.metadata

    def dequantized_model(self) -> Model:
        if self._dequantized is None:
            m = self.base.copy()
            for name, qt in self.tensors.items():
                m.set_tensor(name, qt.dequantize().astype(m.get_tensor(name).dtype))
            self._dequantized = m
        return self._dequantized

    def forward(self, batch: np.ndarray, mode: str = "infer", rng=None) -> np.ndarray:
        return self.dequantized_model().forward(batch, mode="infer")


def quantize_model(model: Model) -> QuantizedModel:
    """Quantize every Conv2D/Dense kernel and bias; BatchNorm stays float."""
    base = model.copy()
    return QuantizedModel(base, {name: quantize_tensor(model.get_tensor(name)) for name in quantizable(model)})


def forward_quantized(qmodel: QuantizedModel, batch: np.ndarray) -> np.ndarray:
    return qmodel.forward(batch)
