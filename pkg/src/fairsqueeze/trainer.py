"""Cross-entropy training with Adam, best-weights tracking and flip/rotate augmentation.

``fit`` is also the fine-tuning engine for pruned and clustered models: a
``constraint`` object can rewrite gradients before each Adam step and
re-impose its structure on the weights afterwards.
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol

import numpy as np
from scipy import ndimage

from .errors import DimensionError, ParameterError, TrainingError
from .network import Model
from .tensor import make_rng

log = logging.getLogger(__name__)

PROB_FLOOR = 1e-7
MAX_ROTATION_DEG = 10.0


@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 64
    learning_rate: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_epsilon: float = 1e-7
    augment: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ParameterError("epochs and batch_size must be at least 1")
        if not (0 < self.adam_beta1 < 1 and 0 < self.adam_beta2 < 1):
            raise ParameterError("Adam betas must lie strictly between 0 and 1")
        if self.learning_rate <= 0:
            raise ParameterError("learning_rate must be positive")


@dataclass
class EpochRecord:
    epoch: int
    train_accuracy: float
    train_loss: float
    val_accuracy: float
    val_loss: float


@dataclass
class TrainLog:
    records: list[EpochRecord] = field(default_factory=list)

    @property
    def best_epoch(self) -> int:
        return best_epoch([r.val_accuracy for r in self.records])

    @property
    def best_val_accuracy(self) -> float:
        return self.records[self.best_epoch - 1].val_accuracy

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "train_acc", "train_loss", "val_acc", "val_loss"])
            for r in self.records:
                w.writerow([r.epoch, repr(r.train_accuracy), repr(r.train_loss), repr(r.val_accuracy), repr(r.val_loss)])


def best_epoch(val_accuracies) -> int:
    """1-based index of the highest validation accuracy; ties go to the earliest epoch."""
    if len(val_accuracies) == 0:
        raise ValueError("no epochs recorded")
    return int(np.argmax(val_accuracies)) + 1


def _as_index_labels(labels: np.ndarray, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.ndim == 2:
        if labels.shape[1] != num_classes:
            raise DimensionError(f"one-hot labels {labels.shape} do not match {num_classes} classes")
        return labels.argmax(axis=1)
    return labels.astype(np.int64)


def one_hot(labels, num_classes: int) -> np.ndarray:
    out = np.zeros((len(labels), num_classes), dtype=np.float32)
    out[np.arange(len(labels)), np.asarray(labels, dtype=np.int64)] = 1.0
    return out


def cross_entropy(probs: np.ndarray, labels: np.ndarray) -> float:
    """Mean of ``-log p(true class)`` with probabilities clamped to ``[1e-7, 1]``.

    ``labels`` may be one-hot rows or integer class indices.
    """
    probs = np.asarray(probs)
    if probs.ndim != 2:
        raise DimensionError(f"probs must be batch x classes, got {probs.shape}")
    labels = np.asarray(labels)
    if labels.ndim == 2 and labels.shape != probs.shape:
        raise DimensionError(f"labels {labels.shape} do not match probs {probs.shape}")
    if labels.ndim == 1 and labels.shape[0] != probs.shape[0]:
        raise DimensionError(f"{labels.shape[0]} labels for {probs.shape[0]} rows")
    idx = _as_index_labels(labels, probs.shape[1])
    p = np.clip(probs[np.arange(len(idx)), idx], PROB_FLOOR, 1.0)
    return float(-np.mean(np.log(p.astype(np.float64))))


def loss_and_grads(model: Model, batch, labels, rng=None, training: bool = True):
    """Forward + backward pass. Returns ``(loss, probs, grads)`` with grads aligned to ``model.parameters()``."""
    probs, caches = model.forward_with_cache(batch, training=training, rng=rng)
    idx = _as_index_labels(labels, model.num_classes)
    loss = cross_entropy(probs, idx)
    n = probs.shape[0]
    # softmax + cross-entropy fused: d loss / d logits
    dy = probs.copy()
    dy[np.arange(n), idx] -= 1.0
    dy /= n
    per_layer: dict[str, dict[str, np.ndarray]] = {}
    for layer, cache in zip(reversed(model.layers[:-1]), reversed(caches[:-1])):
        dy, g = layer.backward(dy, cache)
        per_layer[layer.name] = g
    grads = [per_layer[name.rpartition("/")[0]][name.rpartition("/")[2]] for name, _, _ in model.parameters()]
    return loss, probs, grads


def backward(model: Model, batch, labels, rng=None) -> list[np.ndarray]:
    """Gradient of the mean cross-entropy w.r.t. every trainable tensor (train mode)."""
    return loss_and_grads(model, batch, labels, rng=rng)[2]


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0

    @classmethod
    def zeros_like(cls, params) -> "AdamState":
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params], 0)


def adam_step(params, grads, state: AdamState, config: TrainConfig):
    """One bias-corrected Adam update. Returns ``(new_params, state)``; inputs are left untouched."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise DimensionError("params, grads and Adam state are not aligned")
    b1, b2, eps, lr = config.adam_beta1, config.adam_beta2, config.adam_epsilon, config.learning_rate
    t = state.t + 1
    c1, c2 = 1.0 - b1**t, 1.0 - b2**t
    new_params, ms, vs = [], [], []
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * (g * g)
        step = lr * (m / c1) / (np.sqrt(v / c2) + eps)
        new_params.append((p - step).astype(p.dtype))
        ms.append(m.astype(p.dtype))
        vs.append(v.astype(p.dtype))
    return new_params, AdamState(ms, vs, t)


def sample_augment_params(n: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Per-image ``(flip, angle_deg)``: flip with p=0.5, angle uniform on [-10, 10]."""
    flips = rng.random(n) < 0.5
    angles = rng.uniform(-MAX_ROTATION_DEG, MAX_ROTATION_DEG, n)
    return flips, angles


def augment(batch: np.ndarray, rng: np.random.Generator | None = None, flip=None, angle=None) -> np.ndarray:
    """Random horizontal flip and rotation about the image centre.

    ``flip``/``angle`` override the random draws (one entry per image). Rotation
    uses nearest-neighbour sampling and fills uncovered pixels with zero.
    """
    if batch.ndim != 4:
        raise DimensionError(f"augment expects an NHWC batch, got {batch.shape}")
    n = batch.shape[0]
    if flip is None or angle is None:
        if rng is None:
            raise ValueError("augment needs an rng unless flip and angle are both given")
        f, a = sample_augment_params(n, rng)
        flip = f if flip is None else flip
        angle = a if angle is None else angle
    flip = np.broadcast_to(np.asarray(flip, dtype=bool), (n,))
    angle = np.broadcast_to(np.asarray(angle, dtype=np.float64), (n,))
    out = np.empty_like(batch)
    for i in range(n):
        img = batch[i, :, ::-1, :] if flip[i] else batch[i]
        if angle[i] != 0.0:
            img = ndimage.rotate(img, angle[i], axes=(1, 0), reshape=False, order=0, mode="constant", cval=0.0)
        out[i] = img
    return out


class Constraint(Protocol):
    def project(self, names: list[str], grads: list[np.ndarray]) -> list[np.ndarray]: ...

    def apply(self, model: Model) -> None: ...


def _arrays(ds):
    if isinstance(ds, tuple):
        return np.asarray(ds[0]), np.asarray(ds[1])
    return ds.images, ds.labels


def evaluate_arrays(model: Model, images: np.ndarray, labels: np.ndarray, batch_size: int = 256) -> tuple[float, float]:
    """Infer-mode ``(accuracy, mean cross-entropy)``."""
    correct, loss_sum = 0, 0.0
    for s in range(0, len(images), batch_size):
        probs = model.forward(images[s : s + batch_size])
        y = labels[s : s + batch_size]
        correct += int((probs.argmax(axis=1) == y).sum())
        loss_sum += cross_entropy(probs, y) * len(y)
    return correct / len(images), loss_sum / len(images)


def _snapshot(model: Model) -> dict[str, np.ndarray]:
    return {name: arr.copy() for name, arr in model.named_tensors()}


def _restore(model: Model, snap: dict[str, np.ndarray]) -> None:
    for name, arr in snap.items():
        model.set_tensor(name, arr)


def fit(model: Model, train_set, val_set, config: TrainConfig, constraint: Constraint | None = None):
    """Train a copy of ``model``; return it with the best-validation-accuracy weights, plus the log.

    ``train_set``/``val_set`` are datasets with ``images``/``labels`` or
    ``(images, labels)`` tuples.
    """
    x_train, y_train = _arrays(train_set)
    x_val, y_val = _arrays(val_set)
    if len(x_train) == 0 or len(x_val) == 0:
        raise ParameterError("training and validation sets must be non-empty")
    if y_train.max() >= model.num_classes or y_val.max() >= model.num_classes:
        raise ParameterError(f"label index out of range for {model.num_classes} classes")

    model = model.copy()
    names = [name for name, _, _ in model.parameters()]
    state = AdamState.zeros_like([p for _, p, _ in model.parameters()])
    shuffle_rng = make_rng(config.seed, "shuffle")
    aug_rng = make_rng(config.seed, "augment")
    drop_rng = make_rng(config.seed, "dropout")
    if constraint is not None:
        constraint.apply(model)

    history = TrainLog()
    best_acc, best_state = -1.0, None
    n = len(x_train)
    for epoch in range(1, config.epochs + 1):
        order = shuffle_rng.permutation(n)
        seen, correct, loss_sum = 0, 0, 0.0
        for b, s in enumerate(range(0, n, config.batch_size), start=1):
            idx = order[s : s + config.batch_size]
            xb, yb = x_train[idx], y_train[idx]
            if config.augment:
                xb = augment(xb, aug_rng)
            loss, probs, grads = loss_and_grads(model, xb, yb, rng=drop_rng)
            if not math.isfinite(loss):
                raise TrainingError(f"non-finite loss {loss} at epoch {epoch}, batch {b}")
            if constraint is not None:
                grads = constraint.project(names, grads)
            params = [p for _, p, _ in model.parameters()]
            new_params, state = adam_step(params, grads, state, config)
            for name, p in zip(names, new_params):
                model.set_tensor(name, p)
            if constraint is not None:
                constraint.apply(model)
            seen += len(idx)
            correct += int((probs.argmax(axis=1) == yb).sum())
            loss_sum += loss * len(idx)
        val_acc, val_loss = evaluate_arrays(model, x_val, y_val)
        rec = EpochRecord(epoch, correct / seen, loss_sum / seen, val_acc, val_loss)
        history.records.append(rec)
        log.info("epoch %d: train_acc=%.4f train_loss=%.4f val_acc=%.4f val_loss=%.4f", *vars(rec).values())
        if val_acc > best_acc:
            best_acc, best_state = val_acc, _snapshot(model)
    _restore(model, best_state)
    return model, history
