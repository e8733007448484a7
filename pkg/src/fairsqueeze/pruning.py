"""Magnitude pruning at constant sparsity and mask-preserving fine-tuning."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from .errors import IntegrityError, ParameterError
from .network import Model
from .trainer import TrainConfig, fit

log = logging.getLogger(__name__)


@dataclass
class PruneMask:
    """Boolean keep-masks (True = kept) for each prunable tensor, in ``parameters()`` order."""

    masks: dict[str, np.ndarray]

    @property
    def total(self) -> int:
        return sum(m.size for m in self.masks.values())

    @property
    def n_pruned(self) -> int:
        return sum(int((~m).sum()) for m in self.masks.values())

    @property
    def sparsity(self) -> float:
        return self.n_pruned / self.total if self.total else 0.0


def _check_sparsity(sparsity: float) -> None:
    if not 0.0 <= sparsity < 1.0:
        raise ParameterError(f"sparsity must lie in [0, 1), got {sparsity}")


def n_to_prune(sparsity: float, n: int) -> int:
    # guard against 0.7 * 1000 == 699.999...
    return min(n, int(math.floor(sparsity * n + 1e-9)))


def magnitude_order(arrays: list[np.ndarray]) -> np.ndarray:
    """Flat positions sorted by |w|; ties keep tensor order, then flat index."""
    flat = np.concatenate([np.abs(a).ravel() for a in arrays]) if arrays else np.zeros(0)
    return np.argsort(flat, kind="stable")


def prune(model: Model, sparsity: float, per_layer: bool = False) -> tuple[Model, PruneMask]:
    """Zero the ``floor(sparsity * N)`` smallest-magnitude prunable weights.

    Ranking is global over every prunable tensor unless ``per_layer`` is set,
    in which case each tensor loses ``floor(sparsity * size)`` of its own weights.
    Biases and BatchNorm parameters are never touched.
    """
    _check_sparsity(sparsity)
    targets = [(name, arr) for name, arr, prunable in model.parameters() if prunable]
    if not targets:
        raise ParameterError("model has no prunable tensors")
    out = model.copy()
    masks: dict[str, np.ndarray] = {}
    if per_layer:
        for name, arr in targets:
            keep = np.ones(arr.size, dtype=bool)
            keep[magnitude_order([arr])[: n_to_prune(sparsity, arr.size)]] = False
            masks[name] = keep.reshape(arr.shape)
    else:
        sizes = [arr.size for _, arr in targets]
        keep = np.ones(sum(sizes), dtype=bool)
        keep[magnitude_order([a for _, a in targets])[: n_to_prune(sparsity, keep.size)]] = False
        for (name, arr), chunk in zip(targets, np.split(keep, np.cumsum(sizes)[:-1])):
            masks[name] = chunk.reshape(arr.shape)
    for name, keep in masks.items():
        w = out.get_tensor(name)
        out.set_tensor(name, np.where(keep, w, 0).astype(w.dtype))
    return out, PruneMask(masks)


class MaskConstraint:
    """Keeps pruned positions at exactly zero during training."""

    def __init__(self, mask: PruneMask):
        self.mask = mask

    def project(self, names, grads):
        return [g * self.mask.masks[n] if n in self.mask.masks else g for n, g in zip(names, grads)]

    def apply(self, model: Model) -> None:
        for name, keep in self.mask.masks.items():
            w = model.get_tensor(name)
            model.set_tensor(name, np.where(keep, w, 0).astype(w.dtype))


def check_mask(model: Model, mask: PruneMask) -> None:
    for name, keep in mask.masks.items():
        w = model.get_tensor(name)
        if w.shape != keep.shape:
            raise IntegrityError(f"{name}: mask shape {keep.shape} does not match tensor {w.shape}")
        if np.any(w[~keep] != 0):
            raise IntegrityError(f"{name}: pruned positions hold non-zero weights")


def finetune_pruned(model: Model, mask: PruneMask, train_set, val_set, config: TrainConfig) -> Model:
    """Short fit (``config.epochs``, 2 by convention) with masked gradients; sparsity is preserved exactly."""
    check_mask(model, mask)
    tuned, history = fit(model, train_set, val_set, config, constraint=MaskConstraint(mask))
    log.info("pruned fine-tune: best val_acc=%.4f at epoch %d", history.best_val_accuracy, history.best_epoch)
    return tuned


def prunable_zero_fraction(model: Model) -> float:
    arrays = [a for _, a, p in model.parameters() if p]
    return sum(int((a == 0).sum()) for a in arrays) / sum(a.size for a in arrays)
