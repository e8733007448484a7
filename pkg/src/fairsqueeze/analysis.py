"""Weight histograms, the magnitude gap that pruning opens, and tradeoff tables."""
from __future__ import annotations

import csv
import math
from collections.abc import Sequence
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ParameterError
from .pruning import n_to_prune

DEFAULT_BINS = 101


@dataclass
class Histogram:
    name: str
    bin_edges: np.ndarray
    counts: np.ndarray

    def rows(self):
        for lo, hi, c in zip(self.bin_edges[:-1], self.bin_edges[1:], self.counts):
            yield float(lo), float(hi), int(c)


def histogram(values: np.ndarray, n_bins: int = DEFAULT_BINS, symmetric: bool = False, name: str = "") -> Histogram:
    """Equal-width bins over [min, max] (or [-m, m] with ``m = max|w|`` when symmetric).

    The last bin is closed on the right. A constant tensor gets a unit-width
    range around its value so every element lands in one bin.
    """
    if n_bins < 1:
        raise ParameterError(f"n_bins must be positive, got {n_bins}")
    v = np.asarray(values, dtype=np.float64).ravel()
    if v.size == 0:
        raise ParameterError("cannot histogram an empty tensor")
    if symmetric:
        m = float(np.abs(v).max())
        lo, hi = -m, m
    else:
        lo, hi = float(v.min()), float(v.max())
    if lo == hi:
        lo, hi = lo - 0.5, hi + 0.5
    counts, edges = np.histogram(v, bins=n_bins, range=(lo, hi))
    return Histogram(name, edges, counts.astype(np.int64))


def weight_histogram(model, layer: str, n_bins: int = DEFAULT_BINS, symmetric: bool = False) -> Histogram:
    """Histogram of a layer's kernel. ``layer`` is a layer name or a ``layer/key`` tensor name."""
    name = layer if "/" in layer else f"{layer}/kernel"
    return histogram(model.get_tensor(name), n_bins, symmetric, name)


def write_histogram_csv(hist: Histogram, path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["bin_left", "bin_right", "count"])
        for lo, hi, c in hist.rows():
            w.writerow([repr(lo), repr(hi), c])


@dataclass(frozen=True)
class GapStats:
    sparsity: float
    n_pruned: int
    n_total: int
    threshold: float
    removed_mass: float
    total_mass: float

    @property
    def removed_fraction(self) -> float:
        return self.removed_mass / self.total_mass if self.total_mass > 0 else 0.0

    def as_dict(self) -> dict[str, float]:
        return {
            "sparsity": self.sparsity,
            "n_pruned": self.n_pruned,
            "n_total": self.n_total,
            "threshold": self.threshold,
            "removed_mass": self.removed_mass,
            "total_mass": self.total_mass,
            "removed_fraction": self.removed_fraction,
        }


def _magnitudes(model_or_values) -> np.ndarray:
    if isinstance(model_or_values, np.ndarray):
        return np.abs(model_or_values.astype(np.float64).ravel())
    parts = [np.abs(arr.astype(np.float64).ravel()) for _, arr, prunable in model_or_values.parameters() if prunable]
    return np.concatenate(parts) if parts else np.zeros(0)


def pruning_gap_stats(model_or_values, sparsity: float) -> GapStats:
    """Magnitude threshold and weight mass removed by global magnitude pruning.

    ``threshold`` is the largest pruned magnitude (the order statistic at
    rank ``floor(sN)``, 1-based); 0 when nothing is pruned.
    ``removed_mass`` is the pre-pruning ``sum |w|`` of the pruned weights.
    """
    if not 0.0 <= sparsity < 1.0 or math.isnan(sparsity):
        raise ParameterError(f"sparsity must lie in [0, 1), got {sparsity}")
    mags = _magnitudes(model_or_values)
    k = n_to_prune(sparsity, len(mags))
    ordered = np.sort(mags, kind="stable")
    threshold = float(ordered[k - 1]) if k > 0 else 0.0
    return GapStats(sparsity, k, len(mags), threshold, float(ordered[:k].sum()), float(mags.sum()))


def tradeoff_table(reports: Sequence, sweep_key: str | None = None) -> list[dict[str, object]]:
    """One row per report, ordered by the sweep parameter stored in ``report.params``."""
    if not reports:
        raise ParameterError("tradeoff_table needs at least one report")
    ordered = list(reports)
    if sweep_key is not None:
        ordered.sort(key=lambda r: float(r.params.get(sweep_key, 0.0)))
    rows = []
    for r in ordered:
        row = r.row()
        if sweep_key is not None:
            row[sweep_key] = r.params.get(sweep_key, "")
        rows.append(row)
    return rows


def write_rows_csv(rows: Sequence[dict], path: str | Path) -> None:
    header: list[str] = []
    for row in rows:
        header += [k for k in row if k not in header]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=header)
        w.writeheader()
        for row in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
