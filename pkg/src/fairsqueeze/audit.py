"""Overall and per-group accuracy, accuracy gaps, and report rows laid out like
the result tables (size, overall accuracy, one column per group)."""
from __future__ import annotations

import csv
import json
import warnings
from collections.abc import Sequence
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import GroupedDataset
from .errors import DimensionError, ParameterError
from .store import load, measure_size

GROUP_LABELS = {"f": "Female", "female": "Female", "m": "Male", "male": "Male"}


@dataclass(frozen=True)
class GroupAccuracy:
    attribute: str
    group: str
    n_correct: int
    n_total: int

    def __post_init__(self):
        if self.n_total <= 0 or not 0 <= self.n_correct <= self.n_total:
            raise ParameterError(f"invalid counts {self.n_correct}/{self.n_total} for group {self.group!r}")

    @property
    def accuracy(self) -> float:
        return self.n_correct / self.n_total


def evaluate(model, dataset: GroupedDataset, batch_size: int = 256) -> np.ndarray:
    """Argmax class per sample; ties resolve to the lowest class index."""
    if tuple(dataset.images.shape[1:]) != tuple(model.input_shape):
        raise DimensionError(f"dataset images {dataset.images.shape[1:]} do not match model input {model.input_shape}")
    preds = [model.forward(dataset.images[s : s + batch_size]).argmax(axis=1) for s in range(0, len(dataset), batch_size)]
    return np.concatenate(preds) if preds else np.zeros(0, dtype=np.int64)


def group_accuracies(
    predictions: np.ndarray, dataset: GroupedDataset, attribute: str, groups: Sequence[str] | None = None
) -> list[GroupAccuracy]:
    """Accuracy within each group of ``attribute``. Listed groups with no samples are skipped with a warning."""
    if attribute not in dataset.attributes:
        raise KeyError(f"attribute {attribute!r} not in dataset schema {list(dataset.attributes)}")
    col = dataset.attributes[attribute]
    correct = np.asarray(predictions) == dataset.labels
    out = []
    for g in groups if groups is not None else sorted(set(col.tolist())):
        sel = col == g
        n = int(sel.sum())
        if n == 0:
            warnings.warn(f"group {g!r} of {attribute!r} has no samples; omitted", stacklevel=2)
            continue
        out.append(GroupAccuracy(attribute, str(g), int(correct[sel].sum()), n))
    return out


def gap(accs: Sequence[GroupAccuracy | float]) -> float:
    """Largest minus smallest group accuracy (``|a - b|`` for two groups)."""
    values = [a.accuracy if isinstance(a, GroupAccuracy) else float(a) for a in accs]
    if len(values) < 2:
        raise ParameterError("a gap needs at least two groups")
    return max(values) - min(values)


def group_label(group: str) -> str:
    return GROUP_LABELS.get(group.lower(), group[:1].upper() + group[1:])


@dataclass
class FairnessReport:
    model_id: str
    size_bytes: int | None
    n_correct: int
    n_total: int
    groups: dict[str, list[GroupAccuracy]]
    params: dict[str, float] = field(default_factory=dict)

    @property
    def overall_accuracy(self) -> float:
        return self.n_correct / self.n_total

    @property
    def gaps(self) -> dict[str, float]:
        return {attr: gap(accs) for attr, accs in self.groups.items() if len(accs) >= 2}

    def columns(self) -> list[str]:
        cols = ["Model", "Size (MB)", "Overall acc."]
        labels = [group_label(a.group) for accs in self.groups.values() for a in accs]
        for attr, accs in self.groups.items():
            for a in accs:
                label = group_label(a.group)
                cols.append(f"{label} acc." if labels.count(label) == 1 else f"{attr}:{label} acc.")
        cols += [f"{group_label(attr)} gap" for attr in self.gaps]
        return cols

    def row(self) -> dict[str, object]:
        """CSV row; accuracies and gaps in percent at full float precision."""
        values: list[object] = [
            self.model_id,
            "" if self.size_bytes is None else self.size_bytes / 1e6,
            100.0 * self.overall_accuracy,
        ]
        values += [100.0 * a.accuracy for accs in self.groups.values() for a in accs]
        values += [100.0 * g for g in self.gaps.values()]
        return dict(zip(self.columns(), values))

    def to_dict(self) -> dict:
        return {
            "model": self.model_id,
            "size_bytes": self.size_bytes,
            "size_mb": None if self.size_bytes is None else self.size_bytes / 1e6,
            "overall": {"n_correct": self.n_correct, "n_total": self.n_total, "accuracy": self.overall_accuracy},
            "attributes": {
                attr: {
                    "groups": [
                        {"group": a.group, "n_correct": a.n_correct, "n_total": a.n_total, "accuracy": a.accuracy}
                        for a in accs
                    ],
                    "gap": self.gaps.get(attr),
                }
                for attr, accs in self.groups.items()
            },
            "params": dict(self.params),
        }


def report_from_predictions(
    model_id: str,
    predictions: np.ndarray,
    dataset: GroupedDataset,
    attributes: Sequence[str],
    size_bytes: int | None = None,
    params: dict | None = None,
) -> FairnessReport:
    correct = np.asarray(predictions) == dataset.labels
    groups = {attr: group_accuracies(predictions, dataset, attr) for attr in attributes}
    return FairnessReport(model_id, size_bytes, int(correct.sum()), len(dataset), groups, dict(params or {}))


def build_report(
    model_path: str | Path, dataset: GroupedDataset, attributes: Sequence[str], model_id: str | None = None
) -> FairnessReport:
    """Load, size and evaluate one model file into a report row."""
    if len(dataset) == 0:
        raise ParameterError("cannot audit on an empty dataset")
    model = load(model_path)
    meta = model.metadata
    size = measure_size(model_path)
    preds = evaluate(model, dataset)
    label = model_id or meta.get("label") or Path(model_path).stem
    return report_from_predictions(label, preds, dataset, attributes, size.deflated_bytes, meta.get("params"))


def write_csv(reports: Sequence[FairnessReport], path: str | Path, extra_columns: Sequence[str] = ()) -> None:
    rows = [r.row() for r in reports]
    header: list[str] = []
    for r in reports:
        for c in r.columns():
            if c not in header:
                header.append(c)
    header += [c for c in extra_columns if c not in header]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=header)
        w.writeheader()
        for report, row in zip(reports, rows):
            for c in extra_columns:
                row.setdefault(c, report.params.get(c, ""))
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})


def write_json(reports: Sequence[FairnessReport], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump([r.to_dict() for r in reports], fh, indent=2, sort_keys=True)
        fh.write("\n")
