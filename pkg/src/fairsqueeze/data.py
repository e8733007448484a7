"""Grouped image datasets: manifest loading, preprocessing, subject-disjoint
splits, and a synthetic generator with controllable per-group difficulty.

Manifest CSV (UTF-8)::

    path,label,subject_id,attr:gender,attr:race,...
    img/0001.png,happy,S005,f,asian

``path`` is relative to the image root (default: the manifest's directory).
``label`` is a class name or a non-negative integer class index. Every
``attr:<name>`` column becomes a sensitive attribute. Images are PNG, 8-bit
gray or RGB, and are expected to be face-cropped already.
"""
from __future__ import annotations

import csv
import math
from collections import Counter
from collections.abc import Mapping
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import LoadError, ParameterError, SplitError
from .tensor import make_rng

LUMA = np.array([0.299, 0.587, 0.114])
ATTR_PREFIX = "attr:"


@dataclass
class Sample:
    image: np.ndarray
    label: int
    subject_id: str
    attributes: dict[str, str]


@dataclass
class GroupedDataset:
    """Column-wise sample storage: stacked NHWC images plus per-sample labels and attributes."""

    images: np.ndarray
    labels: np.ndarray
    subject_ids: np.ndarray
    attributes: dict[str, np.ndarray]
    class_names: list[str] = field(default_factory=list)

    def __post_init__(self):
        n = len(self.labels)
        if len(self.images) != n or len(self.subject_ids) != n:
            raise ValueError("images, labels and subject_ids must have the same length")
        for name, col in self.attributes.items():
            if len(col) != n:
                raise ValueError(f"attribute {name!r} has {len(col)} entries for {n} samples")

    def __len__(self) -> int:
        return len(self.labels)

    def __getitem__(self, i: int) -> Sample:
        return Sample(
            self.images[i],
            int(self.labels[i]),
            str(self.subject_ids[i]),
            {k: str(v[i]) for k, v in self.attributes.items()},
        )

    @property
    def schema(self) -> dict[str, list[str]]:
        """Attribute name -> sorted list of observed groups."""
        return {k: sorted(set(v.tolist())) for k, v in self.attributes.items()}

    def group_counts(self, attribute: str) -> dict[str, int]:
        return dict(sorted(Counter(self.attributes[attribute].tolist()).items()))

    def subset(self, idx) -> "GroupedDataset":
        idx = np.asarray(idx, dtype=np.int64)
        return GroupedDataset(
            self.images[idx],
            self.labels[idx],
            self.subject_ids[idx],
            {k: v[idx] for k, v in self.attributes.items()},
            list(self.class_names),
        )


def _to_float(image) -> np.ndarray:
    arr = np.asarray(image)
    if arr.dtype == np.uint8:
        arr = arr.astype(np.float64) / 255.0
    else:
        arr = arr.astype(np.float64)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if arr.ndim != 3 or 0 in arr.shape:
        raise LoadError(f"cannot preprocess an image of shape {np.shape(image)}")
    return arr


def _resize_axis(arr: np.ndarray, out: int, axis: int) -> np.ndarray:
    n = arr.shape[axis]
    if n == out:
        return arr
    # half-pixel centres, edges clamped
    src = (np.arange(out) + 0.5) * (n / out) - 0.5
    src = np.clip(src, 0, n - 1)
    i0 = np.floor(src).astype(np.int64)
    i1 = np.minimum(i0 + 1, n - 1)
    frac = src - i0
    shape = [1] * arr.ndim
    shape[axis] = out
    frac = frac.reshape(shape)
    return np.take(arr, i0, axis=axis) * (1 - frac) + np.take(arr, i1, axis=axis) * frac


def resize_bilinear(image: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    """Bilinear resize of an H x W x C float image to ``size = (height, width)``."""
    return _resize_axis(_resize_axis(image, size[0], 0), size[1], 1)


def preprocess(image, size: tuple[int, int] | int | None = None, grayscale: bool = False, channels: int | None = None) -> np.ndarray:
    """Scale to [0, 1], optionally convert to luminance, and resize bilinearly.

    Returns float32 H x W x C. ``channels=3`` replicates a gray image to RGB.
    """
    arr = _to_float(image)
    if grayscale and arr.shape[2] >= 3:
        arr = (arr[:, :, :3] @ LUMA)[:, :, None]
    elif grayscale and arr.shape[2] == 2:
        arr = arr[:, :, :1]
    if size is not None:
        if isinstance(size, int):
            size = (size, size)
        arr = resize_bilinear(arr, tuple(size))
    if channels == 3 and arr.shape[2] == 1:
        arr = np.repeat(arr, 3, axis=2)
    return np.clip(arr, 0.0, 1.0).astype(np.float32)


def read_image(path: str | Path) -> np.ndarray:
    with Image.open(path) as img:
        if img.mode not in ("L", "RGB"):
            img = img.convert("RGB")
        return np.asarray(img)


def load_manifest(
    csv_path: str | Path,
    image_root: str | Path | None = None,
    size: tuple[int, int] | int | None = None,
    grayscale: bool = False,
    channels: int | None = None,
    class_names: list[str] | None = None,
) -> GroupedDataset:
    """Read a manifest CSV into a :class:`GroupedDataset`; errors name the offending row."""
    csv_path = Path(csv_path)
    root = Path(image_root) if image_root is not None else csv_path.parent
    with open(csv_path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        missing = {"path", "label", "subject_id"} - set(header)
        if missing:
            raise LoadError(f"{csv_path}: header lacks column(s) {sorted(missing)}")
        attr_cols = [h for h in header if h.startswith(ATTR_PREFIX)]
        rows = list(reader)

    raw_labels = [r["label"] for r in rows]
    names, lookup = _label_table(raw_labels, class_names)
    images, labels, subjects = [], [], []
    attrs: dict[str, list[str]] = {c[len(ATTR_PREFIX):]: [] for c in attr_cols}
    for i, row in enumerate(rows, start=1):
        where = f"{csv_path}: row {i}"
        label = row["label"].strip()
        if label not in lookup:
            raise LoadError(f"{where}: unknown label {label!r}")
        for col in attr_cols:
            value = (row.get(col) or "").strip()
            if not value:
                raise LoadError(f"{where}: missing value for attribute {col[len(ATTR_PREFIX):]!r}")
            attrs[col[len(ATTR_PREFIX):]].append(value)
        img_path = root / row["path"]
        if not img_path.is_file():
            raise LoadError(f"{where}: image file {img_path} not found")
        try:
            images.append(preprocess(read_image(img_path), size=size, grayscale=grayscale, channels=channels))
        except (OSError, LoadError) as exc:
            raise LoadError(f"{where}: {exc}") from None
        labels.append(lookup[label])
        subjects.append(row["subject_id"].strip())

    if images:
        shapes = {im.shape for im in images}
        if len(shapes) > 1:
            raise LoadError(f"{csv_path}: images differ in shape {sorted(shapes)}; pass a target size")
        stacked = np.stack(images)
    else:
        hw = (size, size) if isinstance(size, int) else tuple(size or (0, 0))
        stacked = np.zeros((0, *hw, 1 if grayscale else (channels or 1)), dtype=np.float32)
    return GroupedDataset(
        stacked,
        np.asarray(labels, dtype=np.int64),
        np.asarray(subjects, dtype=object),
        {k: np.asarray(v, dtype=object) for k, v in attrs.items()},
        names,
    )


def _label_table(raw: list[str], class_names: list[str] | None):
    if class_names is not None:
        lookup = {name: i for i, name in enumerate(class_names)}
        lookup.update({str(i): i for i in range(len(class_names))})
        return list(class_names), lookup
    values = [r.strip() for r in raw]
    if all(v.isdigit() for v in values):
        k = max((int(v) for v in values), default=-1) + 1
        names = [str(i) for i in range(k)]
        return names, {n: i for i, n in enumerate(names)}
    names = sorted(set(values))
    return names, {n: i for i, n in enumerate(names)}


def split_by_subject(dataset: GroupedDataset, test_fraction: float, seed: int = 0) -> tuple[GroupedDataset, GroupedDataset]:
    """Subject-disjoint train/test split with ``round(test_fraction * n_subjects)`` test subjects."""
    if not 0.0 <= test_fraction <= 1.0:
        raise SplitError(f"test_fraction must lie in [0, 1], got {test_fraction}")
    subjects = sorted(set(dataset.subject_ids.tolist()))
    n = len(subjects)
    n_test = int(math.floor(test_fraction * n + 0.5))
    if 0.0 < test_fraction < 1.0:
        if n < 2:
            raise SplitError("cannot split fewer than two subjects into non-empty train and test sets")
        n_test = min(max(n_test, 1), n - 1)
    order = make_rng(seed, "split").permutation(n)
    test_subjects = {subjects[i] for i in order[:n_test]}
    in_test = np.array([s in test_subjects for s in dataset.subject_ids.tolist()], dtype=bool)
    return dataset.subset(np.flatnonzero(~in_test)), dataset.subset(np.flatnonzero(in_test))


# --- synthetic data ---------------------------------------------------------

FOREGROUND, BACKGROUND = 0.85, 0.15


def class_templates(n_classes: int, size: tuple[int, int], seed: int = 0) -> np.ndarray:
    """Distinct geometric patterns, one per class, shape ``(n_classes, H, W)``.

    The first ten are fixed shapes (stripes, disc, ring, cross, ...); further
    classes get random left-right symmetric blobs.
    """
    h, w = size
    yy, xx = np.mgrid[0:h, 0:w]
    cy, cx = (h - 1) / 2, (w - 1) / 2
    r = np.hypot((yy - cy) / h, (xx - cx) / w)
    band = max(1, min(h, w) // 8)
    fixed = [
        (yy // band) % 2 == 0,
        (np.abs(xx - cx) // band) % 2 == 0,
        r < 0.25,
        (r > 0.22) & (r < 0.38),
        (np.abs(yy - cy) < band) | (np.abs(xx - cx) < band),
        (np.abs((yy - cy) - (xx - cx)) < band) | (np.abs((yy - cy) + (xx - cx)) < band),
        ((yy // (2 * band)) + (np.abs(xx - cx) // (2 * band))) % 2 == 0,
        yy < h / 2,
        (np.minimum(np.minimum(yy, h - 1 - yy), np.minimum(xx, w - 1 - xx)) < band),
        yy >= h / 2,
    ]
    out = []
    rng = make_rng(seed, "templates")
    for k in range(n_classes):
        if k < len(fixed):
            mask = fixed[k]
        else:
            half = rng.random((h, (w + 1) // 2)) < 0.5
            mask = np.concatenate([half, half[:, : w // 2][:, ::-1]], axis=1)
        out.append(np.where(mask, FOREGROUND, BACKGROUND))
    return np.asarray(out, dtype=np.float64)


@dataclass
class SyntheticSpec:
    n_samples: int
    n_classes: int
    attributes: dict[str, dict[str, float]] = field(default_factory=lambda: {"gender": {"f": 0.5, "m": 0.5}})
    difficulty: dict[str, dict[str, float]] = field(default_factory=dict)
    image_size: int | tuple[int, int] = 16
    channels: int = 1
    noise: float = 0.2
    samples_per_subject: int = 4
    seed: int = 0
    # kept apart from ``seed`` so train and test sets drawn with different
    # seeds share the same class patterns
    template_seed: int = 0


def allocate(n: int, proportions: Mapping[str, float]) -> dict[str, int]:
    """Largest-remainder quota allocation; counts sum to ``n`` exactly."""
    total = sum(proportions.values())
    if any(p < 0 for p in proportions.values()) or not math.isclose(total, 1.0, abs_tol=1e-9):
        raise ParameterError(f"group proportions must be non-negative and sum to 1, got {dict(proportions)} (sum {total})")
    exact = {g: n * p for g, p in proportions.items()}
    counts = {g: int(math.floor(x)) for g, x in exact.items()}
    short = n - sum(counts.values())
    for g in sorted(exact, key=lambda g: (-(exact[g] - counts[g]), list(proportions).index(g)))[:short]:
        counts[g] += 1
    return counts


def generate_synthetic(spec: SyntheticSpec) -> GroupedDataset:
    """Class templates plus Gaussian noise whose level depends on group membership.

    Noise std for a sample is ``spec.noise`` plus the difficulty offsets of
    each of its groups. Group sizes follow the proportions exactly, classes
    are balanced within each group cell, and each subject belongs to a single
    cell so subject-disjoint splits keep attributes consistent.
    """
    if spec.n_classes < 2 or spec.n_samples < 1:
        raise ParameterError("need at least one sample and two classes")
    size = (spec.image_size, spec.image_size) if isinstance(spec.image_size, int) else tuple(spec.image_size)
    rng = make_rng(spec.seed, "synthetic")
    n = spec.n_samples
    attr_names = list(spec.attributes)
    columns = {}
    for name in attr_names:
        counts = allocate(n, spec.attributes[name])
        col = np.asarray([g for g, c in counts.items() for _ in range(c)], dtype=object)
        columns[name] = col[rng.permutation(n)]
    for name, offsets in spec.difficulty.items():
        if name not in spec.attributes:
            raise ParameterError(f"difficulty given for unknown attribute {name!r}")
        unknown = set(offsets) - set(spec.attributes[name])
        if unknown:
            raise ParameterError(f"difficulty given for unknown group(s) {sorted(unknown)} of {name!r}")

    cells: dict[tuple, list[int]] = {}
    for i in range(n):
        cells.setdefault(tuple(columns[a][i] for a in attr_names), []).append(i)
    labels = np.zeros(n, dtype=np.int64)
    subjects = np.empty(n, dtype=object)
    next_subject = 0
    for key in sorted(cells):
        members = cells[key]
        start = int(rng.integers(spec.n_classes))
        for j, i in enumerate(members):
            labels[i] = (start + j) % spec.n_classes
        for j in range(0, len(members), spec.samples_per_subject):
            for i in members[j : j + spec.samples_per_subject]:
                subjects[i] = f"S{next_subject:04d}"
            next_subject += 1

    templates = class_templates(spec.n_classes, size, seed=spec.template_seed)
    sigma = np.full(n, float(spec.noise))
    for name, offsets in spec.difficulty.items():
        sigma += np.array([offsets.get(g, 0.0) for g in columns[name]])
    if np.any(sigma < 0):
        raise ParameterError("noise plus difficulty offsets must be non-negative")
    noise = rng.standard_normal((n, *size, spec.channels))
    images = templates[labels][..., None] + sigma[:, None, None, None] * noise
    return GroupedDataset(
        np.clip(images, 0.0, 1.0).astype(np.float32),
        labels,
        subjects,
        columns,
        [str(k) for k in range(spec.n_classes)],
    )


def write_dataset(dataset: GroupedDataset, out_dir: str | Path, manifest_name: str = "manifest.csv") -> Path:
    """Write 8-bit PNGs under ``out_dir/images`` and a manifest CSV; returns the manifest path."""
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    attr_names = list(dataset.attributes)
    manifest = out_dir / manifest_name
    width = max(6, len(str(len(dataset))))
    with open(manifest, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["path", "label", "subject_id", *(ATTR_PREFIX + a for a in attr_names)])
        for i in range(len(dataset)):
            rel = f"images/{i:0{width}d}.png"
            px = np.rint(dataset.images[i] * 255.0).astype(np.uint8)
            img = Image.fromarray(px[:, :, 0], "L") if px.shape[2] == 1 else Image.fromarray(px[:, :, :3], "RGB")
            img.save(out_dir / rel, format="PNG")
            name = dataset.class_names[dataset.labels[i]] if dataset.class_names else str(dataset.labels[i])
            w.writerow([rel, name, dataset.subject_ids[i], *(dataset.attributes[a][i] for a in attr_names)])
    return manifest
