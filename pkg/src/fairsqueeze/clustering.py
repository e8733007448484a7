"""Weight clustering: per-tensor 1-D k-means, centroid tables with pull indices,
and fine-tuning under the weight-sharing constraint."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .errors import IntegrityError, ParameterError
from .network import Model
from .tensor import make_rng
from .trainer import TrainConfig, fit

log = logging.getLogger(__name__)

MAX_CLUSTERS = 256
MAX_ITER = 50


@dataclass
class Codebook:
    """Centroid table plus one pull index per weight."""

    centroids: np.ndarray  # float32, shape (k,)
    indices: np.ndarray  # uint8, same shape as the tensor

    def reconstruct(self) -> np.ndarray:
        return self.centroids[self.indices]

    @property
    def n_clusters(self) -> int:
        return len(self.centroids)


@dataclass
class ClusteredWeights:
    codebooks: dict[str, Codebook]

    def __getitem__(self, name: str) -> Codebook:
        return self.codebooks[name]

    def __contains__(self, name: str) -> bool:
        return name in self.codebooks

    def __iter__(self):
        return iter(self.codebooks)

    def items(self):
        return self.codebooks.items()


def _assign(values: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    # centroids sorted ascending; a value on a midpoint goes to the lower cluster
    mids = (centroids[1:] + centroids[:-1]) / 2.0
    return np.searchsorted(mids, values, side="left")


def _sse(values, labels, centroids) -> float:
    return float(((values - centroids[labels]) ** 2).sum())


def _kmeanspp_init(v: np.ndarray, n: int, rng: np.random.Generator) -> np.ndarray:
    c = [v[rng.integers(len(v))]]
    d2 = (v - c[0]) ** 2
    for _ in range(1, n):
        total = d2.sum()
        pick = rng.choice(len(v), p=d2 / total) if total > 0 else rng.integers(len(v))
        c.append(v[pick])
        d2 = np.minimum(d2, (v - v[pick]) ** 2)
    return np.sort(np.asarray(c))


def kmeans_1d(
    values: np.ndarray,
    n_clusters: int,
    init: str = "linear",
    rng: np.random.Generator | None = None,
    max_iter: int = MAX_ITER,
) -> tuple[np.ndarray, np.ndarray]:
    """Lloyd's algorithm on scalars. Returns ``(centroids ascending, labels)``.

    With at most ``n_clusters`` distinct values every value becomes its own
    centroid (zero error). Otherwise centroids start evenly spaced between
    min and max (or k-means++), and the loop stops once assignments repeat or
    after ``max_iter`` rounds. An empty cluster is re-seeded at the value
    farthest from its current centroid.
    """
    v = np.asarray(values, dtype=np.float64).ravel()
    uniq = np.unique(v)
    if len(uniq) <= n_clusters:
        return uniq, np.searchsorted(uniq, v)
    if init == "linear":
        c = np.linspace(v.min(), v.max(), n_clusters)
    elif init == "kmeans++":
        c = _kmeanspp_init(v, n_clusters, rng if rng is not None else make_rng(0, "kmeans++"))
    else:
        raise ParameterError(f"unknown centroid init {init!r}")
    labels = _assign(v, c)
    for _ in range(max_iter):
        c = _update(v, labels, c)
        new = _assign(v, c)
        if np.array_equal(new, labels):
            break
        labels = new
    return _update(v, labels, c, reseed=False), labels


def _update(v, labels, c, reseed=True):
    n = len(c)
    counts = np.bincount(labels, minlength=n)
    sums = np.bincount(labels, weights=v, minlength=n)
    c = c.copy()
    full = counts > 0
    c[full] = sums[full] / counts[full]
    if reseed and not full.all():
        d = (v - c[labels]) ** 2
        for j in np.flatnonzero(~full):
            far = int(np.argmax(d))
            c[j] = v[far]
            d[far] = 0.0
        c = np.sort(c)
    return c


def cluster_tensor(w: np.ndarray, n_clusters: int, init: str = "linear", rng=None) -> Codebook:
    centroids, labels = kmeans_1d(w, n_clusters, init=init, rng=rng)
    return Codebook(centroids.astype(np.float32), labels.astype(np.uint8).reshape(w.shape))


def clusterable(model: Model, scope: str = "kernels") -> list[str]:
    if scope == "kernels":
        return [name for name, _, prunable in model.parameters() if prunable]
    if scope == "all":
        return [name for name, _, _ in model.parameters()]
    raise ParameterError(f"unknown clustering scope {scope!r}")


def cluster(
    model: Model, n_clusters: int, init: str = "linear", scope: str = "kernels", seed: int = 0
) -> tuple[Model, ClusteredWeights]:
    """Replace each clusterable tensor by its k-means reconstruction.

    ``scope="kernels"`` clusters Conv2D/Dense kernels only; ``"all"`` also
    clusters biases and BatchNorm scale/shift.
    """
    if not 2 <= n_clusters <= MAX_CLUSTERS:
        raise ParameterError(f"n_clusters must lie in [2, {MAX_CLUSTERS}], got {n_clusters}")
    out = model.copy()
    books = {}
    for name in clusterable(model, scope):
        w = model.get_tensor(name)
        book = cluster_tensor(w, n_clusters, init=init, rng=make_rng(seed, "cluster", name))
        books[name] = book
        out.set_tensor(name, book.reconstruct())
    return out, ClusteredWeights(books)


def centroid_gradients(book: Codebook, grad: np.ndarray) -> np.ndarray:
    """Each centroid's gradient: the sum of the gradients of the weights that pull it."""
    return np.bincount(book.indices.ravel(), weights=np.asarray(grad, dtype=np.float64).ravel(), minlength=book.n_clusters)


class SharingConstraint:
    """Ties clustered weights together during training.

    Every weight receives the summed gradient of its cluster. Tied weights
    start equal and share Adam moments elementwise, so the update is exactly
    Adam on the centroid itself; ``apply`` re-reads the centroids and rewrites
    the tensors from them.
    """

    def __init__(self, cw: ClusteredWeights):
        self.cw = cw

    def project(self, names, grads):
        out = []
        for name, g in zip(names, grads):
            if name in self.cw:
                book = self.cw[name]
                out.append(centroid_gradients(book, g)[book.indices].astype(g.dtype))
            else:
                out.append(g)
        return out

    def apply(self, model: Model) -> None:
        books = {}
        for name, book in self.cw.items():
            w = model.get_tensor(name).ravel()
            idx = book.indices.ravel()
            centroids = book.centroids.copy()
            # first member of each non-empty cluster carries the shared value
            present, first = np.unique(idx, return_index=True)
            centroids[present] = w[first]
            books[name] = Codebook(centroids.astype(np.float32), book.indices)
            model.set_tensor(name, books[name].reconstruct())
        self.cw = ClusteredWeights(books)


def check_codebooks(model: Model, cw: ClusteredWeights) -> None:
    for name, book in cw.items():
        w = model.get_tensor(name)
        if book.indices.shape != w.shape:
            raise IntegrityError(f"{name}: index shape {book.indices.shape} does not match tensor {w.shape}")
        if book.indices.max(initial=0) >= book.n_clusters:
            raise IntegrityError(f"{name}: pull index out of range")
        if not np.array_equal(book.reconstruct(), w):
            raise IntegrityError(f"{name}: weights differ from their centroid reconstruction")


def finetune_clustered(
    model: Model, cw: ClusteredWeights, train_set, val_set, config: TrainConfig
) -> tuple[Model, ClusteredWeights]:
    """Fine-tune with frozen assignments; only the centroid values move."""
    check_codebooks(model, cw)
    constraint = SharingConstraint(cw)
    tuned, history = fit(model, train_set, val_set, config, constraint=constraint)
    log.info("clustered fine-tune: best val_acc=%.4f at epoch %d", history.best_val_accuracy, history.best_epoch)
    # fit restores the best epoch's weights, so rebuild the codebooks from them
    final = SharingConstraint(cw)
    final.apply(tuned)
    return tuned, final.cw


def distinct_counts(model: Model, names) -> dict[str, int]:
    return {name: len(np.unique(model.get_tensor(name))) for name in names}
