"""Mini-batch k-means over context vectors and the assignment map it induces."""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .core import RandomStream


@dataclass(frozen=True, eq=False)
class ClusterModel:
    """Fitted partition of context space: nearest-center assignment.

    Assignment returns the index of the nearest center in Euclidean
    distance; exact ties break toward the lowest index.
    """

    centers: np.ndarray

    def __post_init__(self) -> None:
        centers = np.atleast_2d(np.asarray(self.centers, dtype=np.float64))
        if centers.shape[0] < 1 or not np.isfinite(centers).all():
            raise ValueError("centers must be a nonempty finite matrix")
        centers.setflags(write=False)
        object.__setattr__(self, "centers", centers)

    @property
    def n_clusters(self) -> int:
        return int(self.centers.shape[0])

    def assign(self, contexts: np.ndarray) -> np.ndarray:
        """Nearest-center indices for one context vector or a batch."""
        contexts = np.asarray(contexts, dtype=np.float64)
        single = contexts.ndim == 1
        pts = np.atleast_2d(contexts)
        labels = _nearest(pts, self.centers)
        return int(labels[0]) if single else labels

    def to_json(self) -> str:
        return json.dumps({"K": self.n_clusters, "centers": self.centers.ravel().tolist()})

    @classmethod
    def from_json(cls, text: str) -> "ClusterModel":
        doc = json.loads(text)
        k = int(doc["K"])
        centers = np.asarray(doc["centers"], dtype=np.float64).reshape(k, -1)
        return cls(centers)


def _nearest(points: np.ndarray, centers: np.ndarray) -> np.ndarray:
    # squared distances via the expansion |x|^2 - 2 x.c + |c|^2; argmin
    # takes the first (lowest) index on ties
    d2 = (points * points).sum(axis=1)[:, None] - 2.0 * points @ centers.T
    d2 += (centers * centers).sum(axis=1)[None, :]
    return np.argmin(d2, axis=1)


def _kmeans_pp(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = points.shape[0]
    centers = np.empty((k, points.shape[1]))
    centers[0] = points[rng.integers(n)]
    d2 = ((points - centers[0]) ** 2).sum(axis=1)
    for j in range(1, k):
        total = d2.sum()
        if total <= 0:
            centers[j] = points[rng.integers(n)]
            continue
        idx = rng.choice(n, p=d2 / total)
        centers[j] = points[idx]
        d2 = np.minimum(d2, ((points - centers[j]) ** 2).sum(axis=1))
    return centers


def inertia(contexts: np.ndarray, model: ClusterModel) -> float:
    """Total within-cluster squared distance."""
    contexts = np.atleast_2d(np.asarray(contexts, dtype=np.float64))
    labels = model.assign(contexts)
    return float(((contexts - model.centers[labels]) ** 2).sum())


def fit_minibatch_kmeans(contexts: np.ndarray, n_clusters: int, batch: int = 1024,
                         iters: int = 100, stream: RandomStream | None = None) -> ClusterModel:
    """Fit k centers with sequential mini-batch updates.

    Centers are seeded k-means++ style from a uniform subsample of
    ``min(N, 10 * n_clusters * batch)`` points, then updated per batch with
    a per-center learning rate ``1 / count_seen``; a center that receives
    no points in a final full pass is re-seeded to the point farthest from
    its assigned center. Deterministic under a fixed stream.
    """
    contexts = np.atleast_2d(np.asarray(contexts, dtype=np.float64))
    n = contexts.shape[0]
    if n_clusters < 1:
        raise ValueError("n_clusters must be at least 1")
    if n_clusters > n:
        raise ValueError(f"n_clusters={n_clusters} exceeds the number of points ({n})")
    rng = (stream or RandomStream(0)).generator()

    sub = min(n, 10 * n_clusters * batch)
    seed_pts = contexts if sub >= n else contexts[rng.choice(n, size=sub, replace=False)]
    centers = _kmeans_pp(seed_pts, n_clusters, rng)
    counts = np.zeros(n_clusters)

    for _ in range(iters):
        if batch >= n:
            mb = contexts
        else:
            mb = contexts[rng.choice(n, size=batch, replace=False)]
        labels = _nearest(mb, centers)
        # the sequential per-point running-mean update has the closed form
        # center <- (count * center + batch_sum) / (count + batch_count)
        batch_counts = np.bincount(labels, minlength=n_clusters).astype(np.float64)
        sums = np.zeros_like(centers)
        np.add.at(sums, labels, mb)
        hit = batch_counts > 0
        denom = counts[hit] + batch_counts[hit]
        # incremental form of the running mean: exact no-op when every batch
        # point already sits on its center
        centers[hit] += (sums[hit] - batch_counts[hit, None] * centers[hit]) / denom[:, None]
        counts += batch_counts

    # repair pass: empty clusters steal the globally farthest point
    labels = _nearest(contexts, centers)
    present = np.bincount(labels, minlength=n_clusters)
    for j in np.where(present == 0)[0]:
        dist = ((contexts - centers[labels]) ** 2).sum(axis=1)
        far = int(np.argmax(dist))
        centers[j] = contexts[far]
        labels = _nearest(contexts, centers)
    return ClusterModel(centers)


def transform_with_clusters(dataset, model: ClusterModel):
    """Return a copy of the dataset carrying this model's cluster ids."""
    from dataclasses import replace as _replace

    ids = model.assign(dataset.contexts)
    return _replace(dataset, cluster_ids=ids, n_clusters=model.n_clusters, validate=False)
