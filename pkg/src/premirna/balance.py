"""k-means under-sampling of the majority class and stratified k-fold plans."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.distance import pdist

from premirna.sequence_io import NEGATIVE, POSITIVE, LabeledDataset


@dataclass(frozen=True)
class ClusterAssignment:
    k: int
    labels: np.ndarray
    centroids: np.ndarray
    inertia: float
    history: tuple = field(default=(), repr=False)  # inertia after every Lloyd step
    n_iter: int = 0


def _sq_dist(points: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    # explicit differences, not the |a|^2 - 2ab + |b|^2 expansion: the
    # expansion's rounding can break the monotone-inertia guarantee
    out = np.empty((len(points), len(centroids)))
    for c, center in enumerate(centroids):
        diff = points - center
        out[:, c] = np.einsum("ij,ij->i", diff, diff)
    return out


def _kmeans_pp(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = len(points)
    centers = [points[rng.integers(n)]]
    closest = _sq_dist(points, centers[0][None, :])[:, 0]
    for _ in range(1, k):
        total = closest.sum()
        if total > 0:
            idx = rng.choice(n, p=closest / total)
        else:
            idx = rng.integers(n)
        centers.append(points[idx])
        closest = np.minimum(closest, _sq_dist(points, points[idx][None, :])[:, 0])
    return np.array(centers)


def _repair_empty(points, labels, centroids, dist):
    """Give every empty cluster the point farthest from its own centroid."""
    k = len(centroids)
    for c in range(k):
        if np.any(labels == c):
            continue
        own = dist[np.arange(len(points)), labels]
        counts = np.bincount(labels, minlength=k)
        own = np.where(counts[labels] > 1, own, -1.0)  # never empty another cluster
        far = int(np.argmax(own))
        labels[far] = c
        centroids[c] = points[far]
        dist = _sq_dist(points, centroids)
    return labels, centroids


def kmeans(points, k: int, seed: int = 0, max_iter: int = 300) -> ClusterAssignment:
    """Lloyd's algorithm from a k-means++ start; deterministic given ``seed``.

    Stops when assignments no longer change or after ``max_iter`` rounds.
    """
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2 or len(points) == 0:
        raise ValueError("points must be a non-empty 2-D array")
    if not np.all(np.isfinite(points)):
        raise ValueError("points contain non-finite values")
    if not 1 <= k <= len(points):
        raise ValueError(f"k={k} must be between 1 and the number of points ({len(points)})")

    rng = np.random.default_rng(seed)
    centroids = _kmeans_pp(points, k, rng)
    labels = np.full(len(points), -1)
    history = []
    n_iter = 0
    for n_iter in range(1, max_iter + 1):
        dist = _sq_dist(points, centroids)
        new_labels = dist.argmin(axis=1)
        new_labels, centroids = _repair_empty(points, new_labels, centroids, dist)
        changed = not np.array_equal(new_labels, labels)
        labels = new_labels
        for c in range(k):
            centroids[c] = points[labels == c].mean(axis=0)
        history.append(float(((points - centroids[labels]) ** 2).sum()))
        if not changed:
            break
    return ClusterAssignment(k, labels, centroids, history[-1], tuple(history), n_iter)


def mean_intra_distance(points: np.ndarray) -> float:
    """Mean pairwise Euclidean distance; 0 for a single point."""
    if len(points) < 2:
        return 0.0
    return float(pdist(points).mean())


def undersample_negatives(points, ids, target: int, k: int = 5, seed: int = 0) -> list:
    """Pick ``target`` negatives from the most internally similar k-means cluster.

    Similarity is the lowest mean pairwise distance among clusters with at
    least two members. If that cluster is smaller than ``target`` the
    remainder is filled with the points closest to its centroid.
    """
    points = np.asarray(points, dtype=np.float64)
    ids = list(ids)
    if len(ids) != len(points):
        raise ValueError("ids and points differ in length")
    if target > len(ids):
        raise ValueError(f"target {target} exceeds the {len(ids)} available negatives")
    if len(set(ids)) != len(ids):
        raise ValueError("negative ids must be unique")
    rng = np.random.default_rng([seed, 2])
    k = min(k, len(points))
    clusters = kmeans(points, k, seed=int(rng.integers(2**31)))
    members = [np.flatnonzero(clusters.labels == c) for c in range(k)]
    eligible = [c for c in range(k) if len(members[c]) >= 2] or list(range(k))
    best = min(eligible, key=lambda c: (mean_intra_distance(points[members[c]]), c))

    chosen = members[best]
    if len(chosen) >= target:
        picked = rng.choice(chosen, size=target, replace=False)
    else:
        rest = np.setdiff1d(np.arange(len(points)), chosen)
        d = _sq_dist(points[rest], clusters.centroids[best][None, :])[:, 0]
        fill = rest[np.argsort(d, kind="stable")[: target - len(chosen)]]
        picked = np.concatenate([chosen, fill])
    return [ids[i] for i in picked]


@dataclass(frozen=True)
class FoldPlan:
    n_folds: int
    seed: int
    folds: tuple  # ((train_ids, test_ids), ...)

    def test_ids(self, f: int) -> list:
        return list(self.folds[f][1])

    def train_ids(self, f: int) -> list:
        return list(self.folds[f][0])

    def to_json(self) -> str:
        return json.dumps({
            "version": 1,
            "n_folds": self.n_folds,
            "seed": self.seed,
            "folds": [{"train": list(tr), "test": list(te)} for tr, te in self.folds],
        }, indent=1)

    @classmethod
    def from_json(cls, text: str) -> "FoldPlan":
        d = json.loads(text)
        if d.get("version") != 1:
            raise ValueError(f"unsupported fold plan version {d.get('version')}")
        folds = tuple((tuple(f["train"]), tuple(f["test"])) for f in d["folds"])
        return cls(d["n_folds"], d["seed"], folds)


def stratified_kfold(dataset: LabeledDataset, n_folds: int = 8, seed: int = 0) -> FoldPlan:
    """Split each class, shuffled, into ``n_folds`` near-equal test parts."""
    if n_folds < 2:
        raise ValueError("n_folds must be >= 2")
    rng = np.random.default_rng([seed, 1])
    parts = [[] for _ in range(n_folds)]
    for label in (POSITIVE, NEGATIVE):
        idx = [i for i, lab in enumerate(dataset.labels) if lab == label]
        if not idx:
            continue
        if len(idx) < n_folds:
            raise ValueError(f"class {label!r} has {len(idx)} members, fewer than {n_folds} folds")
        perm = rng.permutation(idx)
        for f, chunk in enumerate(np.array_split(perm, n_folds)):
            parts[f].extend(int(i) for i in chunk)
    ids = dataset.ids
    folds = []
    for f in range(n_folds):
        test = sorted(parts[f])
        test_set = set(test)
        train = [i for i in range(len(ids)) if i not in test_set]
        folds.append((tuple(ids[i] for i in train), tuple(ids[i] for i in test)))
    return FoldPlan(n_folds, seed, tuple(folds))
