"""K-means with Davies-Bouldin model selection, and the Hopkins statistic."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

MAX_ITER = 100


@dataclass(frozen=True)
class ClusterAssignment:
    label: int
    clusters: tuple[tuple[str, ...], ...]
    centroids: np.ndarray

    def cluster_of(self, client: str) -> int | None:
        for i, members in enumerate(self.clusters):
            if client in members:
                return i
        return None


def _sq_dists(points: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    return ((points[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)


def _plusplus(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = len(points)
    chosen = [int(rng.integers(n))]
    d2 = ((points - points[chosen[0]]) ** 2).sum(axis=1)
    for _ in range(1, k):
        total = d2.sum()
        if total > 0:
            nxt = int(rng.choice(n, p=d2 / total))
        else:
            rest = [i for i in range(n) if i not in chosen]
            nxt = int(rng.choice(rest))
        chosen.append(nxt)
        d2 = np.minimum(d2, ((points - points[nxt]) ** 2).sum(axis=1))
    return points[chosen].copy()


def _repair(points: np.ndarray, assign: np.ndarray, centroids: np.ndarray, k: int) -> np.ndarray:
    """Give every empty cluster the point farthest from its own centroid."""
    assign = assign.copy()
    for c in range(k):
        if np.any(assign == c):
            continue
        dist = ((points - centroids[assign]) ** 2).sum(axis=1)
        counts = np.bincount(assign, minlength=k)
        # never empty another cluster while repairing this one
        dist[counts[assign] <= 1] = -1.0
        victim = int(np.argmax(dist))
        assign[victim] = c
        centroids[c] = points[victim]
    return assign


def kmeans(points, k: int, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Lloyd's algorithm with k-means++ seeding. Returns (assignment, centroids)."""
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2:
        raise ValueError("points must be a 2-D array")
    n = len(points)
    if not 1 <= k <= n:
        raise ValueError(f"k must lie in [1, {n}], got {k}")
    rng = np.random.default_rng(seed)
    centroids = _plusplus(points, k, rng)
    assign = None
    for _ in range(MAX_ITER):
        new = np.argmin(_sq_dists(points, centroids), axis=1)
        new = _repair(points, new, centroids, k)
        if assign is not None and np.array_equal(new, assign):
            break
        assign = new
        centroids = np.stack([points[assign == c].mean(axis=0) for c in range(k)])
    return assign, centroids


def davies_bouldin(points, assignment, centroids) -> float:
    points = np.asarray(points, dtype=np.float64)
    assignment = np.asarray(assignment)
    centroids = np.asarray(centroids, dtype=np.float64)
    k = len(centroids)
    if k < 2:
        raise ValueError("Davies-Bouldin needs at least two clusters")
    scatter = np.empty(k)
    for c in range(k):
        members = points[assignment == c]
        if len(members) == 0:
            raise ValueError(f"cluster {c} is empty")
        scatter[c] = np.linalg.norm(members - centroids[c], axis=1).mean()
    worst = np.zeros(k)
    for i in range(k):
        for j in range(k):
            if i == j:
                continue
            d = np.linalg.norm(centroids[i] - centroids[j])
            r = (scatter[i] + scatter[j]) / d if d > 0 else np.inf
            worst[i] = max(worst[i], r)
    return float(worst.mean())


def select_clusters(prototypes: dict[str, np.ndarray], label: int = 0, k_max: int = 10,
                    seed: int = 0) -> ClusterAssignment:
    """Cluster one label's prototypes, choosing k in [2, min(k_max, m-1)] by
    lowest Davies-Bouldin index (ties go to the smaller k)."""
    clients = list(prototypes)
    if not clients:
        raise ValueError("no prototypes to cluster")
    pts = np.stack([np.asarray(prototypes[c], dtype=np.float64) for c in clients])
    m = len(clients)
    single = ClusterAssignment(label, (tuple(clients),), pts.mean(axis=0, keepdims=True))
    if m < 3 or np.all(np.ptp(pts, axis=0) <= 1e-12):
        return single
    best = None
    for k in range(2, min(k_max, m - 1) + 1):
        assign, cents = kmeans(pts, k, seed)
        score = davies_bouldin(pts, assign, cents)
        if best is None or score < best[0]:
            best = (score, assign, cents)
    if best is None or not np.isfinite(best[0]):
        return single
    _, assign, cents = best
    clusters = tuple(tuple(c for c, a in zip(clients, assign) if a == i) for i in range(len(cents)))
    return ClusterAssignment(label, clusters, cents)


def hopkins(points, sample_m: int | None = None, seed: int = 0) -> float:
    """Hopkins clustering tendency: about 0.5 for uniform data, near 1 when clustered.

    Uniform probes are drawn in the axis-aligned bounding box of the data.
    """
    x = np.asarray(points, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    n = len(x)
    if sample_m is None:
        sample_m = min(50, n // 2)
    if sample_m < 1 or n < 2 * sample_m:
        raise ValueError(f"need sample_m >= 1 and at least {2 * max(sample_m, 1)} points")
    lo, hi = x.min(axis=0), x.max(axis=0)
    if np.all(hi - lo == 0):
        return 0.5
    rng = np.random.default_rng(seed)
    probes = rng.uniform(lo, hi, size=(sample_m, x.shape[1]))
    u = np.sqrt(_sq_dists(probes, x).min(axis=1))
    idx = rng.choice(n, size=sample_m, replace=False)
    d = _sq_dists(x[idx], x)
    d[np.arange(sample_m), idx] = np.inf
    w = np.sqrt(d.min(axis=1))
    return float(u.sum() / (u.sum() + w.sum()))


def per_class_hopkins(prototype_sets: Sequence, label_universe, seed: int = 0) -> dict[int, float | None]:
    """Hopkins over the computed client prototypes of each label (None when
    fewer than two clients hold the label)."""
    out = {}
    for y in label_universe:
        vecs = [p.computed()[y] for p in prototype_sets if y in p.computed()]
        out[int(y)] = hopkins(np.stack(vecs), seed=seed) if len(vecs) >= 2 else None
    return out
