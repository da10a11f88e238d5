"""k-means (plain and seeded) and external clustering metrics."""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass
from typing import Hashable, Mapping, Sequence

import numpy as np

from .similarity import SimilarityMatrix

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class PartitionPair:
    clusters: dict[str, Hashable]
    cohorts: dict[str, Hashable]

    def __post_init__(self):
        if set(self.clusters) != set(self.cohorts):
            raise ValueError("clusters and cohorts must cover the same patients")

    @property
    def n(self) -> int:
        return len(self.clusters)

    @classmethod
    def from_labels(cls, clusters: Sequence, cohorts: Sequence) -> PartitionPair:
        if len(clusters) != len(cohorts):
            raise ValueError("label sequences differ in length")
        ids = [str(i) for i in range(len(clusters))]
        return cls(dict(zip(ids, clusters)), dict(zip(ids, cohorts)))

    def contingency(self) -> np.ndarray:
        """Cluster x cohort count table."""
        ids = sorted(self.clusters)
        cl = [self.clusters[i] for i in ids]
        co = [self.cohorts[i] for i in ids]
        _, ci = np.unique(np.array(cl, dtype=object).astype(str), return_inverse=True)
        _, qi = np.unique(np.array(co, dtype=object).astype(str), return_inverse=True)
        table = np.zeros((ci.max(initial=-1) + 1, qi.max(initial=-1) + 1), dtype=np.int64)
        np.add.at(table, (ci, qi), 1)
        return table


@dataclass(frozen=True)
class ContingencyCounts:
    TP: int
    TN: int
    FP: int
    FN: int

    @property
    def total(self) -> int:
        return self.TP + self.TN + self.FP + self.FN


def _comb2(x):
    x = np.asarray(x, dtype=np.int64)
    return int((x * (x - 1) // 2).sum())


def pair_counts(part: PartitionPair) -> ContingencyCounts:
    """Pairwise decisions over all C(n, 2) patient pairs."""
    table = part.contingency()
    tp = _comb2(table)
    same_cluster = _comb2(table.sum(axis=1))
    same_cohort = _comb2(table.sum(axis=0))
    total = part.n * (part.n - 1) // 2
    fp = same_cluster - tp
    fn = same_cohort - tp
    return ContingencyCounts(tp, total - tp - fp - fn, fp, fn)


def rand_index(part: PartitionPair) -> float:
    if part.n < 2:
        raise ValueError("Rand index needs at least two patients")
    c = pair_counts(part)
    return (c.TP + c.TN) / c.total


def purity(part: PartitionPair) -> float:
    if part.n < 1:
        raise ValueError("purity needs at least one patient")
    return float(part.contingency().max(axis=1).sum()) / part.n


def _entropy(counts: np.ndarray, n: int) -> float:
    p = counts[counts > 0] / n
    return float(-(p * np.log(p)).sum())


def nmi(part: PartitionPair) -> float:
    """I(cluster, cohort) / ((H(cluster) + H(cohort)) / 2), natural log.

    Two single-block partitions are identical and score 1.
    """
    n = part.n
    if n < 1:
        raise ValueError("NMI needs at least one patient")
    table = part.contingency()
    h_cl = _entropy(table.sum(axis=1), n)
    h_co = _entropy(table.sum(axis=0), n)
    if h_cl + h_co == 0.0:
        return 1.0
    pxy = table / n
    px = pxy.sum(axis=1, keepdims=True)
    py = pxy.sum(axis=0, keepdims=True)
    nz = pxy > 0
    mi = float((pxy[nz] * np.log(pxy[nz] / (px @ py)[nz])).sum())
    return min(1.0, max(0.0, mi / ((h_cl + h_co) / 2)))


def precision_recall_f(counts: ContingencyCounts) -> tuple[float, float, float]:
    """Pairwise precision, recall and F-measure; all 0 (with a warning) when
    no pair is a true positive."""
    tp, fp, fn = counts.TP, counts.FP, counts.FN
    if tp == 0:
        warnings.warn("no true-positive pairs: precision/recall reported as 0",
                      RuntimeWarning, stacklevel=2)
        return 0.0, 0.0, 0.0
    precision = tp / (tp + fp)
    recall = tp / (tp + fn)
    return precision, recall, 2 * precision * recall / (precision + recall)


def evaluate(part: PartitionPair) -> dict[str, float]:
    p, r, f = precision_recall_f(pair_counts(part))
    return {"rand_index": rand_index(part), "purity": purity(part), "nmi": nmi(part),
            "precision": p, "recall": r, "f_measure": f}


# --- k-means ---------------------------------------------------------------------

def _sq_dists(X, C):
    d = (X * X).sum(axis=1)[:, None] - 2.0 * X @ C.T + (C * C).sum(axis=1)[None, :]
    return np.maximum(d, 0.0)


def _kmeanspp(X, k, rng):
    n = len(X)
    centers = [int(rng.integers(n))]
    closest = _sq_dists(X, X[centers])[:, 0]
    for _ in range(1, k):
        total = closest.sum()
        if total <= 0:
            # all remaining points coincide with a center
            remaining = np.setdiff1d(np.arange(n), centers)
            centers.append(int(remaining[0]) if len(remaining) else centers[-1])
        else:
            r = rng.random() * total
            idx = int(np.searchsorted(np.cumsum(closest), r, side="right"))
            centers.append(min(idx, n - 1))
        closest = np.minimum(closest, _sq_dists(X, X[centers[-1:]])[:, 0])
    return X[centers].copy()


def _lloyd(X, centers, max_iters, pinned=None):
    """Lloyd iterations; ``pinned`` maps point index -> fixed cluster (or -1)."""
    k = len(centers)
    labels = None
    for _ in range(max_iters):
        new = np.argmin(_sq_dists(X, centers), axis=1)  # first minimum wins ties
        if pinned is not None:
            new = np.where(pinned >= 0, pinned, new)
        for j in range(k):
            if not np.any(new == j):
                # refill an empty cluster with the point farthest from its centre
                far = _sq_dists(X, centers)[np.arange(len(X)), new]
                if pinned is not None:
                    far = np.where(pinned >= 0, -1.0, far)
                i = int(np.argmax(far))
                new[i] = j
        if labels is not None and np.array_equal(new, labels):
            break
        labels = new
        centers = np.stack([X[labels == j].mean(axis=0) for j in range(k)])
    inertia = float(_sq_dists(X, centers)[np.arange(len(X)), labels].sum())
    return labels, centers, inertia


def kmeans(points, k: int, seed: int = 0, max_iters: int = 300, n_init: int = 10) -> np.ndarray:
    """Lloyd's algorithm with k-means++ seeding; best of ``n_init`` restarts."""
    X = np.asarray(points, dtype=float)
    if X.ndim != 2 or len(X) == 0:
        raise ValueError("kmeans needs a non-empty 2-D array of points")
    if not 1 <= k <= len(X):
        raise ValueError(f"k must lie in [1, {len(X)}], got {k}")
    rng = np.random.default_rng(seed)
    best = None
    for _ in range(n_init):
        labels, _, inertia = _lloyd(X, _kmeanspp(X, k, rng), max_iters)
        if best is None or inertia < best[1] - 1e-12:
            best = (labels, inertia)
    return best[0]


def kmeans_from_similarity(sim: SimilarityMatrix, k: int, seed: int = 0,
                           max_iters: int = 300, n_init: int = 10) -> np.ndarray:
    """Cluster patients using their similarity-matrix rows as feature vectors."""
    S = np.asarray(sim.scores, dtype=float)
    if not np.allclose(S, S.T, atol=1e-9):
        raise ValueError("similarity matrix must be symmetric")
    return kmeans(S, k, seed=seed, max_iters=max_iters, n_init=n_init)


def seeded_kmeans(points, k: int, seeds: Mapping[int, int] | Sequence[int], seed: int = 0,
                  max_iters: int = 300) -> np.ndarray:
    """k-means initialised from labeled points, which stay in their cluster.

    ``seeds`` maps point index -> cluster in ``0..k-1``, or is a sequence of
    length n using -1 for unlabeled points.
    """
    X = np.asarray(points, dtype=float)
    if X.ndim != 2 or len(X) == 0:
        raise ValueError("seeded_kmeans needs a non-empty 2-D array of points")
    pinned = np.full(len(X), -1, dtype=np.int64)
    if isinstance(seeds, Mapping):
        for i, c in seeds.items():
            pinned[int(i)] = int(c)
    else:
        pinned[:] = np.asarray(seeds, dtype=np.int64)
    groups = np.unique(pinned[pinned >= 0])
    if len(groups) != k or not np.array_equal(groups, np.arange(k)):
        raise ValueError(f"labeled points must cover clusters 0..{k - 1} exactly, got {groups.tolist()}")
    centers = np.stack([X[pinned == j].mean(axis=0) for j in range(k)])
    labels, _, _ = _lloyd(X, centers, max_iters, pinned=pinned)
    return labels
