"""Unsupervised similarity between temporal patient matrices.

Two patients generally have different visit counts, so both measures work on
the shared embedding dimension:

* RV coefficient on the d x d configurations ``S = X X^T``;
* distance covariance / correlation with the d rows of each matrix as the
  samples (each patient's rows live in that patient's own R^{N_p}).
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy.spatial.distance import cdist

from .errors import FormatError, UndefinedSimilarityError
from .represent import PatientMatrix

log = logging.getLogger(__name__)

MEASURES = ("rv", "dcor", "cnn")


def _data(x) -> np.ndarray:
    return np.asarray(x.data if isinstance(x, PatientMatrix) else x, dtype=float)


@dataclass
class Configuration:
    """Gram matrix ``X X^T`` of one patient (d x d, symmetric PSD)."""

    gram: np.ndarray

    @classmethod
    def of(cls, x) -> Configuration:
        X = _data(x)
        g = X @ X.T
        return cls(0.5 * (g + g.T))


def rv_from_configurations(sx: Configuration, sy: Configuration) -> float:
    num = float(np.sum(sx.gram * sy.gram))
    den2 = float(np.sum(sx.gram * sx.gram)) * float(np.sum(sy.gram * sy.gram))
    if den2 <= 0.0:
        raise UndefinedSimilarityError("RV coefficient undefined for a zero matrix")
    return num / np.sqrt(den2)


def rv_coefficient(x, y) -> float:
    """tr(Sx Sy) / sqrt(tr(Sx^2) tr(Sy^2)) with S = X X^T."""
    X, Y = _data(x), _data(y)
    if X.shape[0] != Y.shape[0]:
        raise ValueError(f"embedding dimensions differ: {X.shape[0]} vs {Y.shape[0]}")
    return rv_from_configurations(Configuration.of(X), Configuration.of(Y))


@dataclass
class CenteredDistanceMatrix:
    values: np.ndarray

    @property
    def n(self) -> int:
        return self.values.shape[0]


def center_distance_matrix(points) -> CenteredDistanceMatrix:
    """Double-centred Euclidean distances between the rows of ``points``."""
    P = np.asarray(points, dtype=float)
    if P.ndim != 2 or P.shape[0] < 2:
        raise ValueError("need at least two samples")
    d = cdist(P, P)
    row = d.mean(axis=1, keepdims=True)
    col = d.mean(axis=0, keepdims=True)
    return CenteredDistanceMatrix(d - row - col + d.mean())


def _dcov_centered(a: CenteredDistanceMatrix, b: CenteredDistanceMatrix) -> float:
    if a.n != b.n:
        raise ValueError(f"sample counts differ: {a.n} vs {b.n}")
    return float(np.sum(a.values * b.values)) / a.n ** 2


def distance_covariance(x, y) -> float:
    """Squared empirical distance covariance, samples = embedding dimensions."""
    X, Y = _data(x), _data(y)
    if X.shape[0] != Y.shape[0]:
        raise ValueError(f"embedding dimensions differ: {X.shape[0]} vs {Y.shape[0]}")
    if X.shape[0] < 2:
        raise ValueError("distance covariance needs d >= 2")
    return _dcov_centered(center_distance_matrix(X), center_distance_matrix(Y))


def dcor_from_centered(a: CenteredDistanceMatrix, b: CenteredDistanceMatrix) -> float:
    vx = _dcov_centered(a, a)
    vy = _dcov_centered(b, b)
    if vx <= 0.0 or vy <= 0.0:
        raise UndefinedSimilarityError("distance correlation undefined: constant sample")
    return max(_dcov_centered(a, b), 0.0) / np.sqrt(vx * vy)


def distance_correlation(x, y) -> float:
    """dCov^2(X,Y) / sqrt(dCov^2(X,X) dCov^2(Y,Y)), in [0, 1]."""
    X, Y = _data(x), _data(y)
    if X.shape[0] != Y.shape[0]:
        raise ValueError(f"embedding dimensions differ: {X.shape[0]} vs {Y.shape[0]}")
    return dcor_from_centered(center_distance_matrix(X), center_distance_matrix(Y))


@dataclass
class SimilarityMatrix:
    patient_ids: list[str]
    scores: np.ndarray
    measure: str
    n_undefined: int = 0

    def __post_init__(self):
        n = len(self.patient_ids)
        if self.scores.shape != (n, n):
            raise ValueError(f"scores must be {n}x{n}")

    def to_csv(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow([self.measure] + list(self.patient_ids))
            for pid, row in zip(self.patient_ids, self.scores):
                w.writerow([pid] + [repr(float(v)) for v in row])

    @classmethod
    def from_csv(cls, path) -> SimilarityMatrix:
        path = Path(path)
        with open(path, encoding="utf-8", newline="") as fh:
            rows = list(csv.reader(fh))
        if not rows:
            raise FormatError("empty similarity file", path)
        measure, ids = rows[0][0], rows[0][1:]
        if len(rows) - 1 != len(ids):
            raise FormatError(f"expected {len(ids)} rows, got {len(rows) - 1}", path)
        scores = np.empty((len(ids), len(ids)))
        for i, row in enumerate(rows[1:]):
            if row[0] != ids[i] or len(row) != len(ids) + 1:
                raise FormatError("row ids must match the header order", path, i + 2)
            scores[i] = [float(v) for v in row[1:]]
        return cls(ids, scores, measure)


def _pairwise_from_features(feats: np.ndarray, self_norm: np.ndarray):
    """Normalized inner products of flattened per-patient features."""
    inner = feats @ feats.T
    inner = 0.5 * (inner + inner.T)
    ok = self_norm > 0
    den = np.sqrt(np.outer(np.where(ok, self_norm, 1.0), np.where(ok, self_norm, 1.0)))
    scores = np.clip(inner / den, 0.0, None)
    bad = ~(ok[:, None] & ok[None, :])
    return scores, bad


def build_similarity_matrix(patients: Sequence[PatientMatrix], measure: str = "rv",
                            scorer: Callable | None = None) -> SimilarityMatrix:
    """Score all patient pairs.

    ``rv`` and ``dcor`` are computed here; ``cnn`` needs ``scorer``, a
    callable mapping the patient list to a full P x P score matrix (see
    :func:`patsim.matcher.pairwise_similarity`).  Pairs whose score is
    undefined are set to 0 and counted in ``n_undefined``.  The diagonal is 1.
    """
    if measure not in MEASURES:
        raise ValueError(f"unknown measure {measure!r}")
    ids = [p.patient_id for p in patients]
    P = len(patients)
    if P == 0:
        return SimilarityMatrix([], np.zeros((0, 0)), measure)
    dims = {p.dim for p in patients}
    if len(dims) != 1:
        raise ValueError(f"patients have different embedding dimensions {sorted(dims)}")
    if measure == "cnn":
        if scorer is None:
            raise ValueError("measure 'cnn' requires a trained matcher scorer")
        scores = np.asarray(scorer(patients), dtype=float)
        scores = 0.5 * (scores + scores.T)
        bad = ~np.isfinite(scores)
    else:
        if measure == "rv":
            feats = np.stack([Configuration.of(p).gram.ravel() for p in patients])
        else:
            feats = np.stack([center_distance_matrix(p.data).values.ravel() for p in patients])
        self_norm = np.einsum("ij,ij->i", feats, feats)
        scores, bad = _pairwise_from_features(feats, self_norm)
    np.fill_diagonal(bad, False)
    n_undefined = int(np.triu(bad, 1).sum())
    if n_undefined:
        log.warning("%d of %d pairs have undefined %s similarity; set to 0",
                    n_undefined, P * (P - 1) // 2, measure)
    scores = np.where(bad, 0.0, scores)
    np.fill_diagonal(scores, 1.0)
    return SimilarityMatrix(ids, scores, measure, n_undefined)
