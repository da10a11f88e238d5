"""Medical concept embeddings via word2vec-style training on patient paragraphs.

Each patient's time-ordered event codes form a "paragraph".  The context of
an event occurrence is every event within ``L`` positions before or after it.
In adaptive mode ``L`` grows with how often the code recurs in that
patient's record::

    L(code, patient) = round(freq(code, patient) * freq_scale + base_window)

Training uses skip-gram with negative sampling (default) or CBOW, with
negatives drawn from the unigram distribution raised to the 3/4 power.
"""

from __future__ import annotations

import logging
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .errors import DivergenceError, FormatError
from .records import PatientRecord, Vocabulary

log = logging.getLogger(__name__)

UNIGRAM_POWER = 0.75


@dataclass(frozen=True)
class EmbeddingConfig:
    dim: int = 50
    base_window: int = 20
    freq_scale: float = 0.5
    adaptive: bool = True
    negatives: int = 5
    epochs: int = 5
    learning_rate: float = 0.25
    min_count: int = 5
    model: str = "skipgram"
    batch_size: int = 1024
    seed: int = 0

    def __post_init__(self):
        if self.dim < 1:
            raise ValueError("dim must be >= 1")
        if self.base_window < 1:
            raise ValueError("base_window must be >= 1")
        if self.negatives < 1:
            raise ValueError("negatives must be >= 1")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if self.epochs < 0 or self.min_count < 0 or self.batch_size < 1:
            raise ValueError("epochs, min_count must be >= 0 and batch_size >= 1")
        if self.model not in ("skipgram", "cbow"):
            raise ValueError(f"model must be 'skipgram' or 'cbow', got {self.model!r}")


@dataclass
class EmbeddingTable:
    vocabulary: Vocabulary
    vectors: np.ndarray
    context_vectors: np.ndarray | None = None

    def __post_init__(self):
        V = len(self.vocabulary)
        if self.vectors.ndim != 2 or self.vectors.shape[0] != V:
            raise ValueError(f"vectors must have shape ({V}, d), got {self.vectors.shape}")
        if not np.all(np.isfinite(self.vectors)):
            raise ValueError("embedding vectors must be finite")

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def __contains__(self, code):
        return code in self.vocabulary

    def vector(self, code: str) -> np.ndarray:
        return self.vectors[self.vocabulary.index(code)]

    def cosine(self, a: str, b: str) -> float:
        u, v = self.vector(a), self.vector(b)
        return float(u @ v / (np.linalg.norm(u) * np.linalg.norm(v)))


def window_length(frequency: int, config: EmbeddingConfig) -> int:
    if not config.adaptive:
        return config.base_window
    # round half away from zero; never below 1
    raw = frequency * config.freq_scale + config.base_window
    return max(1, int(np.floor(raw + 0.5)))


def adaptive_window_length(code: str, record: PatientRecord, config: EmbeddingConfig) -> int:
    """Context window for ``code`` within ``record``."""
    freq = sum(1 for c in record.codes if c == code)
    if freq == 0:
        raise ValueError(f"code {code!r} does not occur in patient {record.patient_id}")
    return window_length(freq, config)


def _patient_pairs(idx: np.ndarray, windows: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """All (center position, context position) pairs, ordered by center then
    context position."""
    n = len(idx)
    if n < 2:
        return np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64)
    reach = int(min(windows.max(), n - 1))
    offsets = np.arange(-reach, reach + 1)
    pos = np.arange(n)[:, None] + offsets[None, :]
    mask = (offsets[None, :] != 0) & (np.abs(offsets)[None, :] <= windows[:, None]) \
        & (pos >= 0) & (pos < n)
    centers = np.broadcast_to(np.arange(n)[:, None], pos.shape)[mask]
    return centers, pos[mask]


def _record_windows(codes: list[str], config: EmbeddingConfig) -> np.ndarray:
    counts = Counter(codes)
    return np.array([window_length(counts[c], config) for c in codes], dtype=np.int64)


def _pairs_with_groups(records, vocabulary, config):
    centers, contexts, groups = [], [], []
    offset = 0
    for rec in records:
        codes = [c for c in rec.codes if c in vocabulary]
        if len(codes) < 2:
            continue
        idx = np.array(vocabulary.indices(codes), dtype=np.int64)
        ci, xi = _patient_pairs(idx, _record_windows(codes, config))
        centers.append(idx[ci])
        contexts.append(idx[xi])
        groups.append(ci + offset)
        offset += len(codes)
    if not centers:
        empty = np.zeros(0, dtype=np.int64)
        return empty, empty, empty
    return np.concatenate(centers), np.concatenate(contexts), np.concatenate(groups)


def pair_indices(records: Sequence[PatientRecord], vocabulary: Vocabulary,
                 config: EmbeddingConfig) -> tuple[np.ndarray, np.ndarray]:
    """Training pairs as vocabulary index arrays.

    Codes missing from ``vocabulary`` are removed from the paragraph before
    windows are computed.
    """
    centers, contexts, _ = _pairs_with_groups(records, vocabulary, config)
    return centers, contexts


def build_training_pairs(records: Sequence[PatientRecord],
                         config: EmbeddingConfig) -> Iterator[tuple[str, str]]:
    """Yield (center code, context code) pairs in record order."""
    for rec in records:
        codes = rec.codes
        if len(codes) < 2:
            continue
        ci, xi = _patient_pairs(np.arange(len(codes)), _record_windows(codes, config))
        for c, x in zip(ci.tolist(), xi.tolist()):
            yield codes[c], codes[x]


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _log_sigmoid(x):
    return -np.logaddexp(0.0, -x)


def sgns_loss(w_in, w_out, centers, contexts, negatives) -> float:
    """Summed skip-gram negative-sampling loss over a batch.

    ``negatives`` has shape (batch, k).
    """
    v = w_in[centers]
    pos = np.einsum("bd,bd->b", v, w_out[contexts])
    neg = np.einsum("bd,bkd->bk", v, w_out[negatives])
    return float(-_log_sigmoid(pos).sum() - _log_sigmoid(-neg).sum())


def sgns_grads(w_in, w_out, centers, contexts, negatives):
    """Gradients of :func:`sgns_loss` w.r.t. both tables (dense)."""
    v = w_in[centers]
    u_pos = w_out[contexts]
    u_neg = w_out[negatives]
    g_pos = _sigmoid(np.einsum("bd,bd->b", v, u_pos)) - 1.0
    g_neg = _sigmoid(np.einsum("bd,bkd->bk", v, u_neg))
    d_v = g_pos[:, None] * u_pos + np.einsum("bk,bkd->bd", g_neg, u_neg)
    d_in = np.zeros_like(w_in)
    d_out = np.zeros_like(w_out)
    np.add.at(d_in, centers, d_v)
    np.add.at(d_out, contexts, g_pos[:, None] * v)
    np.add.at(d_out, negatives, g_neg[:, :, None] * v[:, None, :])
    return d_in, d_out


def cbow_loss(w_in, w_out, groups, targets, contexts, negatives) -> float:
    """CBOW negative-sampling loss.

    ``contexts[j]`` belongs to the target ``targets[groups[j]]``; the hidden
    vector of a target is the mean of its context input vectors.
    """
    h, _ = _cbow_hidden(w_in, groups, contexts, len(targets))
    pos = np.einsum("bd,bd->b", h, w_out[targets])
    neg = np.einsum("bd,bkd->bk", h, w_out[negatives])
    return float(-_log_sigmoid(pos).sum() - _log_sigmoid(-neg).sum())


def _cbow_hidden(w_in, groups, contexts, n):
    sums = np.zeros((n, w_in.shape[1]))
    np.add.at(sums, groups, w_in[contexts])
    sizes = np.bincount(groups, minlength=n).astype(float)
    return sums / np.maximum(sizes, 1.0)[:, None], sizes


def cbow_grads(w_in, w_out, groups, targets, contexts, negatives):
    h, sizes = _cbow_hidden(w_in, groups, contexts, len(targets))
    u_pos = w_out[targets]
    u_neg = w_out[negatives]
    g_pos = _sigmoid(np.einsum("bd,bd->b", h, u_pos)) - 1.0
    g_neg = _sigmoid(np.einsum("bd,bkd->bk", h, u_neg))
    d_h = g_pos[:, None] * u_pos + np.einsum("bk,bkd->bd", g_neg, u_neg)
    d_in = np.zeros_like(w_in)
    d_out = np.zeros_like(w_out)
    np.add.at(d_in, contexts, (d_h / np.maximum(sizes, 1.0)[:, None])[groups])
    np.add.at(d_out, targets, g_pos[:, None] * h)
    np.add.at(d_out, negatives, g_neg[:, :, None] * h[:, None, :])
    return d_in, d_out


def _negative_table(vocabulary: Vocabulary, centers: np.ndarray) -> np.ndarray:
    counts = np.array([vocabulary.occurrence_counts.get(c, 0) for c in vocabulary.codes], dtype=float)
    if counts.sum() == 0:
        counts = np.bincount(centers, minlength=len(vocabulary)).astype(float)
    p = counts ** UNIGRAM_POWER
    return np.cumsum(p / p.sum())


def init_table(vocabulary: Vocabulary, config: EmbeddingConfig) -> EmbeddingTable:
    rng = np.random.default_rng(config.seed)
    d = config.dim
    vectors = rng.uniform(-0.5 / d, 0.5 / d, size=(len(vocabulary), d))
    return EmbeddingTable(vocabulary, vectors, np.zeros((len(vocabulary), d)))


def train_embeddings(records: Sequence[PatientRecord], vocabulary: Vocabulary,
                     config: EmbeddingConfig = EmbeddingConfig()) -> EmbeddingTable:
    """Fit code vectors by minibatch SGD on the negative-sampling objective.

    Codes occurring fewer than ``config.min_count`` times are dropped from
    the returned vocabulary.  Deterministic for a given seed.
    """
    if not records:
        raise ValueError("cannot train embeddings on an empty corpus")
    if config.min_count > 0 and vocabulary.occurrence_counts:
        vocabulary = vocabulary.restrict(
            c for c in vocabulary.codes if vocabulary.occurrence_counts.get(c, 0) >= config.min_count)
    if len(vocabulary) == 0:
        raise ValueError("vocabulary is empty")
    table = init_table(vocabulary, config)
    if config.epochs == 0:
        return table
    centers, contexts, occurrence = _pairs_with_groups(records, vocabulary, config)
    if len(centers) == 0:
        raise ValueError("corpus yields no training pairs")
    cum = _negative_table(vocabulary, centers)
    rng = np.random.default_rng(config.seed + 1)
    w_in, w_out = table.vectors, table.context_vectors
    lr0 = config.learning_rate
    lr_min = lr0 / 100.0

    if config.model == "skipgram":
        units = len(centers)
    else:
        # pairs are emitted center-major, so each occurrence is a contiguous run
        group_start = np.flatnonzero(np.diff(occurrence, prepend=-1) != 0)
        units = len(group_start)
    total_steps = units * config.epochs
    done = 0
    for epoch in range(config.epochs):
        order = rng.permutation(units)
        loss_sum = 0.0
        for start in range(0, units, config.batch_size):
            sel = order[start:start + config.batch_size]
            lr = max(lr_min, lr0 - (lr0 - lr_min) * done / total_steps)
            negs = np.searchsorted(cum, rng.random((len(sel), config.negatives)), side="right")
            negs = np.minimum(negs, len(vocabulary) - 1)
            if config.model == "skipgram":
                c, x = centers[sel], contexts[sel]
                d_in, d_out = sgns_grads(w_in, w_out, c, x, negs)
                rows_in, rows_out = c, np.concatenate([x, negs.ravel()])
                if start == 0:
                    loss_sum = sgns_loss(w_in, w_out, c, x, negs)
            else:
                groups, tgt, ctx = _cbow_batch(sel, group_start, centers, contexts)
                d_in, d_out = cbow_grads(w_in, w_out, groups, tgt, ctx, negs)
                rows_in, rows_out = ctx, np.concatenate([tgt, negs.ravel()])
                if start == 0:
                    loss_sum = cbow_loss(w_in, w_out, groups, tgt, ctx, negs)
            # average over repeated rows so a code seen many times in one
            # batch does not take a many-fold step
            d_in /= np.maximum(np.bincount(rows_in, minlength=len(w_in)), 1)[:, None]
            d_out /= np.maximum(np.bincount(rows_out, minlength=len(w_out)), 1)[:, None]
            w_in -= lr * d_in
            w_out -= lr * d_out
            done += len(sel)
        if not (np.all(np.isfinite(w_in)) and np.all(np.isfinite(w_out))):
            raise DivergenceError(f"non-finite embedding parameters after epoch {epoch + 1} "
                                  f"(learning_rate={config.learning_rate})")
        log.debug("embedding epoch %d: first-batch loss %.4f", epoch + 1, loss_sum)
    return table


def _cbow_batch(sel, group_start, centers, contexts):
    ends = np.append(group_start[1:], len(centers))
    starts = group_start[sel]
    lengths = ends[sel] - starts
    groups = np.repeat(np.arange(len(sel)), lengths)
    offsets = np.arange(lengths.sum()) - np.repeat(np.cumsum(lengths) - lengths, lengths)
    pair_ids = np.repeat(starts, lengths) + offsets
    return groups, centers[starts], contexts[pair_ids]


def save_embeddings(table: EmbeddingTable, path) -> None:
    """Write the word2vec text format: ``V d`` then ``code v1 .. vd`` per row."""
    V, d = table.vectors.shape
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"{V} {d}\n")
        for code, row in zip(table.vocabulary.codes, table.vectors):
            fh.write(code + " " + " ".join(repr(float(x)) for x in row) + "\n")


def load_embeddings(path) -> EmbeddingTable:
    path = Path(path)
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().split()
        if len(header) != 2:
            raise FormatError("header must be 'V d'", path, 1)
        try:
            V, d = int(header[0]), int(header[1])
        except ValueError:
            raise FormatError("header must hold two integers", path, 1) from None
        codes, rows = [], []
        for lineno, line in enumerate(fh, start=2):
            if not line.strip():
                continue
            parts = line.split()
            if len(parts) != d + 1:
                raise FormatError(f"expected {d} values, got {len(parts) - 1}", path, lineno)
            codes.append(parts[0])
            try:
                rows.append([float(x) for x in parts[1:]])
            except ValueError:
                raise FormatError("non-numeric vector entry", path, lineno) from None
    if len(codes) != V:
        raise FormatError(f"header declares {V} rows, found {len(codes)}", path)
    vectors = np.array(rows, dtype=float).reshape(V, d)
    return EmbeddingTable(Vocabulary(tuple(codes)), vectors, None)
