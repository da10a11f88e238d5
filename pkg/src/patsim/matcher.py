"""Supervised patient matching with a one-layer convolutional network.

Forward path for a pair (a, b) of temporal patient matrices (d x N_p)::

    conv (m filters of width h, ReLU) -> max-pool      deep vectors a', b'
    sim = a'^T M b',  M = (A + A^T) / 2                symmetric bilinear score
    z = [a' | sim | b']                                joined vector (2m + 1)
    hidden = ReLU(W1 z + b1), dropout in training
    cross_entropy head: softmax(W2 hidden + b2) over {dissimilar, similar}
    square head:        sigmoid(w_s . hidden + b_s), loss (y - y_hat)^2

All gradients are written out by hand; parameters are updated with AdaGrad.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

from .errors import DivergenceError, FormatError
from .represent import PatientMatrix, pad_columns

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = "patsim-matcher"
CHECKPOINT_VERSION = 1
ADAGRAD_EPS = 1e-8
LOSSES = ("cross_entropy", "square")
PARAM_NAMES = ("filters", "filter_bias", "matching", "hidden_w", "hidden_b",
               "out_w", "out_b", "score_w", "score_b")


@dataclass(frozen=True)
class MatcherConfig:
    dim: int = 50
    filter_width: int = 5
    n_filters: int = 100
    hidden: int = 64
    dropout: float = 0.5
    learning_rate: float = 0.01
    batch_size: int = 50
    max_epochs: int = 30
    patience: int = 3
    pairs_per_epoch: int = 2000
    dev_pairs: int = 500
    positive_ratio: float = 0.5
    loss: str = "cross_entropy"
    seed: int = 0

    def __post_init__(self):
        if min(self.dim, self.filter_width, self.n_filters, self.hidden, self.batch_size) < 1:
            raise ValueError("dim, filter_width, n_filters, hidden and batch_size must be >= 1")
        if not 0 <= self.dropout < 1:
            raise ValueError(f"dropout must lie in [0, 1), got {self.dropout}")
        if self.loss not in LOSSES:
            raise ValueError(f"loss must be one of {LOSSES}, got {self.loss!r}")
        if not 0 < self.positive_ratio < 1:
            raise ValueError("positive_ratio must lie in (0, 1)")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")


@dataclass
class ConvFilter:
    weights: np.ndarray  # d x h
    bias: float

    @property
    def width(self) -> int:
        return self.weights.shape[1]


@dataclass
class DeepPatientVector:
    patient_id: str
    values: np.ndarray


@dataclass
class PairExample:
    a: PatientMatrix
    b: PatientMatrix
    label: float


@dataclass
class MatcherModel:
    config: MatcherConfig
    params: dict[str, np.ndarray]
    accumulators: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if not self.accumulators:
            self.accumulators = {k: np.zeros_like(v) for k, v in self.params.items()}

    @property
    def matching(self) -> np.ndarray:
        """Effective symmetric matching matrix M."""
        A = self.params["matching"]
        return 0.5 * (A + A.T)

    @property
    def dropout_p(self) -> float:
        return self.config.dropout

    def filter(self, i: int) -> ConvFilter:
        return ConvFilter(self.params["filters"][i], float(self.params["filter_bias"][i]))

    @property
    def filters(self) -> list[ConvFilter]:
        return [self.filter(i) for i in range(self.config.n_filters)]

    def copy(self) -> MatcherModel:
        return MatcherModel(self.config, {k: v.copy() for k, v in self.params.items()},
                            {k: v.copy() for k, v in self.accumulators.items()})


def _glorot(rng, shape, fan_in, fan_out):
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def init_model(config: MatcherConfig) -> MatcherModel:
    rng = np.random.default_rng(config.seed)
    d, h, m, H = config.dim, config.filter_width, config.n_filters, config.hidden
    params = {
        "filters": _glorot(rng, (m, d, h), d * h, m),
        "filter_bias": np.zeros(m),
        "matching": 0.1 * np.eye(m),
        "hidden_w": _glorot(rng, (H, 2 * m + 1), 2 * m + 1, H),
        "hidden_b": np.zeros(H),
        "out_w": _glorot(rng, (2, H), H, 2),
        "out_b": np.zeros(2),
        "score_w": _glorot(rng, (H,), H, 1),
        "score_b": np.zeros(1),
    }
    return MatcherModel(config, params)


# --- convolution and pooling -------------------------------------------------

def conv_forward(x, filt: ConvFilter) -> np.ndarray:
    """Feature map ``c_i = ReLU(<w, x[:, i:i+h]> + b)`` over every window."""
    X = np.asarray(x.data if isinstance(x, PatientMatrix) else x, dtype=float)
    X = pad_columns(X, filt.width)
    win = sliding_window_view(X, filt.width, axis=1)  # d x T x h
    return np.maximum(np.einsum("dth,dh->t", win, filt.weights) + filt.bias, 0.0)


def max_pool(c) -> float:
    c = np.asarray(c)
    if c.size == 0:
        raise ValueError("cannot pool an empty feature map")
    return float(c.max())


def _windows(X: np.ndarray, h: int) -> np.ndarray:
    """T x (d*h) matrix of flattened windows, row-major in (dim, offset)."""
    X = pad_columns(X, h)
    win = sliding_window_view(X, h, axis=1)
    return win.transpose(1, 0, 2).reshape(win.shape[1], -1)


def _encode(X: np.ndarray, params, h: int):
    m = params["filters"].shape[0]
    win = _windows(X, h)
    pre = win @ params["filters"].reshape(m, -1).T + params["filter_bias"]
    arg = pre.argmax(axis=0)
    top = pre[arg, np.arange(m)]
    return np.maximum(top, 0.0), (win, arg, top)


def _encode_backward(d_pooled, cache, grads):
    win, arg, top = cache
    d_pre = d_pooled * (top > 0)
    grads["filters"] += (d_pre[:, None] * win[arg]).reshape(grads["filters"].shape)
    grads["filter_bias"] += d_pre
    return grads


def embed_patient(x: PatientMatrix, model: MatcherModel) -> DeepPatientVector:
    """Pooled feature maps (no dropout)."""
    pooled, _ = _encode(np.asarray(x.data, dtype=float), model.params, model.config.filter_width)
    return DeepPatientVector(x.patient_id, pooled)


def bilinear_similarity(a, b, model: MatcherModel) -> float:
    av = a.values if isinstance(a, DeepPatientVector) else np.asarray(a)
    bv = b.values if isinstance(b, DeepPatientVector) else np.asarray(b)
    M = model.matching
    # both orders summed so the result is bitwise symmetric in (a, b)
    return 0.5 * (float(av @ (M @ bv)) + float(bv @ (M @ av)))


# --- pair forward / loss / backward -------------------------------------------

def _head(hd, params, loss):
    if loss == "cross_entropy":
        logits = params["out_w"] @ hd + params["out_b"]
        logits = logits - logits.max()
        e = np.exp(logits)
        return e / e.sum()
    y_hat = float(expit(params["score_w"] @ hd + params["score_b"][0]))
    return np.array([1.0 - y_hat, y_hat])


def forward_pair(pair: PairExample, model: MatcherModel, mode: str = "infer",
                 rng: np.random.Generator | None = None, mask: np.ndarray | None = None):
    """Return (probabilities [p(dissimilar), p(similar)], cache).

    In ``train`` mode an inverted-dropout mask is applied to the hidden layer;
    pass ``mask`` to fix it (gradient checks) or ``rng`` to draw it.
    """
    if mode not in ("train", "infer"):
        raise ValueError(f"mode must be 'train' or 'infer', got {mode!r}")
    p, cfg = model.params, model.config
    a, cache_a = _encode(np.asarray(pair.a.data, dtype=float), p, cfg.filter_width)
    b, cache_b = _encode(np.asarray(pair.b.data, dtype=float), p, cfg.filter_width)
    M = model.matching
    Ma, Mb = M @ a, M @ b
    sim = 0.5 * (float(a @ Mb) + float(b @ Ma))
    z = np.concatenate([a, [sim], b])
    hp = p["hidden_w"] @ z + p["hidden_b"]
    h = np.maximum(hp, 0.0)
    if mode == "train" and cfg.dropout > 0:
        if mask is None:
            rng = rng if rng is not None else np.random.default_rng()
            keep = rng.random(h.shape) >= cfg.dropout
            mask = keep / (1.0 - cfg.dropout)
    else:
        mask = np.ones_like(h)
    hd = h * mask
    probs = _head(hd, p, cfg.loss)
    cache = dict(a=a, b=b, Ma=Ma, Mb=Mb, z=z, hp=hp, mask=mask, hd=hd, probs=probs,
                 cache_a=cache_a, cache_b=cache_b)
    return probs, cache


def square_loss(y: float, y_hat: float) -> float:
    return (y - y_hat) ** 2


def cross_entropy(probs: np.ndarray, label: int) -> float:
    return float(-np.log(max(probs[label], 1e-300)))


def loss(pair: PairExample, model: MatcherModel, mode: str | None = None,
         forward_mode: str = "infer", mask: np.ndarray | None = None) -> float:
    """Loss of one pair; ``mode`` defaults to the model's configured loss."""
    mode = mode or model.config.loss
    if mode != model.config.loss:
        model = MatcherModel(_with_loss(model.config, mode), model.params, model.accumulators)
    probs, _ = forward_pair(pair, model, forward_mode, mask=mask)
    if mode == "square":
        return square_loss(float(pair.label), probs[1])
    return cross_entropy(probs, int(round(pair.label)))


def _with_loss(config: MatcherConfig, mode: str) -> MatcherConfig:
    return MatcherConfig(**{**asdict(config), "loss": mode})


def backward(pair: PairExample, model: MatcherModel, cache: dict | None = None) -> dict[str, np.ndarray]:
    """Gradients of the configured loss w.r.t. every parameter tensor."""
    if cache is None:
        _, cache = forward_pair(pair, model, "infer")
    p, cfg = model.params, model.config
    m = cfg.n_filters
    grads = {k: np.zeros_like(v) for k, v in p.items()}
    hd, probs = cache["hd"], cache["probs"]
    if cfg.loss == "cross_entropy":
        target = np.zeros(2)
        target[int(round(pair.label))] = 1.0
        d_logits = probs - target
        grads["out_w"] = np.outer(d_logits, hd)
        grads["out_b"] = d_logits
        d_hd = p["out_w"].T @ d_logits
    else:
        y_hat = probs[1]
        d_t = -2.0 * (float(pair.label) - y_hat) * y_hat * (1.0 - y_hat)
        grads["score_w"] = d_t * hd
        grads["score_b"] = np.array([d_t])
        d_hd = d_t * p["score_w"]
    d_hp = d_hd * cache["mask"] * (cache["hp"] > 0)
    grads["hidden_w"] = np.outer(d_hp, cache["z"])
    grads["hidden_b"] = d_hp
    d_z = p["hidden_w"].T @ d_hp
    d_sim = d_z[m]
    a, b = cache["a"], cache["b"]
    d_a = d_z[:m] + d_sim * cache["Mb"]
    d_b = d_z[m + 1:] + d_sim * cache["Ma"]
    d_M = d_sim * np.outer(a, b)
    grads["matching"] = 0.5 * (d_M + d_M.T)
    _encode_backward(d_a, cache["cache_a"], grads)
    _encode_backward(d_b, cache["cache_b"], grads)
    return grads


def adagrad_step(model: MatcherModel, grads: Mapping[str, np.ndarray],
                 learning_rate: float) -> MatcherModel:
    """In-place AdaGrad update; returns ``model``."""
    for name, g in grads.items():
        acc = model.accumulators[name]
        if acc.shape != g.shape:
            raise ValueError(f"gradient shape {g.shape} != accumulator shape {acc.shape} for {name}")
        acc += g * g
        model.params[name] -= learning_rate * g / (np.sqrt(acc) + ADAGRAD_EPS)
    return model


# --- pair sampling -------------------------------------------------------------

def _triangle_decode(k: np.ndarray, n: int):
    """Map flat indices of the strict upper triangle of an n x n grid to (i, j)."""
    k = np.asarray(k, dtype=np.int64)
    # rows before row i hold i*n - i*(i+1)/2 entries
    i = (n - 2 - np.floor(np.sqrt(-8.0 * k + 4.0 * n * (n - 1) - 7) / 2.0 - 0.5)).astype(np.int64)
    before = i * n - i * (i + 1) // 2
    # guard against floating error at row boundaries
    over = k < before
    i[over] -= 1
    before = i * n - i * (i + 1) // 2
    under = k >= before + (n - 1 - i)
    i[under] += 1
    before = i * n - i * (i + 1) // 2
    j = k - before + i + 1
    return i, j


def sample_pairs(patients: Sequence[PatientMatrix], cohorts, ratio: float = 0.5,
                 count: int = 100, seed: int = 0) -> list[PairExample]:
    """Draw ``count`` distinct pairs, ``round(ratio * count)`` of them from the
    same cohort (label 1) and the rest across cohorts (label 0).

    ``cohorts`` is a mapping patient_id -> cohort or a sequence aligned with
    ``patients``.
    """
    if isinstance(cohorts, Mapping):
        labels = [cohorts[p.patient_id] for p in patients]
    else:
        labels = list(cohorts)
        if len(labels) != len(patients):
            raise ValueError("cohorts must align with patients")
    groups: dict[str, list[int]] = {}
    for i, c in enumerate(labels):
        groups.setdefault(c, []).append(i)
    names = sorted(groups)
    if len(names) < 2:
        raise ValueError("sampling negative pairs needs at least two cohorts")
    n_pos = int(round(ratio * count))
    n_neg = count - n_pos
    pos_blocks = [(c, len(groups[c]) * (len(groups[c]) - 1) // 2) for c in names]
    neg_blocks = [((c1, c2), len(groups[c1]) * len(groups[c2]))
                  for x, c1 in enumerate(names) for c2 in names[x + 1:]]
    n_pos_avail = sum(s for _, s in pos_blocks)
    n_neg_avail = sum(s for _, s in neg_blocks)
    if n_pos > n_pos_avail or n_neg > n_neg_avail:
        raise ValueError(f"requested {n_pos} positive / {n_neg} negative pairs but only "
                         f"{n_pos_avail} / {n_neg_avail} exist")
    rng = np.random.default_rng(seed)
    out: list[tuple[int, int, float]] = []

    def draw(blocks, total, n, label):
        if n == 0:
            return
        flat = np.sort(rng.choice(total, size=n, replace=False))
        bounds = np.cumsum([0] + [s for _, s in blocks])
        which = np.searchsorted(bounds, flat, side="right") - 1
        for blk in np.unique(which):
            key, _ = blocks[blk]
            local = flat[which == blk] - bounds[blk]
            if label == 1.0:
                members = groups[key]
                ii, jj = _triangle_decode(local, len(members))
                out.extend((members[i], members[j], label) for i, j in zip(ii, jj))
            else:
                g1, g2 = groups[key[0]], groups[key[1]]
                out.extend((g1[q // len(g2)], g2[q % len(g2)], label) for q in local)

    draw(pos_blocks, n_pos_avail, n_pos, 1.0)
    draw(neg_blocks, n_neg_avail, n_neg, 0.0)
    order = rng.permutation(len(out))
    swap = rng.random(len(out)) < 0.5
    pairs = []
    for o in order:
        i, j, y = out[o]
        if swap[o]:
            i, j = j, i
        pairs.append(PairExample(patients[i], patients[j], y))
    return pairs


# --- training --------------------------------------------------------------------

@dataclass
class TrainingHistory:
    train_loss: list[float] = field(default_factory=list)
    dev_loss: list[float] = field(default_factory=list)
    best_epoch: int = 0


def _check_finite(model: MatcherModel, where: str):
    for name, v in model.params.items():
        if not np.all(np.isfinite(v)):
            raise DivergenceError(f"non-finite values in {name} {where} "
                                  f"(learning_rate={model.config.learning_rate})")


def batch_gradients(pairs: Sequence[PairExample], model: MatcherModel,
                    rng: np.random.Generator | None = None, mode: str = "train"):
    """Mean loss and mean gradients over ``pairs``."""
    total = {k: np.zeros_like(v) for k, v in model.params.items()}
    loss_sum = 0.0
    for pair in pairs:
        probs, cache = forward_pair(pair, model, mode, rng=rng)
        if model.config.loss == "square":
            loss_sum += square_loss(float(pair.label), probs[1])
        else:
            loss_sum += cross_entropy(probs, int(round(pair.label)))
        for k, g in backward(pair, model, cache).items():
            total[k] += g
    n = max(len(pairs), 1)
    return loss_sum / n, {k: g / n for k, g in total.items()}


def mean_loss(pairs: Sequence[PairExample], model: MatcherModel) -> float:
    if not pairs:
        return float("nan")
    return sum(loss(p, model) for p in pairs) / len(pairs)


def _available(labels) -> tuple[int, int]:
    sizes = {}
    for c in labels:
        sizes[c] = sizes.get(c, 0) + 1
    n = len(labels)
    pos = sum(s * (s - 1) // 2 for s in sizes.values())
    return pos, n * (n - 1) // 2 - pos


def _feasible_count(labels, ratio, wanted) -> int:
    pos, neg = _available(labels)
    cap = int(min(pos / ratio if ratio else float("inf"), neg / (1 - ratio)))
    return max(0, min(wanted, cap))


def train(train_patients: Sequence[PatientMatrix], train_cohorts,
          dev_patients: Sequence[PatientMatrix], dev_cohorts,
          config: MatcherConfig = MatcherConfig()) -> tuple[MatcherModel, TrainingHistory]:
    """Minibatch AdaGrad with dev-loss early stopping; returns the best-dev model."""
    if isinstance(train_cohorts, Mapping):
        train_labels = [train_cohorts[p.patient_id] for p in train_patients]
    else:
        train_labels = list(train_cohorts)
    if isinstance(dev_cohorts, Mapping):
        dev_labels = [dev_cohorts[p.patient_id] for p in dev_patients]
    else:
        dev_labels = list(dev_cohorts)
    dims = {p.dim for p in list(train_patients) + list(dev_patients)}
    if dims != {config.dim}:
        raise ValueError(f"patient matrices have dimension {sorted(dims)}, model expects {config.dim}")
    model = init_model(config)
    rng = np.random.default_rng(config.seed + 1)
    n_dev = _feasible_count(dev_labels, config.positive_ratio, config.dev_pairs)
    if n_dev < 2:
        raise ValueError("dev split too small to sample validation pairs")
    dev_pairs = sample_pairs(dev_patients, dev_labels, config.positive_ratio, n_dev,
                             seed=config.seed + 2)
    n_train = _feasible_count(train_labels, config.positive_ratio, config.pairs_per_epoch)
    history = TrainingHistory()
    best = model.copy()
    best_loss = mean_loss(dev_pairs, model)
    stale = 0
    for epoch in range(1, config.max_epochs + 1):
        pairs = sample_pairs(train_patients, train_labels, config.positive_ratio, n_train,
                             seed=int(rng.integers(2 ** 31)))
        losses = []
        for start in range(0, len(pairs), config.batch_size):
            batch = pairs[start:start + config.batch_size]
            batch_loss, grads = batch_gradients(batch, model, rng)
            adagrad_step(model, grads, config.learning_rate)
            _check_finite(model, f"at epoch {epoch}")
            losses.append(batch_loss)
        dev_loss = mean_loss(dev_pairs, model)
        history.train_loss.append(float(np.mean(losses)))
        history.dev_loss.append(dev_loss)
        log.info("matcher epoch %d: train %.4f dev %.4f", epoch, history.train_loss[-1], dev_loss)
        if dev_loss < best_loss:
            best, best_loss, stale = model.copy(), dev_loss, 0
            history.best_epoch = epoch
        else:
            stale += 1
            if stale >= config.patience:
                break
    return best, history


# --- batch inference -------------------------------------------------------------

def embed_all(patients: Sequence[PatientMatrix], model: MatcherModel) -> np.ndarray:
    return np.stack([embed_patient(p, model).values for p in patients]) if patients \
        else np.zeros((0, model.config.n_filters))


def pairwise_similarity(model: MatcherModel, patients: Sequence[PatientMatrix],
                        block: int = 128) -> np.ndarray:
    """p(similar) for every ordered pair (i, j), inference mode.  Not symmetrized."""
    p, m = model.params, model.config.n_filters
    D = embed_all(patients, model)
    P = len(D)
    S = D @ model.matching @ D.T
    S = 0.5 * (S + S.T)
    W1 = p["hidden_w"]
    U = D @ W1[:, :m].T + p["hidden_b"]
    Vb = D @ W1[:, m + 1:].T
    w_sim = W1[:, m]
    out = np.empty((P, P))
    for r0 in range(0, P, block):
        r1 = min(P, r0 + block)
        hp = U[r0:r1, None, :] + Vb[None, :, :] + S[r0:r1, :, None] * w_sim
        h = np.maximum(hp, 0.0)
        if model.config.loss == "cross_entropy":
            logits = h @ p["out_w"].T + p["out_b"]
            out[r0:r1] = expit(logits[..., 1] - logits[..., 0])
        else:
            out[r0:r1] = expit(h @ p["score_w"] + p["score_b"][0])
    return out


def similarity_scorer(model: MatcherModel):
    """Callable for :func:`patsim.similarity.build_similarity_matrix`."""
    return lambda patients: pairwise_similarity(model, patients)


# --- checkpoint ------------------------------------------------------------------

def _fmt(values: np.ndarray) -> str:
    return " ".join(repr(float(v)) for v in values.ravel())


def save_model(model: MatcherModel, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"{CHECKPOINT_MAGIC} {CHECKPOINT_VERSION}\n")
        fh.write("config " + json.dumps(asdict(model.config), sort_keys=True) + "\n")
        for section, tensors in (("param", model.params), ("accum", model.accumulators)):
            for name in PARAM_NAMES:
                v = tensors[name]
                fh.write(f"{section} {name} {' '.join(str(s) for s in v.shape)}\n")
                fh.write(_fmt(v) + "\n")


def load_model(path) -> MatcherModel:
    path = Path(path)
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0].split()[:1] != [CHECKPOINT_MAGIC]:
        raise FormatError("not a matcher checkpoint", path, 1)
    version = int(lines[0].split()[1])
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", path, 1)
    if not lines[1].startswith("config "):
        raise FormatError("missing config line", path, 2)
    config = MatcherConfig(**json.loads(lines[1][len("config "):]))
    tensors = {"param": {}, "accum": {}}
    i = 2
    while i < len(lines):
        head = lines[i].split()
        if len(head) < 2 or head[0] not in tensors:
            raise FormatError(f"bad tensor header {lines[i]!r}", path, i + 1)
        shape = tuple(int(s) for s in head[2:])
        if i + 1 >= len(lines):
            raise FormatError(f"missing values for {head[1]}", path, i + 1)
        vals = np.array([float(v) for v in lines[i + 1].split()])
        if vals.size != int(np.prod(shape)):
            raise FormatError(f"{head[1]}: expected {int(np.prod(shape))} values, got {vals.size}",
                              path, i + 2)
        tensors[head[0]][head[1]] = vals.reshape(shape)
        i += 2
    for section in tensors:
        missing = set(PARAM_NAMES) - set(tensors[section])
        if missing:
            raise FormatError(f"checkpoint lacks {section} tensors {sorted(missing)}", path)
    model = MatcherModel(config, tensors["param"], tensors["accum"])
    ref = init_model(config)
    for name in PARAM_NAMES:
        if model.params[name].shape != ref.params[name].shape:
            raise FormatError(f"{name} has shape {model.params[name].shape}, "
                              f"config implies {ref.params[name].shape}", path)
    return model
