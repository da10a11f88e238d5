"""Experiment stages: data preparation, embedding, representation, similarity,
matcher training, clustering, evaluation, parameter sweeps and pathway export.

Each ``cmd_*`` function reads its inputs from and writes its outputs to
``config.out``; :class:`Experiment` runs the same steps in memory.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import clustering, embedding, matcher, represent, similarity, synth
from .config import PipelineConfig
from .errors import ConfigError, MissingArtifactError
from .records import (PatientRecord, Vocabulary, filter_patients, filter_vocabulary,
                      parse_events, write_events)

log = logging.getLogger(__name__)

EVENTS = "events.jsonl"
TRUTH = "truth.json"
EMBEDDINGS = "embeddings.txt"
SPLIT = "split.json"
MATRICES = "matrices.txt"
MODEL = "matcher.ckpt"
CLUSTERS = "clusters.csv"
METRICS = "metrics.json"
METRIC_KEYS = ("rand_index", "purity", "nmi", "precision", "recall", "f_measure")


def _require(path: Path, stage: str) -> Path:
    if not path.exists():
        raise MissingArtifactError(f"missing {path} (run the '{stage}' stage first)")
    return path


# --- data ------------------------------------------------------------------------

@dataclass
class Dataset:
    records: list[PatientRecord]
    vocabulary: Vocabulary
    cohorts: dict[str, str]

    def by_id(self) -> dict[str, PatientRecord]:
        return {r.patient_id: r for r in self.records}


def prepare(records: Sequence[PatientRecord], config: PipelineConfig,
            truth: synth.GroundTruth | None = None) -> Dataset:
    """Optional identifier stripping, then the vocabulary and patient filters."""
    d = config.data
    records = list(records)
    if d.strip_identifiers:
        if truth is None:
            raise ConfigError("data.strip_identifiers needs a ground-truth file")
        records = synth.strip_identifiers(records, truth, min_events=0)
    vocab = filter_vocabulary(records, d.max_patient_frac, d.min_patient_count)
    records = filter_patients(records, d.min_events, vocab)
    cohorts = {r.patient_id: r.cohort for r in records if r.cohort is not None}
    if truth is not None:
        for r in records:
            if r.patient_id in truth.cohorts:
                cohorts[r.patient_id] = truth.cohorts[r.patient_id]
    return Dataset(records, vocab, cohorts)


def stratified_split(patient_ids: Sequence[str], cohorts: dict[str, str],
                     fractions: tuple[float, float, float], seed: int) -> dict[str, list[str]]:
    """Patient-level split stratified by cohort; unlabeled patients go to test."""
    rng = np.random.default_rng(seed)
    by_cohort: dict[str, list[str]] = {}
    unlabeled = []
    for pid in patient_ids:
        if pid in cohorts:
            by_cohort.setdefault(cohorts[pid], []).append(pid)
        else:
            unlabeled.append(pid)
    out = {"train": [], "test": [], "dev": []}
    f_train, f_test, _ = fractions
    for cohort in sorted(by_cohort):
        ids = sorted(by_cohort[cohort])
        ids = [ids[i] for i in rng.permutation(len(ids))]
        n_train = int(round(f_train * len(ids)))
        n_test = min(len(ids) - n_train, int(round(f_test * len(ids))))
        out["train"] += ids[:n_train]
        out["test"] += ids[n_train:n_train + n_test]
        out["dev"] += ids[n_train + n_test:]
    out["test"] += unlabeled
    return {k: sorted(v) for k, v in out.items()}


def _split_fractions(config: PipelineConfig):
    return config.split.train, config.split.test, config.split.dev


def load_dataset(config: PipelineConfig) -> Dataset:
    out = config.out_dir
    events = Path(config.data.events) if config.data.events else out / EVENTS
    _require(events, "synth")
    truth_path = Path(config.data.truth) if config.data.truth else out / TRUTH
    truth = synth.GroundTruth.load(truth_path) if truth_path.exists() else None
    records = parse_events(events, config.data.format or None)
    return prepare(records, config, truth)


# --- in-memory experiment --------------------------------------------------------

@dataclass
class Experiment:
    """All pipeline steps on one prepared dataset, cached between methods."""

    config: PipelineConfig
    dataset: Dataset
    split: dict[str, list[str]] = field(default_factory=dict)
    table: embedding.EmbeddingTable | None = None
    model: matcher.MatcherModel | None = None
    _matrices: dict[str, represent.PatientMatrix] = field(default_factory=dict)

    @classmethod
    def from_records(cls, records, config: PipelineConfig, truth=None) -> Experiment:
        return cls(config, prepare(records, config, truth))

    def __post_init__(self):
        if not self.split:
            ids = [r.patient_id for r in self.dataset.records]
            self.split = stratified_split(ids, self.dataset.cohorts, _split_fractions(self.config),
                                          self.config.seed)

    @property
    def k(self) -> int:
        if self.config.cluster.k > 0:
            return self.config.cluster.k
        return max(1, len({self.dataset.cohorts[p] for p in self.split["test"]
                           if p in self.dataset.cohorts}))

    def records(self, part: str) -> list[PatientRecord]:
        lookup = self.dataset.by_id()
        return [lookup[p] for p in self.split[part] if p in lookup]

    def labels(self, part: str) -> list[str]:
        return [self.dataset.cohorts[p] for p in self.split[part]]

    # embeddings and representations

    def fit_embeddings(self) -> embedding.EmbeddingTable:
        if self.table is None:
            self.table = embedding.train_embeddings(self.dataset.records, self.dataset.vocabulary,
                                                    self.config.embedding)
            self._matrices = {}
        return self.table

    def _in_table(self, rec: PatientRecord) -> PatientRecord | None:
        vocab = self.fit_embeddings().vocabulary
        return rec.with_events(lambda ev: ev.code in vocab)

    def matrices(self, part: str) -> list[represent.PatientMatrix]:
        table = self.fit_embeddings()
        out = []
        for rec in self.records(part):
            pm = self._matrices.get(rec.patient_id)
            if pm is None:
                trimmed = self._in_table(rec)
                if trimmed is None:
                    pm = represent.PatientMatrix(rec.patient_id, np.zeros((table.dim, 1)))
                else:
                    pm = represent.to_patient_matrix(trimmed, table, self.config.represent.normalize)
                self._matrices[rec.patient_id] = pm
            out.append(pm)
        return out

    def vectors(self, part: str, representation: str) -> np.ndarray:
        recs = self.records(part)
        if representation == "onehot":
            X = np.stack([represent.event_count_vector(r, self.dataset.vocabulary) for r in recs])
        elif representation == "shallow":
            table = self.fit_embeddings()
            rows = []
            for r in recs:
                trimmed = self._in_table(r)
                rows.append(np.zeros(table.dim) if trimmed is None
                            else represent.to_summed_vector(trimmed, table).data)
            X = np.stack(rows)
        else:
            raise ValueError(f"no vector form for representation {representation!r}")
        if self.config.represent.normalize:
            norms = np.linalg.norm(X, axis=1, keepdims=True)
            X = X / np.where(norms > 0, norms, 1.0)
        return X

    # supervised matcher

    def fit_matcher(self) -> matcher.MatcherModel:
        if self.model is None:
            self.model, history = matcher.train(self.matrices("train"), self.labels("train"),
                                                self.matrices("dev"), self.labels("dev"),
                                                self.config.matcher)
            log.info("matcher: best epoch %d, dev loss %s", history.best_epoch,
                     history.dev_loss[history.best_epoch - 1] if history.best_epoch else "n/a")
        return self.model

    def similarity(self, measure: str) -> similarity.SimilarityMatrix:
        pats = self.matrices("test")
        scorer = matcher.similarity_scorer(self.fit_matcher()) if measure == "cnn" else None
        return similarity.build_similarity_matrix(pats, measure, scorer)

    # clustering

    def _seed_labels(self, ids: Sequence[str]) -> np.ndarray:
        """Labels for a stratified ``seed_frac`` subset of the test patients (-1 elsewhere)."""
        rng = np.random.default_rng(self.config.seed + 7)
        cohorts = sorted({self.dataset.cohorts[p] for p in ids})
        code = {c: i for i, c in enumerate(cohorts)}
        seeds = np.full(len(ids), -1, dtype=np.int64)
        for c in cohorts:
            members = [i for i, p in enumerate(ids) if self.dataset.cohorts[p] == c]
            n = max(1, int(round(self.config.cluster.seed_frac * len(members))))
            for i in rng.choice(members, size=n, replace=False):
                seeds[i] = code[c]
        return seeds

    def _cluster_points(self, X: np.ndarray, ids: Sequence[str]) -> np.ndarray:
        cc = self.config.cluster
        if cc.algorithm == "seeded":
            seeds = self._seed_labels(ids)
            return clustering.seeded_kmeans(X, int(seeds.max()) + 1, seeds, seed=self.config.seed,
                                            max_iters=cc.max_iters)
        return clustering.kmeans(X, min(self.k, len(X)), seed=self.config.seed,
                                 max_iters=cc.max_iters, n_init=cc.n_init)

    def cluster(self, representation: str | None = None, measure: str | None = None,
                sim: similarity.SimilarityMatrix | None = None) -> dict[str, int]:
        representation = representation or self.config.represent.representation
        measure = measure or self.config.similarity.measure
        ids = self.split["test"]
        if representation in ("onehot", "shallow"):
            X = self.vectors("test", representation)
        else:
            sim = sim if sim is not None else self.similarity(measure)
            ids = sim.patient_ids
            X = sim.scores
        labels = self._cluster_points(X, ids)
        return {pid: int(c) for pid, c in zip(ids, labels)}

    def evaluate(self, assignment: dict[str, int]) -> dict[str, float]:
        labeled = {p: c for p, c in assignment.items() if p in self.dataset.cohorts}
        part = clustering.PartitionPair(labeled, {p: self.dataset.cohorts[p] for p in labeled})
        report = clustering.evaluate(part)
        report["k"] = len(set(assignment.values()))
        report["seed"] = self.config.seed
        return report

    def run_method(self, method: str) -> dict[str, float]:
        """``onehot``/``shallow`` (vector k-means) or ``rv``/``dcor``/``cnn``
        (similarity-matrix k-means)."""
        if method in ("onehot", "shallow"):
            return self.evaluate(self.cluster(method))
        return self.evaluate(self.cluster("deep", method))


# --- file-based stages -----------------------------------------------------------

def _write_json(obj, path: Path) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def format_report(report: dict) -> dict:
    """Round metric floats so reports are stable text."""
    out = {}
    for k, v in report.items():
        out[k] = round(float(v), 10) if isinstance(v, float) else v
    return out


def cmd_synth(config: PipelineConfig) -> list[Path]:
    out = config.out_dir
    out.mkdir(parents=True, exist_ok=True)
    records, truth = synth.generate(config.synth)
    write_events(records, out / EVENTS)
    truth.save(out / TRUTH)
    log.info("synth: %d patients, %d events", len(records), sum(r.n_events for r in records))
    return [out / EVENTS, out / TRUTH]


def _experiment(config: PipelineConfig) -> Experiment:
    ds = load_dataset(config)
    split_path = config.out_dir / SPLIT
    split = json.loads(split_path.read_text(encoding="utf-8")) if split_path.exists() else {}
    return Experiment(config, ds, split)


def cmd_embed(config: PipelineConfig) -> list[Path]:
    out = config.out_dir
    out.mkdir(parents=True, exist_ok=True)
    ds = load_dataset(config)
    exp = Experiment(config, ds)
    _write_json(exp.split, out / SPLIT)
    embedding.save_embeddings(exp.fit_embeddings(), out / EMBEDDINGS)
    return [out / SPLIT, out / EMBEDDINGS]


def _loaded_experiment(config: PipelineConfig) -> Experiment:
    out = config.out_dir
    _require(out / SPLIT, "embed")
    exp = _experiment(config)
    exp.table = embedding.load_embeddings(_require(out / EMBEDDINGS, "embed"))
    return exp


def cmd_represent(config: PipelineConfig) -> list[Path]:
    exp = _loaded_experiment(config)
    mats = [m for part in ("train", "dev", "test") for m in exp.matrices(part)]
    mats.sort(key=lambda m: m.patient_id)
    path = config.out_dir / MATRICES
    represent.write_patient_matrices(mats, path)
    return [path]


def _matrix_experiment(config: PipelineConfig) -> Experiment:
    exp = _loaded_experiment(config)
    exp._matrices = represent.matrices_by_id(
        represent.read_patient_matrices(_require(config.out_dir / MATRICES, "represent")))
    return exp


def cmd_train(config: PipelineConfig) -> list[Path]:
    exp = _matrix_experiment(config)
    path = config.out_dir / MODEL
    matcher.save_model(exp.fit_matcher(), path)
    return [path]


def similarity_path(config: PipelineConfig, measure: str | None = None) -> Path:
    return config.out_dir / f"similarity_{measure or config.similarity.measure}.csv"


def cmd_sim(config: PipelineConfig) -> list[Path]:
    exp = _matrix_experiment(config)
    measure = config.similarity.measure
    if measure == "cnn":
        exp.model = matcher.load_model(_require(config.out_dir / MODEL, "train"))
    sim = exp.similarity(measure)
    path = similarity_path(config)
    sim.to_csv(path)
    return [path]


def cmd_cluster(config: PipelineConfig) -> list[Path]:
    rep = config.represent.representation
    if rep == "deep":
        exp = _experiment(config)
        _require(config.out_dir / SPLIT, "embed")
        sim = similarity.SimilarityMatrix.from_csv(_require(similarity_path(config), "sim"))
        assignment = exp.cluster("deep", sim=sim)
    else:
        exp = _loaded_experiment(config) if rep == "shallow" else _experiment(config)
        if rep == "onehot":
            _require(config.out_dir / SPLIT, "embed")
        assignment = exp.cluster(rep)
    path = config.out_dir / CLUSTERS
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["patient_id", "cluster"])
        for pid in sorted(assignment):
            w.writerow([pid, assignment[pid]])
    return [path]


def read_clusters(path: Path) -> dict[str, int]:
    with open(path, encoding="utf-8", newline="") as fh:
        return {row["patient_id"]: int(row["cluster"]) for row in csv.DictReader(fh)}


def cmd_eval(config: PipelineConfig) -> list[Path]:
    exp = _experiment(config)
    assignment = read_clusters(_require(config.out_dir / CLUSTERS, "cluster"))
    path = config.out_dir / METRICS
    _write_json(format_report(exp.evaluate(assignment)), path)
    return [path]


SWEEP_FIELDS = {"d": ("embedding", "dim"), "w": ("matcher", "filter_width"),
                "m": ("matcher", "n_filters")}


def sweep_rows(config: PipelineConfig, dataset: Dataset | None = None) -> list[dict]:
    """Deep-pipeline metrics with one of d, w, m varied over its grid."""
    dataset = dataset or load_dataset(config)
    param = config.sweep.param
    grid = getattr(config.sweep, f"{param}_grid")
    section, name = SWEEP_FIELDS[param]
    shared_table = None
    rows = []
    for value in grid:
        cfg = dataclasses.replace(config)
        setattr(cfg, section, dataclasses.replace(getattr(config, section), **{name: value}))
        cfg.synchronize()
        exp = Experiment(cfg, dataset)
        if param != "d":
            shared_table = shared_table or exp.fit_embeddings()
            exp.table = shared_table
        report = format_report(exp.run_method("cnn"))
        rows.append({"param": param, "value": value,
                     "d": cfg.embedding.dim, "w": cfg.matcher.filter_width,
                     "m": cfg.matcher.n_filters, **{k: report[k] for k in METRIC_KEYS}})
    return rows


def cmd_sweep(config: PipelineConfig) -> list[Path]:
    rows = sweep_rows(config)
    path = config.out_dir / f"sweep_{config.sweep.param}.csv"
    config.out_dir.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["param", "value", "d", "w", "m", *METRIC_KEYS],
                           lineterminator="\n")
        w.writeheader()
        for row in rows:
            w.writerow(row)
    return [path]


# --- pathways --------------------------------------------------------------------

def top_similar(sim: similarity.SimilarityMatrix, members: Sequence[str], top_k: int) -> list[str]:
    """The ``top_k`` members with the highest mean similarity to the others."""
    index = {p: i for i, p in enumerate(sim.patient_ids)}
    idx = np.array([index[p] for p in members], dtype=np.int64)
    if len(idx) == 0:
        return []
    sub = sim.scores[np.ix_(idx, idx)]
    n = len(idx)
    mean = (sub.sum(axis=1) - np.diag(sub)) / max(n - 1, 1)
    order = sorted(range(n), key=lambda i: (-mean[i], members[i]))
    return [members[i] for i in order[:top_k]]


def transition_counts(records: Sequence[PatientRecord]) -> list[tuple[str, str, int]]:
    """Consecutive event pairs of every time-ordered record, most frequent first."""
    counts: Counter = Counter()
    for rec in records:
        codes = rec.codes
        counts.update(zip(codes, codes[1:]))
    return sorted(((s, t, c) for (s, t), c in counts.items()), key=lambda x: (-x[2], x[0], x[1]))


def pathway_members(assignment: dict[str, int], cohorts: dict[str, str], cohort: str) -> list[str]:
    """Patients of ``cohort`` inside the cluster where that cohort dominates."""
    known = set(cohorts.values())
    if cohort not in known:
        raise ConfigError(f"pathways.cohort: unknown cohort {cohort!r} (known: {sorted(known)})")
    tally: dict[int, Counter] = {}
    for pid, c in assignment.items():
        if pid in cohorts:
            tally.setdefault(c, Counter())[cohorts[pid]] += 1
    best, best_n = None, 0
    for c in sorted(tally):
        top = tally[c].most_common()
        n_cohort = tally[c][cohort]
        if top and top[0][1] == n_cohort and n_cohort > best_n:
            best, best_n = c, n_cohort
    if best is None:
        return []
    return sorted(p for p, c in assignment.items() if c == best and cohorts.get(p) == cohort)


def write_pathways(rows, path: Path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["source_code", "target_code", "count"])
        w.writerows(rows)


def cmd_pathways(config: PipelineConfig) -> list[Path]:
    exp = _experiment(config)
    assignment = read_clusters(_require(config.out_dir / CLUSTERS, "cluster"))
    sim = similarity.SimilarityMatrix.from_csv(_require(similarity_path(config), "sim"))
    cohort = config.pathways.cohort
    members = pathway_members(assignment, exp.dataset.cohorts, cohort)
    chosen = top_similar(sim, members, config.pathways.top_k)
    lookup = exp.dataset.by_id()
    rows = transition_counts([lookup[p] for p in chosen])
    path = config.out_dir / f"pathways_{cohort}.csv"
    write_pathways(rows, path)
    return [path]


STAGES = {
    "synth": cmd_synth, "embed": cmd_embed, "represent": cmd_represent, "sim": cmd_sim,
    "train": cmd_train, "cluster": cmd_cluster, "eval": cmd_eval, "sweep": cmd_sweep,
    "pathways": cmd_pathways,
}
