import itertools
import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from patsim.clustering import (ContingencyCounts, PartitionPair, evaluate, kmeans,
                               kmeans_from_similarity, nmi, pair_counts, precision_recall_f,
                               purity, rand_index, seeded_kmeans)
from patsim.similarity import SimilarityMatrix

P = PartitionPair.from_labels


def rand_oracle(clusters, cohorts):
    agree = 0
    pairs = list(itertools.combinations(range(len(clusters)), 2))
    for i, j in pairs:
        agree += (clusters[i] == clusters[j]) == (cohorts[i] == cohorts[j])
    return agree / len(pairs)


def nmi_oracle(clusters, cohorts):
    n = len(clusters)
    def h(labels):
        return -sum(c / n * math.log(c / n) for c in (labels.count(v) for v in set(labels)))
    mi = 0.0
    for a in set(clusters):
        for b in set(cohorts):
            nab = sum(1 for x, y in zip(clusters, cohorts) if x == a and y == b)
            if nab:
                mi += nab / n * math.log(n * nab / (clusters.count(a) * cohorts.count(b)))
    return mi / ((h(clusters) + h(cohorts)) / 2)


class TestHandExamples:
    def test_rand_crossed(self):
        part = P(["x", "x", "y", "y"], ["u", "v", "u", "v"])
        counts = pair_counts(part)
        assert (counts.TP, counts.TN) == (0, 2)
        assert rand_index(part) == 2 / 6

    def test_rand_identical(self):
        assert rand_index(P([0, 0, 1, 2], ["a", "a", "b", "c"])) == 1.0

    def test_rand_one_cluster_distinct_cohorts(self):
        part = P([0, 0, 0, 0], list("abcd"))
        counts = pair_counts(part)
        assert (counts.TP, counts.TN) == (0, 0) and rand_index(part) == 0.0

    def test_purity_four_of_six(self):
        assert purity(P([0] * 6, list("aaaabb"))) == 4 / 6

    def test_purity_singletons(self):
        assert purity(P(range(5), list("aabbc"))) == 1.0

    def test_nmi_identical(self):
        assert nmi(P([1, 1, 2, 2, 3], list("aabbc"))) == pytest.approx(1.0, abs=1e-12)

    def test_nmi_one_cluster(self):
        assert nmi(P([0] * 4, list("aabb"))) == 0.0

    def test_nmi_independent(self):
        assert nmi(P(["x", "x", "y", "y"], ["u", "v", "u", "v"])) == pytest.approx(0.0, abs=1e-15)

    def test_nmi_both_single_block(self):
        assert nmi(P([0, 0, 0], ["a", "a", "a"])) == 1.0


class TestPrecisionRecall:
    def test_perfect(self):
        assert precision_recall_f(pair_counts(P([0, 0, 1], list("aab")))) == (1.0, 1.0, 1.0)

    def test_direct_formula(self):
        p, r, f = precision_recall_f(ContingencyCounts(TP=2, TN=0, FP=2, FN=0))
        assert (p, r) == (0.5, 1.0) and f == pytest.approx(2 / 3)

    def test_no_true_positive_warns(self):
        with pytest.warns(RuntimeWarning):
            assert precision_recall_f(ContingencyCounts(0, 3, 2, 1)) == (0.0, 0.0, 0.0)

    def test_evaluate_keys(self):
        report = evaluate(P([0, 0, 1, 1], list("aabb")))
        assert set(report) == {"rand_index", "purity", "nmi", "precision", "recall", "f_measure"}
        assert all(v == pytest.approx(1.0) for v in report.values())


def test_rand_against_pair_enumeration_1000():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        n = int(rng.integers(2, 25))
        clusters = rng.integers(0, rng.integers(1, 6), n).tolist()
        cohorts = rng.integers(0, rng.integers(1, 6), n).tolist()
        assert rand_index(P(clusters, cohorts)) == rand_oracle(clusters, cohorts)


labels_st = st.integers(1, 30).flatmap(
    lambda n: st.tuples(st.lists(st.integers(0, 5), min_size=n, max_size=n),
                        st.lists(st.integers(0, 5), min_size=n, max_size=n)))


@settings(max_examples=300, deadline=None)
@given(labels_st, st.permutations(range(6)))
def test_bounds_and_relabeling(labels, perm):
    clusters, cohorts = labels
    part = P(clusters, cohorts)
    relabeled = P([perm[c] for c in clusters], cohorts)
    for fn in (purity, nmi) + ((rand_index,) if len(clusters) >= 2 else ()):
        value = fn(part)
        assert 0.0 <= value <= 1.0
        assert fn(relabeled) == pytest.approx(value, abs=1e-12)


@settings(max_examples=200, deadline=None)
@given(labels_st)
def test_nmi_matches_oracle(labels):
    clusters, cohorts = labels
    if len(set(clusters)) + len(set(cohorts)) > 2:
        assert nmi(P(clusters, cohorts)) == pytest.approx(nmi_oracle(clusters, cohorts), abs=1e-12)


@settings(max_examples=200, deadline=None)
@given(labels_st, st.data())
def test_purity_monotone_under_refinement(labels, data):
    clusters, cohorts = labels
    target = data.draw(st.sampled_from(sorted(set(clusters))))
    flips = data.draw(st.lists(st.booleans(), min_size=len(clusters), max_size=len(clusters)))
    refined = [100 if c == target and f else c for c, f in zip(clusters, flips)]
    assert purity(P(refined, cohorts)) >= purity(P(clusters, cohorts))


def test_fuzz_1000_partitions_in_unit_interval():
    rng = np.random.default_rng(1)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        for _ in range(1000):
            n = int(rng.integers(2, 40))
            part = P(rng.integers(0, 5, n).tolist(), rng.integers(0, 5, n).tolist())
            assert all(0.0 <= v <= 1.0 for v in evaluate(part).values())


def _blobs(rng, centers, per=10, spread=0.1):
    X = np.concatenate([np.asarray(c) + spread * rng.normal(size=(per, len(c))) for c in centers])
    return X, np.repeat(np.arange(len(centers)), per)


class TestKMeans:
    def test_k_equals_n(self, rng):
        X = rng.normal(size=(6, 2))
        assert sorted(kmeans(X, 6, seed=1).tolist()) == list(range(6))

    def test_two_blobs(self):
        X = np.array([[0.0, 0.0], [0.1, 0.0], [10.0, 10.0], [10.0, 10.1]])
        labels = kmeans(X, 2, seed=0)
        assert labels[0] == labels[1] != labels[2] == labels[3]

    def test_one_cluster(self, rng):
        assert not kmeans(rng.normal(size=(9, 3)), 1).any()

    def test_deterministic(self, rng):
        X, _ = _blobs(rng, [[0, 0], [3, 3], [0, 3]], spread=1.0)
        assert np.array_equal(kmeans(X, 3, seed=5), kmeans(X, 3, seed=5))

    def test_invalid_k(self, rng):
        with pytest.raises(ValueError):
            kmeans(rng.normal(size=(3, 2)), 4)

    def test_block_similarity(self):
        S = np.kron(np.eye(2), np.ones((3, 3)))
        labels = kmeans_from_similarity(SimilarityMatrix([str(i) for i in range(6)], S, "rv"), 2)
        assert rand_index(P(labels.tolist(), [0, 0, 0, 1, 1, 1])) == 1.0

    def test_identity_similarity(self):
        labels = kmeans_from_similarity(SimilarityMatrix(list("abcd"), np.eye(4), "rv"), 4)
        assert len(set(labels.tolist())) == 4


class TestSeededKMeans:
    def test_all_labeled(self, rng):
        X = rng.normal(size=(8, 2))
        seeds = [0, 1, 2, 0, 1, 2, 0, 1]
        assert seeded_kmeans(X, 3, seeds).tolist() == seeds

    def test_optimal_means_fixed_point(self, rng):
        X, truth = _blobs(rng, [[0, 0], [5, 5]])
        seeds = {i: int(truth[i]) for i in range(0, len(X), 2)}
        labels = seeded_kmeans(X, 2, seeds)
        assert np.array_equal(labels, truth)

    def test_half_labeled_recovery(self):
        rng = np.random.default_rng(7)
        X, truth = _blobs(rng, [[0, 0], [4, 0], [0, 4]], per=20, spread=0.5)
        seeds = np.where(np.arange(len(X)) % 2 == 0, truth, -1)
        labels = seeded_kmeans(X, 3, seeds)
        centroids = np.stack([X[labels == j].mean(axis=0) for j in range(3)])
        nearest = np.argmin(((X[:, None, :] - centroids[None]) ** 2).sum(-1), axis=1)
        unlabeled = seeds < 0
        assert np.array_equal(labels[unlabeled], nearest[unlabeled])
        assert np.array_equal(labels, truth)

    def test_pinned_points_stay(self, rng):
        X = np.array([[0.0], [0.1], [10.0], [10.1], [0.05]])
        # point 4 sits with cluster 0 but is pinned to 1
        labels = seeded_kmeans(X, 2, {0: 0, 2: 1, 4: 1})
        assert labels[4] == 1 and labels[1] == 0

    def test_group_count_mismatch(self, rng):
        with pytest.raises(ValueError):
            seeded_kmeans(rng.normal(size=(4, 2)), 3, {0: 0, 1: 1})
