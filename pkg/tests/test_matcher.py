import math

import numpy as np
import pytest

from patsim.errors import DivergenceError, FormatError
from patsim.matcher import (ADAGRAD_EPS, PARAM_NAMES, ConvFilter, MatcherConfig, PairExample,
                            adagrad_step, backward, batch_gradients, bilinear_similarity,
                            conv_forward, cross_entropy, embed_patient, forward_pair,
                            init_model, load_model, loss, max_pool, pairwise_similarity,
                            sample_pairs, save_model, square_loss, train)
from patsim.represent import PatientMatrix

from conftest import numeric_grad, rel_error


def tiny_model(seed, loss_mode="cross_entropy", d=3, m=2, h=2, hidden=4, dropout=0.0):
    cfg = MatcherConfig(dim=d, filter_width=h, n_filters=m, hidden=hidden, dropout=dropout,
                        loss=loss_mode, seed=seed)
    model = init_model(cfg)
    rng = np.random.default_rng(seed + 1000)
    # move away from the symmetric/zero initial point so every term is exercised
    for name in ("matching", "filter_bias", "hidden_b", "out_b", "score_b"):
        model.params[name] = model.params[name] + rng.normal(0, 0.3, model.params[name].shape)
    return model


def random_patient(rng, d, pid, max_visits=5):
    return PatientMatrix(pid, rng.normal(size=(d, int(rng.integers(1, max_visits + 1)))))


def check_gradients(model, pair, mask=None):
    mode = "train" if mask is not None else "infer"
    _, cache = forward_pair(pair, model, mode, mask=mask)
    grads = backward(pair, model, cache)
    errors = {}
    for name in PARAM_NAMES:
        f = lambda: loss(pair, model, forward_mode=mode, mask=mask)
        errors[name] = rel_error(grads[name], numeric_grad(f, model.params[name]))
    return errors


class TestGradients:
    @pytest.mark.parametrize("loss_mode", ["cross_entropy", "square"])
    @pytest.mark.parametrize("trial", range(20))
    def test_finite_differences(self, loss_mode, trial):
        rng = np.random.default_rng(trial)
        model = tiny_model(trial, loss_mode, dropout=0.3)
        pair = PairExample(random_patient(rng, 3, "a"), random_patient(rng, 3, "b"), float(trial % 2))
        mask = (rng.random(model.config.hidden) >= 0.3) / 0.7
        errors = check_gradients(model, pair, mask)
        assert max(errors.values()) < 1e-4, errors

    def test_zero_input_pair(self):
        model = tiny_model(5)
        model.params["filter_bias"] = np.array([0.4, 0.7])
        zero = PairExample(PatientMatrix("a", np.zeros((3, 3))), PatientMatrix("b", np.zeros((3, 2))), 1.0)
        grads = backward(zero, model)
        assert not grads["filters"].any()
        assert grads["filter_bias"].any()

    def test_matching_gradient_is_symmetric(self):
        rng = np.random.default_rng(8)
        model = tiny_model(8)
        pair = PairExample(random_patient(rng, 3, "a"), random_patient(rng, 3, "b"), 1.0)
        g = backward(pair, model)["matching"]
        assert np.array_equal(g, g.T)


class TestConvolution:
    def test_zero_filter(self, rng):
        c = conv_forward(rng.normal(size=(3, 6)), ConvFilter(np.zeros((3, 2)), 0.0))
        assert not c.any() and len(c) == 5

    def test_width_equals_visits(self, rng):
        assert len(conv_forward(rng.normal(size=(3, 4)), ConvFilter(np.ones((3, 4)), 0.0))) == 1

    def test_hand_computed(self):
        X = np.array([[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]])
        assert conv_forward(X, ConvFilter(np.ones((2, 2)), 0.0)).tolist() == [12.0, 16.0]

    def test_short_record_padded(self):
        c = conv_forward(np.ones((2, 1)), ConvFilter(np.ones((2, 3)), 0.5))
        assert c.tolist() == [2.5]

    @pytest.mark.parametrize("values,expected", [([0, 3, 1], 3), ([2, 2, 2], 2), ([7], 7)])
    def test_max_pool(self, values, expected):
        assert max_pool(values) == expected

    def test_pool_empty(self):
        with pytest.raises(ValueError):
            max_pool([])

    def test_one_filter_composition(self, rng):
        model = tiny_model(1, m=1)
        x = random_patient(rng, 3, "p")
        vec = embed_patient(x, model).values
        assert vec.shape == (1,)
        assert vec[0] == pytest.approx(max_pool(conv_forward(x, model.filter(0))), abs=1e-12)

    def test_identical_patients(self, rng):
        model = tiny_model(2)
        x = random_patient(rng, 3, "p")
        y = PatientMatrix("q", x.data.copy())
        assert np.array_equal(embed_patient(x, model).values, embed_patient(y, model).values)

    def test_default_width(self, rng):
        model = init_model(MatcherConfig())
        assert embed_patient(PatientMatrix("p", rng.normal(size=(50, 12))), model).values.shape == (100,)


class TestZeroColumnPadding:
    def test_fully_zero_window_gives_relu_bias(self, rng):
        filt = ConvFilter(rng.normal(size=(3, 2)), -0.3)
        X = np.concatenate([rng.normal(size=(3, 4)), np.zeros((3, 2))], axis=1)
        assert conv_forward(X, filt)[-1] == 0.0
        filt = ConvFilter(filt.weights, 0.8)
        assert conv_forward(X, filt)[-1] == 0.8

    def test_width_one_bounded_by_relu_bias(self, rng):
        for _ in range(200):
            filt = ConvFilter(rng.normal(size=(3, 1)), float(rng.normal()))
            X = rng.normal(size=(3, int(rng.integers(1, 6))))
            before = max_pool(conv_forward(X, filt))
            after = max_pool(conv_forward(np.concatenate([X, np.zeros((3, 1))], axis=1), filt))
            assert after == pytest.approx(max(before, max(filt.bias, 0.0)), abs=1e-12)

    def test_partial_zero_window_can_raise_feature(self):
        # a window straddling real and zero columns is not bounded by the
        # bias floor: the zero column removes a negative contribution
        filt = ConvFilter(np.array([[1.0, -1.0]]), 0.0)
        X = np.array([[-1.0, 1.0]])
        before = max_pool(conv_forward(X, filt))
        after = max_pool(conv_forward(np.concatenate([X, np.zeros((1, 1))], axis=1), filt))
        assert before == 0.0 and after == 1.0


class TestBilinear:
    def test_identity(self, rng):
        model = tiny_model(0, m=4)
        model.params["matching"] = np.eye(4)
        a, b = rng.normal(size=4), rng.normal(size=4)
        assert bilinear_similarity(a, b, model) == pytest.approx(a @ b, abs=1e-12)

    def test_coordinate(self):
        model = tiny_model(0)
        model.params["matching"] = np.array([[0.0, 0.7], [0.7, 0.0]])
        assert bilinear_similarity(np.array([1.0, 0.0]), np.array([0.0, 1.0]), model) == 0.7

    def test_exact_symmetry(self):
        rng = np.random.default_rng(11)
        for _ in range(200):
            m = int(rng.integers(1, 8))
            model = tiny_model(0, m=m)
            model.params["matching"] = rng.normal(size=(m, m))
            a, b = rng.normal(size=m), rng.normal(size=m)
            assert bilinear_similarity(a, b, model) == bilinear_similarity(b, a, model)


class TestHead:
    def test_probabilities(self, rng):
        for loss_mode in ("cross_entropy", "square"):
            probs, _ = forward_pair(PairExample(random_patient(rng, 3, "a"), random_patient(rng, 3, "b"), 1),
                                    tiny_model(3, loss_mode))
            assert probs.sum() == pytest.approx(1.0, abs=1e-15) and np.all(probs >= 0)

    def test_no_dropout_modes_agree(self, rng):
        model = tiny_model(4, dropout=0.0)
        pair = PairExample(random_patient(rng, 3, "a"), random_patient(rng, 3, "b"), 1)
        train_p, _ = forward_pair(pair, model, "train", rng=rng)
        infer_p, _ = forward_pair(pair, model, "infer")
        assert np.array_equal(train_p, infer_p)

    def test_dropout_expectation(self):
        rng = np.random.default_rng(6)
        model = tiny_model(6, hidden=64, dropout=0.5)
        pair = PairExample(random_patient(rng, 3, "a"), random_patient(rng, 3, "b"), 1)
        _, cache = forward_pair(pair, model, "infer")
        draws = np.mean([forward_pair(pair, model, "train", rng=rng)[1]["hd"] for _ in range(10_000)], axis=0)
        assert np.linalg.norm(draws - cache["hd"]) / np.linalg.norm(cache["hd"]) < 0.02

    def test_losses(self):
        assert square_loss(0.3, 0.3) == 0.0
        assert square_loss(1.0, 0.4) == pytest.approx(0.36)
        assert cross_entropy(np.array([0.0, 1.0]), 1) == 0.0


class TestAdaGrad:
    def test_zero_gradient(self):
        model = tiny_model(0)
        before = {k: v.copy() for k, v in model.params.items()}
        adagrad_step(model, {k: np.zeros_like(v) for k, v in model.params.items()}, 0.1)
        assert all(np.array_equal(before[k], model.params[k]) for k in before)
        assert not any(v.any() for v in model.accumulators.values())

    def test_first_step(self):
        model = tiny_model(0)
        before = model.params["hidden_b"].copy()
        adagrad_step(model, {"hidden_b": np.ones_like(before)}, 0.1)
        assert np.allclose(model.params["hidden_b"] - before, -0.1 / (1 + ADAGRAD_EPS), atol=1e-15)

    def test_inverse_sqrt_decay(self):
        model = tiny_model(0)
        g = np.full_like(model.params["out_b"], 0.5)
        steps = []
        for _ in range(10):
            before = model.params["out_b"].copy()
            adagrad_step(model, {"out_b": g}, 0.2)
            steps.append(float((before - model.params["out_b"])[0]))
        expected = [0.2 * 0.5 / (math.sqrt(t) * 0.5 + ADAGRAD_EPS) for t in range(1, 11)]
        assert np.allclose(steps, expected, rtol=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            adagrad_step(tiny_model(0), {"out_b": np.ones(3)}, 0.1)


def _toy_pairs(rng, n_pairs=20, d=3):
    """Two cohorts whose matrices point in opposite directions."""
    patients, labels = [], []
    for i in range(12):
        sign = 1.0 if i % 2 == 0 else -1.0
        data = sign * np.array([1.0, 0.5, -0.5])[:, None] + 0.3 * rng.normal(size=(d, 3))
        patients.append(PatientMatrix(f"p{i}", data))
        labels.append("x" if sign > 0 else "y")
    return patients, labels, sample_pairs(patients, labels, 0.5, n_pairs, seed=1)


class TestTraining:
    def test_loss_decreases(self):
        rng = np.random.default_rng(0)
        _, _, pairs = _toy_pairs(rng)
        model = init_model(MatcherConfig(dim=3, filter_width=2, n_filters=4, hidden=8, dropout=0.0, seed=3))
        losses = []
        for _ in range(200):
            value, grads = batch_gradients(pairs, model, mode="infer")
            losses.append(value)
            adagrad_step(model, grads, 0.05)
        decreasing = sum(b < a for a, b in zip(losses, losses[1:])) / (len(losses) - 1)
        assert decreasing >= 0.9
        assert losses[-1] <= 0.5 * losses[0]

    def test_train_early_stopping(self):
        rng = np.random.default_rng(1)
        patients, labels, _ = _toy_pairs(rng)
        cfg = MatcherConfig(dim=3, filter_width=2, n_filters=4, hidden=8, dropout=0.2, max_epochs=6,
                            pairs_per_epoch=40, dev_pairs=20, batch_size=10, patience=2, seed=0)
        model, history = train(patients, labels, patients, labels, cfg)
        assert 1 <= len(history.dev_loss) <= 6
        if history.best_epoch:
            assert history.dev_loss[history.best_epoch - 1] == min(history.dev_loss)

    def test_divergence_reported(self):
        rng = np.random.default_rng(1)
        patients, labels, _ = _toy_pairs(rng)
        patients = [PatientMatrix(p.patient_id, p.data * 1e300) for p in patients]
        cfg = MatcherConfig(dim=3, filter_width=2, n_filters=4, hidden=8, max_epochs=2,
                            pairs_per_epoch=20, dev_pairs=10, learning_rate=1e300)
        with pytest.raises((DivergenceError, FloatingPointError)), np.errstate(all="ignore"):
            train(patients, labels, patients, labels, cfg)

    def test_dimension_checked(self):
        rng = np.random.default_rng(1)
        patients, labels, _ = _toy_pairs(rng)
        with pytest.raises(ValueError):
            train(patients, labels, patients, labels, MatcherConfig(dim=4))


class TestSamplePairs:
    def _patients(self, n_per=10, cohorts=("a", "b", "c")):
        pats = [PatientMatrix(f"{c}{i}", np.zeros((2, 1))) for c in cohorts for i in range(n_per)]
        return pats, {p.patient_id: p.patient_id[0] for p in pats}

    def test_counts(self):
        pats, cohorts = self._patients()
        pairs = sample_pairs(pats, cohorts, 0.5, 100, seed=0)
        assert sum(p.label == 1 for p in pairs) == 50 and sum(p.label == 0 for p in pairs) == 50
        for p in pairs:
            assert (cohorts[p.a.patient_id] == cohorts[p.b.patient_id]) == (p.label == 1)
        keys = {frozenset((p.a.patient_id, p.b.patient_id)) for p in pairs}
        assert len(keys) == 100 and all(len(k) == 2 for k in keys)

    def test_exhaustive(self):
        pats, cohorts = self._patients(n_per=3, cohorts=("a", "b"))
        pairs = sample_pairs(pats, cohorts, 0.4, 15, seed=2)
        assert len({frozenset((p.a.patient_id, p.b.patient_id)) for p in pairs}) == 15

    def test_single_cohort(self):
        pats, cohorts = self._patients(cohorts=("a",))
        with pytest.raises(ValueError):
            sample_pairs(pats, cohorts, 0.5, 10)

    def test_too_many(self):
        pats, cohorts = self._patients(n_per=2, cohorts=("a", "b"))
        with pytest.raises(ValueError):
            sample_pairs(pats, cohorts, 0.5, 10)

    def test_deterministic(self):
        pats, cohorts = self._patients()
        ids = lambda ps: [(p.a.patient_id, p.b.patient_id, p.label) for p in ps]
        assert ids(sample_pairs(pats, cohorts, 0.5, 60, seed=4)) == ids(sample_pairs(pats, cohorts, 0.5, 60, seed=4))


class TestInference:
    @pytest.mark.parametrize("loss_mode", ["cross_entropy", "square"])
    def test_pairwise_matches_forward(self, loss_mode):
        rng = np.random.default_rng(12)
        model = tiny_model(12, loss_mode, hidden=6, dropout=0.5)
        pats = [random_patient(rng, 3, f"p{i}") for i in range(7)]
        S = pairwise_similarity(model, pats, block=3)
        for i in range(7):
            for j in range(7):
                probs, _ = forward_pair(PairExample(pats[i], pats[j], 0), model, "infer")
                assert abs(S[i, j] - probs[1]) < 1e-12
        assert np.all((S >= 0) & (S <= 1))

    def test_checkpoint_round_trip(self, tmp_path):
        rng = np.random.default_rng(0)
        model = tiny_model(0)
        pair = PairExample(random_patient(rng, 3, "a"), random_patient(rng, 3, "b"), 1)
        _, grads = batch_gradients([pair], model)
        adagrad_step(model, grads, 0.1)
        save_model(model, tmp_path / "m.ckpt")
        back = load_model(tmp_path / "m.ckpt")
        assert back.config == model.config
        for name in PARAM_NAMES:
            assert np.array_equal(back.params[name], model.params[name])
            assert np.array_equal(back.accumulators[name], model.accumulators[name])

    def test_checkpoint_bad_magic(self, tmp_path):
        path = tmp_path / "m.ckpt"
        path.write_text("something else\n")
        with pytest.raises(FormatError):
            load_model(path)
