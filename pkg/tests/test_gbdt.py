import numpy as np
import pytest

from amcfg.gbdt import (
    BoostedModel,
    DimensionMismatch,
    EmptyTraining,
    GbdtError,
    GbdtParams,
    NonFiniteFeature,
    feature_importance,
    load_model,
    predict,
    save_model,
    train,
)


def single_split_oracle(X, y):
    """Brute-force best binned split for the 1-round, lr=1, 2-leaf model.

    Recomputes midpoint thresholds and the gradient-variance gain from
    scratch; returns the oracle predictions.
    """
    n, d = X.shape
    base = float(np.median(y))
    g = np.sign(base - np.asarray(y, dtype=float))  # sign(pred - y)
    best = (-np.inf, None, None)
    for f in range(d):
        uniques = np.unique(X[:, f])
        for t in (uniques[:-1] + uniques[1:]) / 2.0:
            left = X[:, f] <= t
            n_l, n_r = int(left.sum()), int((~left).sum())
            if n_l == 0 or n_r == 0:
                continue
            g_l, g_r, g_t = g[left].sum(), g[~left].sum(), g.sum()
            gain = g_l * g_l / n_l + g_r * g_r / n_r - g_t * g_t / n
            if gain > best[0]:
                best = (gain, f, t)
    gain, f, t = best
    if f is None or gain <= 1e-12:
        resid = y - base
        return np.full(n, base + float(np.median(resid)))
    left = X[:, f] <= t
    resid = y - base
    out = np.full(n, base)
    out[left] += float(np.median(resid[left]))
    out[~left] += float(np.median(resid[~left]))
    return out


class TestTrain:
    def test_zero_rounds_predicts_median(self):
        X = np.arange(10, dtype=float)[:, None]
        y = np.array([1.0, 2, 3, 4, 5, 6, 7, 8, 9, 100])
        model = train(X, y, GbdtParams(n_rounds=0))
        np.testing.assert_array_equal(predict(model, X), np.full(10, np.median(y)))

    def test_constant_target(self):
        X = np.arange(8, dtype=float)[:, None]
        y = np.full(8, 3.25)
        with pytest.warns(UserWarning, match="constant target"):
            model = train(X, y, GbdtParams(n_rounds=10, min_samples_leaf=1))
        assert len(model.trees) == 0
        np.testing.assert_array_equal(predict(model, X), y)
        assert model.train_mae_history == [0.0]

    def test_hand_traced_two_point_example(self):
        X = np.array([[0.0], [1.0]])
        y = np.array([0.0, 10.0])
        params = GbdtParams(n_rounds=1, learning_rate=1.0, min_samples_leaf=1,
                            early_stopping_rounds=0)
        model = train(X, y, params)
        assert model.base_score == 5.0
        np.testing.assert_array_equal(predict(model, X), [0.0, 10.0])
        assert len(model.trees) == 1

    def test_empty_training(self):
        with pytest.raises(EmptyTraining):
            train(np.zeros((0, 2)), np.zeros(0), GbdtParams())

    def test_nonfinite_rejected(self):
        with pytest.raises(NonFiniteFeature):
            train(np.array([[np.nan]]), np.array([1.0]), GbdtParams())
        with pytest.raises(NonFiniteFeature):
            train(np.array([[1.0]]), np.array([np.inf]), GbdtParams())

    def test_param_validation(self):
        with pytest.raises(GbdtError):
            GbdtParams(learning_rate=0.0)
        with pytest.raises(GbdtError):
            GbdtParams(num_leaves=1)
        with pytest.raises(GbdtError):
            GbdtParams(max_bins=1)

    def test_train_mae_non_increasing_random(self):
        rng = np.random.default_rng(0)
        for trial in range(20):
            n = int(rng.integers(20, 120))
            d = int(rng.integers(1, 6))
            X = rng.standard_normal((n, d))
            y = rng.standard_normal(n) * 3 + X @ rng.standard_normal(d)
            params = GbdtParams(
                n_rounds=30,
                learning_rate=float(rng.uniform(0.05, 1.0)),
                min_samples_leaf=int(rng.integers(1, 6)),
                num_leaves=int(rng.integers(2, 16)),
                early_stopping_rounds=0,
            )
            model = train(X, y, params)
            history = model.train_mae_history
            for a, b in zip(history, history[1:]):
                assert b <= a + 1e-12

    def test_determinism(self):
        rng = np.random.default_rng(1)
        X = rng.standard_normal((80, 4))
        y = rng.standard_normal(80)
        a = train(X, y, GbdtParams(n_rounds=20, min_samples_leaf=2))
        b = train(X, y, GbdtParams(n_rounds=20, min_samples_leaf=2))
        for ta, tb in zip(a.trees, b.trees):
            assert ta.feature == tb.feature
            assert ta.threshold == tb.threshold
            assert ta.value == tb.value

    def test_single_tree_matches_split_oracle(self):
        rng = np.random.default_rng(2)
        params = GbdtParams(n_rounds=1, learning_rate=1.0, num_leaves=2,
                            min_samples_leaf=1, early_stopping_rounds=0)
        for trial in range(40):
            n = int(rng.integers(4, 65))
            d = int(rng.integers(1, 4))
            X = rng.standard_normal((n, d))
            y = rng.standard_normal(n) * 2 + (X[:, 0] > 0) * 3
            model = train(X, y, params)
            np.testing.assert_allclose(
                predict(model, X), single_split_oracle(X, y), atol=1e-12
            )

    def test_early_stopping_bounds_tree_count(self):
        rng = np.random.default_rng(3)
        X = rng.standard_normal((100, 3))
        y = X[:, 0] * 2 + rng.standard_normal(100) * 0.1
        X_v = rng.standard_normal((40, 3))
        y_v = rng.standard_normal(40) * 5  # unrelated: validation cannot improve long
        params = GbdtParams(n_rounds=200, early_stopping_rounds=5, min_samples_leaf=5)
        model = train(X, y, params, valid=(X_v, y_v))
        assert model.best_round is not None
        assert len(model.trees) == model.best_round
        assert len(model.valid_mae_history) <= model.best_round + 1 + params.early_stopping_rounds

    def test_early_stopping_keeps_best_round(self):
        rng = np.random.default_rng(4)
        X = rng.standard_normal((200, 3))
        y = X[:, 0] * 2 + 0.3 * rng.standard_normal(200)
        X_v = rng.standard_normal((80, 3))
        y_v = X_v[:, 0] * 2 + 0.3 * rng.standard_normal(80)
        params = GbdtParams(n_rounds=400, learning_rate=0.3,
                            early_stopping_rounds=20, min_samples_leaf=5)
        model = train(X, y, params, valid=(X_v, y_v))
        assert 0 < len(model.trees) < 400


class TestPredict:
    def test_zero_tree_model(self):
        model = train(np.array([[1.0], [2.0]]), np.array([5.0, 7.0]),
                      GbdtParams(n_rounds=0))
        np.testing.assert_array_equal(predict(model, np.array([[9.0]])), [6.0])

    def test_width_mismatch(self):
        model = train(np.zeros((4, 2)) + np.arange(4)[:, None],
                      np.arange(4, dtype=float), GbdtParams(n_rounds=0))
        with pytest.raises(DimensionMismatch):
            predict(model, np.zeros((1, 3)))

    def test_out_of_range_values_clamp_to_edge_bins(self):
        X = np.linspace(0, 1, 50)[:, None]
        y = (X[:, 0] > 0.5).astype(float)
        model = train(X, y, GbdtParams(n_rounds=5, learning_rate=1.0,
                                       min_samples_leaf=1,
                                       early_stopping_rounds=0))
        lo, hi = predict(model, np.array([[-100.0], [100.0]]))
        assert lo == pytest.approx(predict(model, np.array([[0.0]]))[0])
        assert hi == pytest.approx(predict(model, np.array([[1.0]]))[0])

    def test_monotone_transform_invariance_on_training_rows(self):
        rng = np.random.default_rng(5)
        X = rng.standard_normal((60, 3))
        y = X[:, 0] - 2 * X[:, 1] + 0.2 * rng.standard_normal(60)
        params = GbdtParams(n_rounds=10, min_samples_leaf=2,
                            early_stopping_rounds=0)
        base_pred = predict(train(X, y, params), X)
        X_t = np.column_stack([np.exp(X[:, 0]), X[:, 1] ** 3, np.arctan(X[:, 2])])
        trans_pred = predict(train(X_t, y, params), X_t)
        np.testing.assert_allclose(base_pred, trans_pred, atol=1e-9)


class TestImportance:
    def test_zero_trees_all_zero(self):
        model = train(np.array([[1.0], [2.0]]), np.array([1.0, 2.0]),
                      GbdtParams(n_rounds=0))
        assert feature_importance(model, "splits") == [("f0", 0.0)]
        assert feature_importance(model, "gain") == [("f0", 0.0)]

    def test_single_split_counts(self):
        X = np.array([[0.0, 5.0], [1.0, 5.0]])
        y = np.array([0.0, 10.0])
        model = train(X, y, GbdtParams(n_rounds=1, learning_rate=1.0,
                                       min_samples_leaf=1,
                                       early_stopping_rounds=0),
                      feature_names=["a", "b"])
        assert feature_importance(model, "splits") == [("a", 1.0), ("b", 0.0)]

    def test_gain_conservation(self):
        rng = np.random.default_rng(6)
        X = rng.standard_normal((100, 5))
        y = X @ rng.standard_normal(5) + 0.1 * rng.standard_normal(100)
        model = train(X, y, GbdtParams(n_rounds=15, min_samples_leaf=3,
                                       early_stopping_rounds=0))
        total_from_tallies = sum(s for _, s in feature_importance(model, "gain"))
        assert model.gain_totals.sum() == pytest.approx(total_from_tallies, rel=1e-12)
        total_splits = sum(s for _, s in feature_importance(model, "splits"))
        internal_nodes = sum(
            sum(1 for f in t.feature if f >= 0) for t in model.trees
        )
        assert total_splits == internal_nodes

    def test_sorted_desc_ties_by_index(self):
        model = train(np.array([[1.0, 1.0], [2.0, 2.0]]), np.array([0.0, 1.0]),
                      GbdtParams(n_rounds=0), feature_names=["x", "y"])
        assert feature_importance(model) == [("x", 0.0), ("y", 0.0)]


class TestSerialization:
    def test_roundtrip_predictions(self, tmp_path):
        rng = np.random.default_rng(7)
        X = rng.standard_normal((60, 4))
        y = X[:, 0] * 2 + rng.standard_normal(60)
        model = train(X, y, GbdtParams(n_rounds=12, min_samples_leaf=2,
                                       early_stopping_rounds=0))
        save_model(model, tmp_path / "model.json")
        back = load_model(tmp_path / "model.json")
        np.testing.assert_array_equal(predict(back, X), predict(model, X))
        assert back.feature_names == model.feature_names

    def test_version_check(self, tmp_path):
        (tmp_path / "bad.json").write_text('{"format_version": 99}')
        with pytest.raises(GbdtError):
            load_model(tmp_path / "bad.json")
