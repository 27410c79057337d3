import numpy as np
import pytest

from strataforest.baselines import (
    BIN_EDGES,
    BaselineError,
    N_PIXEL_FEATURES,
    fit_forest,
    fit_linreg,
    fit_logistic,
    load_forest,
    logistic_log_loss,
    pixel_features,
    predict_forest,
    predict_linreg,
    predict_logistic,
    save_forest,
)
from strataforest.core import PlotCloud
from conftest import make_cloud


def column_cloud(zs, intensity=None, returns=None):
    n = len(zs)
    return PlotCloud.from_arrays(
        "p", [0.25] * n, [0.25] * n, zs,
        intensity or [10] * n, returns or [1] * n, [-1] * n,
        origin=(0, 0), extent=(0.5, 0.5))


class TestPixelFeatures:
    def test_basic_stats(self):
        grid = pixel_features(column_cloud([1.0, 3.0]), 0.5)
        f = grid.features[0, 0]
        assert f[0] == 3.0 and f[1] == 1.0
        assert f[2] == pytest.approx(2.0)
        assert f[3] == pytest.approx(1.0)  # population std

    def test_bin_membership(self):
        grid = pixel_features(column_cloud([0.7]), 0.5)
        f = grid.features[0, 0]
        bins = f[6:]
        assert bins[1] == 1.0 and bins.sum() == 1.0

    def test_bin_counts_sum(self):
        cloud = make_cloud(seed=0, n=500)
        grid = pixel_features(cloud, 0.5)
        in_range = (cloud.z >= 0) & (cloud.z <= 30)
        assert grid.features[:, :, 6:].sum() == pytest.approx(
            float(in_range.sum()))

    def test_single_point_std_zero(self):
        grid = pixel_features(column_cloud([0.7]), 0.5)
        assert grid.features[0, 0, 3] == 0.0

    def test_empty_pixels_flagged(self):
        cloud = column_cloud([1.0])
        grid = pixel_features(cloud, 0.25)
        assert grid.has_points.sum() == 1

    def test_matches_brute_force(self):
        cloud = make_cloud(seed=1, n=300)
        grid = pixel_features(cloud, 1.0)
        geom = grid.geometry
        rows, cols = geom.pixel_of(cloud.x, cloud.y)
        for r in range(geom.n_rows):
            for c in range(geom.n_cols):
                zs = [cloud.z[k] for k in range(cloud.n_points)
                      if rows[k] == r and cols[k] == c]
                if not zs:
                    assert not grid.has_points[r, c]
                    continue
                f = grid.features[r, c]
                assert f[0] == pytest.approx(max(zs))
                assert f[1] == pytest.approx(min(zs))
                assert f[2] == pytest.approx(np.mean(zs))
                assert f[3] == pytest.approx(np.std(zs))
                for b in range(10):
                    lo, hi = BIN_EDGES[b], BIN_EDGES[b + 1]
                    if b == 9:
                        expect = sum(1 for z in zs if lo <= z <= hi)
                    else:
                        expect = sum(1 for z in zs if lo <= z < hi)
                    assert f[6 + b] == expect

    def test_feature_width(self):
        assert N_PIXEL_FEATURES == 16


class TestLogistic:
    def test_separable_1d(self):
        x = np.linspace(-2, 2, 40).reshape(-1, 1)
        y = (x[:, 0] > 0).astype(int)
        model = fit_logistic(x, y)
        pred = predict_logistic(model, x) >= 0.5
        assert np.array_equal(pred, y.astype(bool))

    def test_single_class_constant(self):
        x = np.random.default_rng(0).normal(size=(20, 3))
        with pytest.warns(UserWarning):
            model = fit_logistic(x, np.ones(20))
        p = predict_logistic(model, x)
        assert np.all(p > 0.5)
        assert np.allclose(p, p[0])

    def test_probabilities_in_open_interval(self):
        rng = np.random.default_rng(1)
        x = rng.normal(size=(60, 4))
        y = (x[:, 0] + 0.2 * rng.normal(size=60) > 0).astype(int)
        model = fit_logistic(x, y)
        p = predict_logistic(model, x)
        assert np.all(p > 0) and np.all(p < 1)

    def test_close_to_long_run_loss(self):
        # overlapping classes keep the regularized optimum at moderate
        # weights, where 500 gradient steps suffice
        rng = np.random.default_rng(2)
        x = rng.normal(size=(80, 3))
        y = ((x @ np.array([1.0, -2.0, 0.5]) + 2.0 * rng.normal(size=80)) > 0)
        y = y.astype(int)
        m500 = fit_logistic(x, y, iterations=500)
        m10k = fit_logistic(x, y, iterations=10000)
        assert logistic_log_loss(m500, x, y) <= \
            logistic_log_loss(m10k, x, y) + 1e-3


class TestLinreg:
    def test_exact_linear_target(self):
        rng = np.random.default_rng(3)
        x = rng.normal(size=(50, 4))
        w = np.array([2.0, -1.0, 0.5, 3.0])
        y = x @ w + 7.0
        model = fit_linreg(x, y)
        pred = predict_linreg(model, x)
        assert np.max(np.abs(pred - y)) < 1e-8

    def test_constant_target_intercept_only(self):
        rng = np.random.default_rng(4)
        x = rng.normal(size=(30, 3))
        model = fit_linreg(x, np.full(30, 5.5))
        assert model.bias == pytest.approx(5.5, abs=1e-6)
        assert np.allclose(predict_linreg(model, x), 5.5, atol=1e-6)

    def test_matches_pseudo_inverse(self):
        x = np.array([[1.0, 0.0, 2.0],
                      [0.0, 1.0, 1.0],
                      [2.0, 1.0, 0.0],
                      [1.0, 3.0, 1.0],
                      [0.5, 0.5, 0.5]])
        y = np.array([1.0, 2.0, 0.5, 3.0, 1.2])
        model = fit_linreg(x, y)
        xs = (x - model.mean) / model.std
        xa = np.column_stack([xs, np.ones(5)])
        beta = np.linalg.pinv(xa.T @ xa + 1e-8 * np.eye(4)) @ xa.T @ y
        assert np.allclose(np.append(model.weights, model.bias), beta,
                           atol=1e-8)

    def test_too_few_samples(self):
        with pytest.raises(BaselineError):
            fit_linreg(np.zeros((2, 3)), np.zeros(2))


class TestForest:
    def test_pure_class_predicts_it(self):
        rng = np.random.default_rng(5)
        x = rng.normal(size=(40, 4))
        model = fit_forest(x, np.ones(40), "classification", n_trees=10)
        assert np.all(predict_forest(model, x) == 1)

    def test_constant_regression_predicts_mean(self):
        rng = np.random.default_rng(6)
        x = rng.normal(size=(40, 4))
        model = fit_forest(x, np.full(40, 2.5), "regression", n_trees=10)
        assert np.allclose(predict_forest(model, x), 2.5)

    def test_structure_limits(self):
        rng = np.random.default_rng(7)
        x = rng.normal(size=(200, 6))
        y = (x[:, 0] > 0).astype(int)
        model = fit_forest(x, y, "classification", n_trees=100, max_depth=4)
        assert len(model.trees) == 100

        def depth(tree, node=0):
            n = tree.nodes[node]
            if n.feature < 0:
                return 0
            return 1 + max(depth(tree, n.left), depth(tree, n.right))

        assert max(depth(t) for t in model.trees) <= 4

    def test_forest_at_least_single_tree(self):
        rng = np.random.default_rng(8)
        x = rng.normal(size=(300, 5))
        y = ((x[:, 0] > 0.2) | (x[:, 2] < -0.5)).astype(int)
        forest = fit_forest(x, y, "classification", n_trees=100, seed=1)
        single = fit_forest(x, y, "classification", n_trees=1, seed=1)
        acc_forest = np.mean(predict_forest(forest, x) == y)
        acc_single = np.mean(predict_forest(single, x) == y)
        assert acc_forest >= acc_single

    def test_deterministic(self):
        rng = np.random.default_rng(9)
        x = rng.normal(size=(100, 4))
        y = (x[:, 1] > 0).astype(int)
        a = fit_forest(x, y, "classification", n_trees=20, seed=3)
        b = fit_forest(x, y, "classification", n_trees=20, seed=3)
        assert np.array_equal(predict_forest(a, x), predict_forest(b, x))

    def test_save_load_round_trip(self, tmp_path):
        rng = np.random.default_rng(10)
        x = rng.normal(size=(80, 4))
        y = (x[:, 0] + x[:, 1] > 0).astype(int)
        model = fit_forest(x, y, "classification", n_trees=15, seed=2)
        path = tmp_path / "forest.json"
        save_forest(model, path)
        back = load_forest(path)
        assert np.array_equal(predict_forest(model, x),
                              predict_forest(back, x))

    def test_unknown_task(self):
        with pytest.raises(BaselineError):
            fit_forest(np.zeros((5, 2)), np.zeros(5), "ranking")
