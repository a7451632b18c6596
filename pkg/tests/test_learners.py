import json

import numpy as np
import pytest

from medmatch.errors import ParameterError
from medmatch.learners import (
    GradientBoostedTrees,
    LinearRegressor,
    RegressorSpec,
    make_regressor,
    regressor_from_dict,
)


def regression_data(seed=0, n=300, p=3):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(n, p))
    y = np.sin(2 * X[:, 0]) + X[:, 1] ** 2 + 0.3 * rng.normal(size=n)
    return X, y


class TestAgainstSklearn:
    """The boosting loop and tree growth should agree with a reference implementation."""

    def test_single_tree(self):
        tree = pytest.importorskip("sklearn.tree")
        X, y = regression_data(1)
        ours = GradientBoostedTrees(n_rounds=1, max_depth=3, learning_rate=1.0,
                                    min_samples_leaf=5).fit(X, y)
        ref = tree.DecisionTreeRegressor(max_depth=3, min_samples_leaf=5, random_state=0).fit(X, y)
        np.testing.assert_allclose(ours.predict(X), ref.predict(X), atol=1e-10)

    def test_boosting(self):
        ensemble = pytest.importorskip("sklearn.ensemble")
        X, y = regression_data(2)
        ours = GradientBoostedTrees(n_rounds=40, max_depth=2, learning_rate=0.1,
                                    min_samples_leaf=5).fit(X, y)
        ref = ensemble.GradientBoostingRegressor(
            n_estimators=40, max_depth=2, learning_rate=0.1, min_samples_leaf=5,
            criterion="squared_error", random_state=0).fit(X, y)
        np.testing.assert_allclose(ours.predict(X), ref.predict(X), atol=1e-8)


class TestGbm:
    def test_deterministic(self):
        X, y = regression_data(3)
        spec = RegressorSpec(n_rounds=30, subsample=0.7, seed=4)
        a = make_regressor(spec).fit(X, y).predict(X)
        b = make_regressor(spec).fit(X, y).predict(X)
        np.testing.assert_array_equal(a, b)

    def test_more_rounds_fit_better(self):
        X, y = regression_data(4)
        err = [np.mean((GradientBoostedTrees(n_rounds=r).fit(X, y).predict(X) - y) ** 2)
               for r in (5, 50)]
        assert err[1] < err[0]

    def test_constant_target(self):
        X, _ = regression_data(5)
        model = GradientBoostedTrees(n_rounds=10).fit(X, np.full(len(X), 2.5))
        np.testing.assert_allclose(model.predict(X), 2.5)

    def test_leaf_size_respected(self):
        X, y = regression_data(6, n=60)
        model = GradientBoostedTrees(n_rounds=5, max_depth=4, min_samples_leaf=7).fit(X, y)
        for tree in model.trees_:
            leaves = tree.apply(X)
            assert np.bincount(leaves)[np.unique(leaves)].min() >= 7

    def test_json_round_trip(self):
        X, y = regression_data(7)
        model = GradientBoostedTrees(n_rounds=15, max_depth=3).fit(X, y)
        back = regressor_from_dict(json.loads(json.dumps(model.to_dict())))
        np.testing.assert_array_equal(back.predict(X), model.predict(X))

    def test_predict_single_row(self):
        X, y = regression_data(8)
        model = GradientBoostedTrees(n_rounds=5).fit(X, y)
        assert model.predict(X[0]).shape == (1,)
        assert model.predict(X[0])[0] == model.predict(X)[0]


class TestLinear:
    def test_recovers_plane(self):
        rng = np.random.default_rng(0)
        X = rng.normal(size=(50, 2))
        y = 1.5 - 2 * X[:, 0] + 0.25 * X[:, 1]
        model = LinearRegressor().fit(X, y)
        assert model.intercept_ == pytest.approx(1.5)
        np.testing.assert_allclose(model.coef_, [-2, 0.25], atol=1e-12)

    def test_round_trip(self):
        X, y = regression_data(9)
        model = make_regressor(RegressorSpec(kind="linear")).fit(X, y)
        back = regressor_from_dict(model.to_dict())
        np.testing.assert_allclose(back.predict(X), model.predict(X))


@pytest.mark.parametrize("kwargs", [dict(kind="forest"), dict(n_rounds=0), dict(max_depth=0),
                                    dict(learning_rate=0.0), dict(subsample=1.5)])
def test_spec_validation(kwargs):
    with pytest.raises(ParameterError):
        RegressorSpec(**kwargs)


def test_unknown_kind_in_dict():
    with pytest.raises(ParameterError):
        regressor_from_dict({"kind": "svm"})
