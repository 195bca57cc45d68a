import numpy as np
import pytest

from malmas.errors import ConfigError, EvalError
from malmas.evaluator import GradientBoosting, LogisticRegressionGD, ModelSpec, auc


def separable(n=120, seed=0):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(n, 3))
    y = (X[:, 0] + 0.5 * X[:, 1] > 0).astype(float)
    return X, y


def noise_problem(n=300, seed=1):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(n, 4))
    y = rng.integers(0, 2, size=n).astype(float)
    return X, y


class TestModelSpec:
    def test_defaults(self):
        spec = ModelSpec()
        assert spec.kind == "builtin_gbdt"
        assert (spec.trees, spec.learning_rate, spec.max_depth) == (100, 0.1, 3)

    def test_external_defaults_via_make(self):
        spec = ModelSpec.make("external", external_cmd="cmd")
        assert (spec.trees, spec.learning_rate) == (500, 0.02)

    def test_external_simple_mode(self):
        spec = ModelSpec.make("external", simple=True, external_cmd="cmd")
        assert spec.trees == 50

    def test_make_overrides_win(self):
        spec = ModelSpec.make("external", trees=7, external_cmd="cmd")
        assert spec.trees == 7

    def test_external_requires_command(self):
        with pytest.raises(ConfigError, match="external_cmd"):
            ModelSpec(kind="external")

    def test_unknown_kind(self):
        with pytest.raises(ConfigError, match="unknown model kind"):
            ModelSpec(kind="forest")

    def test_invalid_hyperparameters(self):
        with pytest.raises(ConfigError):
            ModelSpec(trees=0)
        with pytest.raises(ConfigError):
            ModelSpec(learning_rate=0.0)

    def test_dict_round_trip(self):
        spec = ModelSpec(kind="builtin_logreg", trees=42, learning_rate=0.3)
        assert ModelSpec.from_dict(spec.to_dict()) == spec


class TestLogisticRegression:
    def test_separable_auc_high(self):
        X, y = separable()
        model = LogisticRegressionGD().fit(X, y)
        scores = model.predict_proba(X)[:, 1]
        assert auc(scores, y) >= 0.99

    def test_probabilities_sum_to_one(self):
        X, y = separable()
        proba = LogisticRegressionGD().fit(X, y).predict_proba(X)
        assert np.allclose(proba.sum(axis=1), 1.0)

    def test_multiclass_columns_follow_classes(self):
        rng = np.random.default_rng(2)
        X = rng.normal(size=(90, 2))
        y = np.repeat([0.0, 1.0, 2.0], 30)
        X[y == 1.0, 0] += 4.0
        X[y == 2.0, 1] += 4.0
        model = LogisticRegressionGD().fit(X, y)
        proba = model.predict_proba(X)
        assert proba.shape == (90, 3)
        assert model.classes_.tolist() == [0.0, 1.0, 2.0]
        # The argmax class should usually match on clearly separated data.
        predicted = model.classes_[proba.argmax(axis=1)]
        assert (predicted == y).mean() >= 0.95

    def test_deterministic(self):
        X, y = separable()
        a = LogisticRegressionGD().fit(X, y).predict_proba(X)
        b = LogisticRegressionGD().fit(X, y).predict_proba(X)
        assert np.array_equal(a, b)

    def test_constant_feature_tolerated(self):
        X, y = separable()
        X = np.column_stack([X, np.ones(len(X))])
        proba = LogisticRegressionGD().fit(X, y).predict_proba(X)
        assert np.isfinite(proba).all()


class TestGradientBoosting:
    def test_separable_auc_high(self):
        X, y = separable()
        model = GradientBoosting("classification", trees=40, max_depth=2).fit(X, y)
        assert auc(model.predict_proba(X)[:, 1], y) >= 0.99

    def test_train_losses_nonincreasing(self):
        X, y = separable()
        model = GradientBoosting("classification", trees=60, max_depth=2).fit(X, y)
        losses = model.train_losses_
        assert len(losses) == 60
        assert all(b <= a + 1e-9 for a, b in zip(losses, losses[1:]))

    def test_regression_losses_nonincreasing(self):
        rng = np.random.default_rng(3)
        X = rng.normal(size=(150, 3))
        y = 2.0 * X[:, 0] - X[:, 1] + 0.1 * rng.normal(size=150)
        model = GradientBoosting("regression", trees=60, max_depth=2).fit(X, y)
        losses = model.train_losses_
        assert all(b <= a + 1e-9 for a, b in zip(losses, losses[1:]))
        assert losses[-1] < losses[0]

    def test_noise_auc_near_half(self):
        X, y = noise_problem()
        model = GradientBoosting("classification", trees=20, max_depth=2).fit(X, y)
        rng = np.random.default_rng(9)
        X_new = rng.normal(size=(300, 4))
        y_new = rng.integers(0, 2, size=300).astype(float)
        value = auc(model.predict_proba(X_new)[:, 1], y_new)
        assert 0.4 <= value <= 0.6

    def test_deterministic(self):
        X, y = separable()
        a = GradientBoosting("classification", trees=25).fit(X, y).predict_proba(X)
        b = GradientBoosting("classification", trees=25).fit(X, y).predict_proba(X)
        assert np.array_equal(a, b)

    def test_constant_column_changes_nothing(self):
        X, y = separable()
        base = GradientBoosting("classification", trees=25).fit(X, y).predict_proba(X)
        X_extra = np.column_stack([X, np.full(len(X), 3.0)])
        extra = GradientBoosting("classification", trees=25).fit(X_extra, y)
        assert np.array_equal(extra.predict_proba(X_extra), base)

    def test_regression_predict(self):
        rng = np.random.default_rng(4)
        X = rng.normal(size=(200, 2))
        y = 3.0 * X[:, 0]
        model = GradientBoosting("regression", trees=80, max_depth=3).fit(X, y)
        preds = model.predict(X)
        assert float(np.mean((preds - y) ** 2)) < 0.5

    def test_multiclass_proba(self):
        rng = np.random.default_rng(5)
        X = rng.normal(size=(90, 2))
        y = np.repeat([0.0, 1.0, 2.0], 30)
        X[y == 1.0, 0] += 4.0
        X[y == 2.0, 1] += 4.0
        model = GradientBoosting("classification", trees=30, max_depth=2).fit(X, y)
        proba = model.predict_proba(X)
        assert proba.shape == (90, 3)
        assert np.allclose(proba.sum(axis=1), 1.0)
        predicted = model.classes_[proba.argmax(axis=1)]
        assert (predicted == y).mean() >= 0.95

    def test_wrong_task_methods_rejected(self):
        X, y = separable()
        clf = GradientBoosting("classification", trees=5).fit(X, y)
        with pytest.raises(EvalError, match="predict_proba"):
            clf.predict(X)
        reg = GradientBoosting("regression", trees=5).fit(X, y)
        with pytest.raises(EvalError, match="classification"):
            reg.predict_proba(X)

    def test_single_class_rejected(self):
        X = np.zeros((10, 2))
        with pytest.raises(EvalError, match="two classes"):
            GradientBoosting("classification", trees=5).fit(X, np.ones(10))

    def test_unknown_task_rejected(self):
        with pytest.raises(ConfigError, match="unknown task"):
            GradientBoosting("ranking")
