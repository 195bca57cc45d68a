"""Built-in downstream models, written directly against numpy.

Two model families: L2 logistic regression fit by full-batch gradient descent
(classification only) and gradient boosting over depth-limited regression
trees with exact greedy splits (logistic loss for classification, one-vs-rest
for multiclass, squared loss for regression). Both are deterministic: split
search scans features in index order and keeps the first best split on ties,
so repeated fits on the same data produce identical models.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import ConfigError, EvalError

MODEL_KINDS = ("builtin_logreg", "builtin_gbdt", "external")

# Boosting defaults for external evaluators; --simple trades trees for speed.
EXTERNAL_DEFAULT_TREES = 500
EXTERNAL_DEFAULT_LEARNING_RATE = 0.02
EXTERNAL_SIMPLE_TREES = 50

_LEAF_LIMIT = 4.0
_PROB_EPS = 1e-6


@dataclass(frozen=True)
class ModelSpec:
    kind: str = "builtin_gbdt"
    trees: int = 100
    learning_rate: float = 0.1
    max_depth: int = 3
    l2: float = 1e-3
    external_cmd: str = ""

    def __post_init__(self):
        if self.kind not in MODEL_KINDS:
            raise ConfigError(f"unknown model kind {self.kind!r}")
        if self.kind == "external" and not self.external_cmd:
            raise ConfigError("external model needs external_cmd")
        if self.trees < 1 or self.max_depth < 1:
            raise ConfigError("trees and max_depth must be >= 1")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be > 0")

    @classmethod
    def make(cls, kind: str, *, simple: bool = False, **overrides) -> "ModelSpec":
        """Build a spec with kind-appropriate defaults.

        The external adapter defaults to the 500-tree / 0.02 setting, dropped
        to 50 trees when `simple` is set.
        """
        if kind == "external":
            overrides.setdefault(
                "trees", EXTERNAL_SIMPLE_TREES if simple else EXTERNAL_DEFAULT_TREES
            )
            overrides.setdefault("learning_rate", EXTERNAL_DEFAULT_LEARNING_RATE)
        return cls(kind=kind, **overrides)

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "trees": self.trees,
            "learning_rate": self.learning_rate,
            "max_depth": self.max_depth,
            "l2": self.l2,
            "external_cmd": self.external_cmd,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ModelSpec":
        return cls(
            kind=data.get("kind", "builtin_gbdt"),
            trees=int(data.get("trees", 100)),
            learning_rate=float(data.get("learning_rate", 0.1)),
            max_depth=int(data.get("max_depth", 3)),
            l2=float(data.get("l2", 1e-3)),
            external_cmd=data.get("external_cmd", ""),
        )


def _sigmoid(z: np.ndarray) -> np.ndarray:
    return 1.0 / (1.0 + np.exp(-np.clip(z, -30.0, 30.0)))


def _logloss(prob: np.ndarray, y01: np.ndarray) -> float:
    p = np.clip(prob, _PROB_EPS, 1.0 - _PROB_EPS)
    return float(-np.mean(y01 * np.log(p) + (1.0 - y01) * np.log(1.0 - p)))


class LogisticRegressionGD:
    """L2 logistic regression by full-batch gradient descent.

    Fixed 500 iterations at step 0.1; features are z-scored on the fit data
    and the moments reused at prediction time. Multiclass is one-vs-rest with
    normalized per-class probabilities. Classification only.
    """

    def __init__(self, iterations: int = 500, step: float = 0.1, l2: float = 1e-3):
        self.iterations = iterations
        self.step = step
        self.l2 = l2
        self.classes_: np.ndarray | None = None

    def fit(self, X: np.ndarray, y: np.ndarray) -> "LogisticRegressionGD":
        X = np.asarray(X, dtype=float)
        y = np.asarray(y, dtype=float)
        self._mean = X.mean(axis=0) if X.size else np.zeros(X.shape[1])
        std = X.std(axis=0) if X.size else np.ones(X.shape[1])
        self._std = np.where(std < 1e-12, 1.0, std)
        Xs = (X - self._mean) / self._std
        self.classes_ = np.unique(y)
        self._weights = []
        self._biases = []
        targets = (
            [self.classes_[1]] if len(self.classes_) == 2 else list(self.classes_)
        )
        for cls in targets:
            w, b = self._fit_binary(Xs, (y == cls).astype(float))
            self._weights.append(w)
            self._biases.append(b)
        return self

    def _fit_binary(self, Xs: np.ndarray, y01: np.ndarray) -> tuple[np.ndarray, float]:
        n, d = Xs.shape
        w = np.zeros(d)
        b = 0.0
        for _ in range(self.iterations):
            p = _sigmoid(Xs @ w + b)
            err = p - y01
            w -= self.step * (Xs.T @ err / n + self.l2 * w)
            b -= self.step * float(err.mean())
        return w, b

    def predict_proba(self, X: np.ndarray) -> np.ndarray:
        Xs = (np.asarray(X, dtype=float) - self._mean) / self._std
        scores = np.column_stack([
            _sigmoid(Xs @ w + b) for w, b in zip(self._weights, self._biases)
        ])
        if len(self.classes_) == 2:
            return np.column_stack([1.0 - scores[:, 0], scores[:, 0]])
        total = scores.sum(axis=1, keepdims=True)
        total = np.where(total < 1e-12, 1.0, total)
        return scores / total


@dataclass
class _TreeNode:
    value: float = 0.0
    feature: int = -1
    threshold: float = 0.0
    left: "_TreeNode | None" = None
    right: "_TreeNode | None" = None

    def is_leaf(self) -> bool:
        return self.left is None


def _leaf_value(g_sum: float, h_sum: float, l2: float) -> float:
    return float(np.clip(g_sum / (h_sum + l2), -_LEAF_LIMIT, _LEAF_LIMIT))


def _build_tree(X, g, h, rows, depth, max_depth, l2) -> _TreeNode:
    g_sum = float(g[rows].sum())
    h_sum = float(h[rows].sum())
    node = _TreeNode(value=_leaf_value(g_sum, h_sum, l2))
    if depth >= max_depth or len(rows) < 2:
        return node

    parent_score = g_sum * g_sum / (h_sum + l2)
    best_gain = 1e-12
    best = None
    for j in range(X.shape[1]):
        values = X[rows, j]
        order = np.argsort(values, kind="mergesort")
        vs = values[order]
        if vs[0] == vs[-1]:
            continue
        gl = np.cumsum(g[rows][order])[:-1]
        hl = np.cumsum(h[rows][order])[:-1]
        valid = vs[1:] != vs[:-1]
        gain = (
            gl * gl / (hl + l2)
            + (g_sum - gl) ** 2 / (h_sum - hl + l2)
            - parent_score
        )
        gain = np.where(valid, gain, -np.inf)
        i = int(np.argmax(gain))
        if gain[i] > best_gain:
            best_gain = float(gain[i])
            # Split as x <= vs[i]; using an observed value avoids midpoint
            # rounding ever producing an empty side.
            best = (j, float(vs[i]))
    if best is None:
        return node

    node.feature, node.threshold = best
    mask = X[rows, node.feature] <= node.threshold
    node.left = _build_tree(X, g, h, rows[mask], depth + 1, max_depth, l2)
    node.right = _build_tree(X, g, h, rows[~mask], depth + 1, max_depth, l2)
    return node


def _tree_predict(node: _TreeNode, X: np.ndarray, rows: np.ndarray, out: np.ndarray):
    if node.is_leaf():
        out[rows] = node.value
        return
    mask = X[rows, node.feature] <= node.threshold
    _tree_predict(node.left, X, rows[mask], out)
    _tree_predict(node.right, X, rows[~mask], out)


class _Booster:
    """One additive ensemble: base score plus shrunken tree outputs."""

    def __init__(self, base: float):
        self.base = base
        self.trees: list[_TreeNode] = []

    def predict(self, X: np.ndarray, learning_rate: float) -> np.ndarray:
        scores = np.full(len(X), self.base)
        rows = np.arange(len(X))
        out = np.empty(len(X))
        for tree in self.trees:
            _tree_predict(tree, X, rows, out)
            scores += learning_rate * out
        return scores


class GradientBoosting:
    """Depth-limited gradient boosting with Newton leaf values.

    train_losses_ records the training loss after every boosting iteration
    (mean over classes for one-vs-rest multiclass).
    """

    def __init__(
        self,
        task: str,
        trees: int = 100,
        learning_rate: float = 0.1,
        max_depth: int = 3,
        l2: float = 1e-3,
    ):
        if task not in ("classification", "regression"):
            raise ConfigError(f"unknown task {task!r}")
        self.task = task
        self.trees = trees
        self.learning_rate = learning_rate
        self.max_depth = max_depth
        self.l2 = l2
        self.classes_: np.ndarray | None = None
        self.train_losses_: list[float] = []

    def fit(self, X: np.ndarray, y: np.ndarray) -> "GradientBoosting":
        X = np.asarray(X, dtype=float)
        y = np.asarray(y, dtype=float)
        if len(X) == 0:
            raise EvalError("cannot fit on an empty split")
        self.train_losses_ = []
        if self.task == "regression":
            self._fit_regression(X, y)
        else:
            self.classes_ = np.unique(y)
            if len(self.classes_) < 2:
                raise EvalError("classification fit needs at least two classes")
            targets = (
                [self.classes_[1]] if len(self.classes_) == 2 else list(self.classes_)
            )
            self._boosters = []
            memberships = []
            for cls in targets:
                y01 = (y == cls).astype(float)
                p0 = float(np.clip(y01.mean(), _PROB_EPS, 1.0 - _PROB_EPS))
                self._boosters.append(_Booster(float(np.log(p0 / (1.0 - p0)))))
                memberships.append(y01)
            self._fit_classification(X, memberships)
        return self

    def _fit_regression(self, X: np.ndarray, y: np.ndarray):
        booster = _Booster(float(y.mean()))
        scores = np.full(len(X), booster.base)
        rows = np.arange(len(X))
        out = np.empty(len(X))
        ones = np.ones(len(X))
        for _ in range(self.trees):
            residual = y - scores
            tree = _build_tree(X, residual, ones, rows, 0, self.max_depth, self.l2)
            booster.trees.append(tree)
            _tree_predict(tree, X, rows, out)
            scores += self.learning_rate * out
            self.train_losses_.append(float(np.mean((y - scores) ** 2)))
        self._regressor = booster

    def _fit_classification(self, X: np.ndarray, memberships: list[np.ndarray]):
        rows = np.arange(len(X))
        out = np.empty(len(X))
        scores = [np.full(len(X), b.base) for b in self._boosters]
        for _ in range(self.trees):
            losses = []
            for idx, booster in enumerate(self._boosters):
                p = _sigmoid(scores[idx])
                g = memberships[idx] - p
                h = p * (1.0 - p)
                tree = _build_tree(X, g, h, rows, 0, self.max_depth, self.l2)
                booster.trees.append(tree)
                _tree_predict(tree, X, rows, out)
                scores[idx] += self.learning_rate * out
                losses.append(_logloss(_sigmoid(scores[idx]), memberships[idx]))
            self.train_losses_.append(float(np.mean(losses)))

    def predict(self, X: np.ndarray) -> np.ndarray:
        if self.task != "regression":
            raise EvalError("predict is for regression; use predict_proba")
        return self._regressor.predict(np.asarray(X, dtype=float), self.learning_rate)

    def predict_proba(self, X: np.ndarray) -> np.ndarray:
        if self.task != "classification":
            raise EvalError("predict_proba is for classification")
        X = np.asarray(X, dtype=float)
        raw = np.column_stack([
            _sigmoid(b.predict(X, self.learning_rate)) for b in self._boosters
        ])
        if len(self.classes_) == 2:
            return np.column_stack([1.0 - raw[:, 0], raw[:, 0]])
        total = raw.sum(axis=1, keepdims=True)
        total = np.where(total < 1e-12, 1.0, total)
        return raw / total
