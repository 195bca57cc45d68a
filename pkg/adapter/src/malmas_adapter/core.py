"""Request validation and seeded cross-validated scoring."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from sklearn.ensemble import GradientBoostingClassifier, GradientBoostingRegressor
from sklearn.metrics import roc_auc_score

from .folds import effective_folds, fold_assignment

TASKS = ("classification", "regression")
METRICS = ("auc", "accuracy", "nrmse")


@dataclass(frozen=True)
class AdapterConfig:
    """Serving defaults; each request may override trees, learning rate, folds."""

    trees: int = 500
    learning_rate: float = 0.02
    folds: int = 5

    def __post_init__(self) -> None:
        if self.trees < 1:
            raise ValueError("trees must be positive")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.folds < 2:
            raise ValueError("folds must be >= 2")


def _matrix(payload: dict) -> tuple[np.ndarray, np.ndarray]:
    columns = payload.get("columns")
    rows = payload.get("rows")
    target = payload.get("target")
    if not isinstance(columns, list) or not columns:
        raise ValueError("request needs a non-empty 'columns' list")
    if not isinstance(rows, list) or not rows:
        raise ValueError("request needs a non-empty 'rows' list")
    if not isinstance(target, list) or len(target) != len(rows):
        raise ValueError("'target' must list one value per row")
    X = np.asarray(rows, dtype=float)
    if X.ndim != 2 or X.shape[1] != len(columns):
        raise ValueError("'rows' must be rectangular with one value per column")
    if not np.isfinite(X).all():
        raise ValueError("'rows' contain non-finite values")
    y = np.asarray(target, dtype=float)
    if not np.isfinite(y).all():
        raise ValueError("'target' contains non-finite values")
    return X, y


def _fold_score(proba_or_pred, y_val: np.ndarray, metric: str, task: str, classes: np.ndarray) -> float:
    if task == "regression":
        spread = float(y_val.max() - y_val.min())
        if spread == 0.0:
            raise ValueError("validation target is constant")
        rmse = float(np.sqrt(np.mean((proba_or_pred - y_val) ** 2)))
        return rmse / spread
    if metric == "accuracy":
        predicted = classes[np.argmax(proba_or_pred, axis=1)]
        return float(np.mean(predicted == y_val))
    # Macro one-vs-rest AUC; for two classes this is the plain positive-class
    # AUC.  Classes absent from the fold (or filling it) are skipped.
    if len(classes) == 2:
        if len(np.unique(y_val)) < 2:
            raise ValueError("validation fold holds a single class")
        return float(roc_auc_score(y_val == classes[1], proba_or_pred[:, 1]))
    per_class = []
    for idx, cls in enumerate(classes):
        positives = y_val == cls
        if positives.all() or not positives.any():
            continue
        per_class.append(float(roc_auc_score(positives, proba_or_pred[:, idx])))
    if not per_class:
        raise ValueError("no class usable for one-vs-rest AUC")
    return float(np.mean(per_class))


def evaluate_request(payload: dict, config: AdapterConfig | None = None) -> float:
    """Mean CV metric for one protocol request; raises ValueError on bad input."""
    config = config or AdapterConfig()
    op = payload.get("op")
    if op != "evaluate":
        raise ValueError(f"unknown op {op!r}")
    task = payload.get("task")
    if task not in TASKS:
        raise ValueError(f"unknown task {task!r}")
    metric = payload.get("metric")
    if metric not in METRICS:
        raise ValueError(f"unknown metric {metric!r}")
    if task == "classification" and metric == "nrmse":
        raise ValueError("metric 'nrmse' does not apply to classification")
    if task == "regression" and metric != "nrmse":
        raise ValueError(f"metric {metric!r} does not apply to regression")

    X, y = _matrix(payload)
    model_over = payload.get("model") or {}
    trees = int(model_over.get("trees", config.trees))
    learning_rate = float(model_over.get("learning_rate", config.learning_rate))
    if trees < 1 or learning_rate <= 0:
        raise ValueError("model overrides must keep trees and learning_rate positive")
    folds = int(payload.get("folds", config.folds))
    seed = int(payload.get("seed", 0))
    # sklearn's random_state only spans 32 bits; callers may derive wider seeds.
    model_seed = seed % (2**32)

    if task == "classification" and len(np.unique(y)) < 2:
        raise ValueError("classification target holds a single class")
    k = effective_folds(y, task, folds)
    assignment = fold_assignment(y, task, k, seed)

    values = []
    for f in range(k):
        val = assignment == f
        if task == "classification":
            model = GradientBoostingClassifier(
                n_estimators=trees, learning_rate=learning_rate, random_state=model_seed
            ).fit(X[~val], y[~val])
            scored = model.predict_proba(X[val])
            classes = np.asarray(model.classes_, dtype=float)
        else:
            model = GradientBoostingRegressor(
                n_estimators=trees, learning_rate=learning_rate, random_state=model_seed
            ).fit(X[~val], y[~val])
            scored = model.predict(X[val])
            classes = np.empty(0)
        try:
            values.append(_fold_score(scored, y[val], metric, task, classes))
        except ValueError:
            continue
    if not values:
        raise ValueError("no fold produced a usable metric value")
    return float(np.mean(values))
