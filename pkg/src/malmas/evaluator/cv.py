"""Cross-validated model evaluation and per-candidate marginal gains.

Fold assignment is a pure function of (target, task, folds, seed), so the
baseline and every candidate evaluation in a round share identical folds and
the gain comparison is paired. The same algorithm is reimplemented by the
external adapter, which receives only (target, task, folds, seed) on the wire:

    perm = default_rng(seed).permutation(n)
    regression:      row perm[i] goes to fold i mod folds
    classification:  classes in ascending value order; rows of each class in
                     perm order take folds from one shared counter mod folds

The shared counter keeps fold sizes balanced while stratifying every class.
"""

from __future__ import annotations

import hashlib
import threading
import warnings

import numpy as np

from ..data import Table
from ..errors import EvalError
from .metrics import (
    EvalReport, Metric, accuracy, auc, compute_gain, macro_ovr_auc, nrmse,
)
from .models import GradientBoosting, LogisticRegressionGD, ModelSpec


def fold_assignment(y: np.ndarray, task: str, folds: int, seed: int) -> np.ndarray:
    y = np.asarray(y, dtype=float)
    n = len(y)
    if folds < 2:
        raise EvalError("folds must be >= 2")
    if n < folds:
        raise EvalError(f"cannot make {folds} folds from {n} rows")
    rng = np.random.default_rng(seed)
    perm = rng.permutation(n)
    fold = np.empty(n, dtype=int)
    if task == "classification":
        counter = 0
        for cls in np.unique(y):
            for i in perm:
                if y[i] == cls:
                    fold[i] = counter % folds
                    counter += 1
    else:
        for pos, i in enumerate(perm):
            fold[i] = pos % folds
    return fold


def effective_folds(y: np.ndarray, task: str, folds: int) -> int:
    """Shrink the fold count when a class is too small to appear in every fold."""
    n = len(y)
    limit = max(2, min(folds, n))
    if task == "classification":
        _, counts = np.unique(np.asarray(y, dtype=float), return_counts=True)
        smallest = int(counts.min())
        if smallest >= 2:
            limit = min(limit, max(2, smallest))
    if limit != folds:
        warnings.warn(f"refolding from {folds} to {limit} folds to keep classes covered")
    return limit


def _make_model(spec: ModelSpec, task: str):
    if spec.kind == "builtin_logreg":
        if task != "classification":
            raise EvalError("builtin_logreg only supports classification tasks")
        return LogisticRegressionGD(l2=spec.l2)
    if spec.kind == "builtin_gbdt":
        return GradientBoosting(
            task,
            trees=spec.trees,
            learning_rate=spec.learning_rate,
            max_depth=spec.max_depth,
            l2=spec.l2,
        )
    raise EvalError(f"no local model for kind {spec.kind!r}")


def score_split(model, metric: Metric, X_val: np.ndarray, y_val: np.ndarray, task: str) -> float:
    """Metric value of a fitted model on one evaluation split."""
    if task == "classification":
        proba = model.predict_proba(X_val)
        classes = model.classes_
        if metric.name == "accuracy":
            predicted = np.asarray(classes)[np.argmax(proba, axis=1)]
            return accuracy(predicted, y_val)
        if metric.name == "auc":
            if len(classes) == 2:
                return auc(proba[:, 1], (y_val == classes[1]).astype(float))
            return macro_ovr_auc(proba, y_val, classes)
        raise EvalError(f"metric {metric.name!r} does not apply to classification")
    if metric.name != "nrmse":
        raise EvalError(f"metric {metric.name!r} does not apply to regression")
    return nrmse(model.predict(X_val), y_val)


def external_request(table: Table, spec: ModelSpec, metric: Metric, folds: int, seed: int) -> dict:
    names = table.feature_names()
    return {
        "op": "evaluate",
        "task": table.task,
        "metric": metric.name,
        "columns": list(names),
        "rows": table.matrix(names).tolist(),
        "target": np.asarray(table.columns[table.target], dtype=float).tolist(),
        "folds": folds,
        "seed": seed,
        "model": {"trees": spec.trees, "learning_rate": spec.learning_rate},
    }


def train_eval(
    table: Table,
    spec: ModelSpec,
    metric: Metric,
    folds: int,
    seed: int,
    external=None,
) -> float:
    """Mean metric across seeded k-fold CV of the model on the table's features."""
    if spec.kind == "external":
        if external is None:
            raise EvalError("external model needs a running adapter client")
        return external.evaluate(external_request(table, spec, metric, folds, seed))

    X = table.matrix()
    y = np.asarray(table.columns[table.target], dtype=float)
    k = effective_folds(y, table.task, folds)
    assignment = fold_assignment(y, table.task, k, seed)
    values = []
    for f in range(k):
        val_mask = assignment == f
        train_mask = ~val_mask
        model = _make_model(spec, table.task).fit(X[train_mask], y[train_mask])
        try:
            values.append(score_split(model, metric, X[val_mask], y[val_mask], table.task))
        except EvalError as exc:
            warnings.warn(f"fold {f} skipped: {exc}")
    if not values:
        raise EvalError("no fold produced a usable metric value")
    return float(np.mean(values))


class Evaluator:
    """Caches the baseline per column set and scores candidates against it.

    Candidates bit-identical to an existing column short-circuit to gain 0
    without training (the exact-duplicate guard). In batch mode all novel
    candidates are added at once and share the joint value; attribution is
    coarse but evaluation cost drops to a single CV run per round.
    """

    def __init__(
        self,
        spec: ModelSpec,
        metric: Metric,
        folds: int,
        seed: int,
        external=None,
        batch: bool = False,
    ):
        self.spec = spec
        self.metric = metric
        self.folds = folds
        self.seed = seed
        self.external = external
        self.batch = batch
        self._cache: dict[tuple[str, ...], float] = {}
        self._lock = threading.Lock()

    def baseline(self, table: Table) -> float:
        key = table.feature_names()
        with self._lock:
            if key in self._cache:
                return self._cache[key]
        value = train_eval(table, self.spec, self.metric, self.folds, self.seed, self.external)
        with self._lock:
            self._cache[key] = value
        return value

    def _duplicate_of(self, table: Table, values: np.ndarray) -> str | None:
        for name in table.feature_names():
            if np.array_equal(values, table.columns[name]):
                return name
        return None

    def _duplicate_report(self, name: str, baseline: float) -> EvalReport:
        return EvalReport(
            feature_name=name,
            metric=self.metric,
            baseline=baseline,
            value=baseline,
            gain=0.0,
            effective=False,
        )

    def marginal(self, table: Table, name: str, values: np.ndarray) -> EvalReport:
        baseline = self.baseline(table)
        values = np.asarray(values, dtype=float)
        if self._duplicate_of(table, values) is not None:
            return self._duplicate_report(name, baseline)
        extended = table.with_column(name, values)
        value = train_eval(
            extended, self.spec, self.metric, self.folds, self.seed, self.external
        )
        gain, effective = compute_gain(self.metric, baseline, value)
        return EvalReport(
            feature_name=name,
            metric=self.metric,
            baseline=baseline,
            value=value,
            gain=gain,
            effective=effective,
        )

    def evaluate_candidates(
        self, table: Table, candidates: list[tuple[str, np.ndarray]]
    ) -> list[EvalReport]:
        if not self.batch:
            return [self.marginal(table, name, values) for name, values in candidates]

        baseline = self.baseline(table)
        joint = table
        novel: list[str] = []
        reports: dict[str, EvalReport] = {}
        for name, values in candidates:
            values = np.asarray(values, dtype=float)
            if self._duplicate_of(joint, values) is not None:
                reports[name] = self._duplicate_report(name, baseline)
                continue
            joint = joint.with_column(name, values)
            novel.append(name)
        if novel:
            value = train_eval(
                joint, self.spec, self.metric, self.folds, self.seed, self.external
            )
            gain, effective = compute_gain(self.metric, baseline, value)
            for name in novel:
                reports[name] = EvalReport(
                    feature_name=name,
                    metric=self.metric,
                    baseline=baseline,
                    value=value,
                    gain=gain,
                    effective=effective,
                )
        return [reports[name] for name, _ in candidates]

    def fold_hash(self, table: Table) -> str:
        """Digest of the fold assignment this evaluator would use on the table."""
        y = np.asarray(table.columns[table.target], dtype=float)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            k = effective_folds(y, table.task, self.folds)
        assignment = fold_assignment(y, table.task, k, self.seed)
        return hashlib.sha256(assignment.astype(np.int64).tobytes()).hexdigest()[:16]
