"""Evaluation metrics: AUC, accuracy, NRMSE, mean rank.

AUC uses the average-rank formula, which equals brute-force pairwise counting
(ties at half weight) exactly: tied scores share the average of their integer
positions, so the numerator is the same half-integer sum either way.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import EvalError

MAXIMIZE = "maximize"
MINIMIZE = "minimize"


@dataclass(frozen=True)
class Metric:
    name: str
    direction: str


_METRICS = {
    "auc": Metric("auc", MAXIMIZE),
    "accuracy": Metric("accuracy", MAXIMIZE),
    "nrmse": Metric("nrmse", MINIMIZE),
}


def make_metric(name: str) -> Metric:
    if name not in _METRICS:
        raise EvalError(f"unknown metric {name!r} (expected one of {sorted(_METRICS)})")
    return _METRICS[name]


def default_metric(task: str) -> Metric:
    return _METRICS["auc"] if task == "classification" else _METRICS["nrmse"]


@dataclass(frozen=True)
class EvalReport:
    feature_name: str
    metric: Metric
    baseline: float
    value: float
    gain: float
    effective: bool


def compute_gain(metric: Metric, baseline: float, value: float) -> tuple[float, bool]:
    gain = value - baseline if metric.direction == MAXIMIZE else baseline - value
    return gain, gain > 0


def _average_ranks(values: np.ndarray) -> np.ndarray:
    """1-based ranks of `values`, ties sharing the average of their positions."""
    order = np.argsort(values, kind="mergesort")
    ranks = np.empty(len(values))
    sorted_values = values[order]
    i = 0
    while i < len(values):
        j = i
        while j + 1 < len(values) and sorted_values[j + 1] == sorted_values[i]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def auc(scores, labels) -> float:
    """P(random positive outscores random negative), ties counting one half."""
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels, dtype=float)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise EvalError("auc needs matching 1-d scores and labels")
    positives = labels == 1.0
    n_pos = int(positives.sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise EvalError("auc needs at least one positive and one negative label")
    ranks = _average_ranks(scores)
    pos_rank_sum = float(ranks[positives].sum())
    return (pos_rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def macro_ovr_auc(score_matrix, labels, classes) -> float:
    """Macro one-vs-rest AUC over the classes usable on this evaluation split.

    A class contributes only when the split has at least one member and one
    non-member of it; with no usable class this raises.
    """
    score_matrix = np.asarray(score_matrix, dtype=float)
    labels = np.asarray(labels, dtype=float)
    per_class = []
    for idx, cls in enumerate(classes):
        member = (labels == cls).astype(float)
        if member.sum() == 0 or member.sum() == len(labels):
            continue
        per_class.append(auc(score_matrix[:, idx], member))
    if not per_class:
        raise EvalError("no class has both members and non-members on this split")
    return float(np.mean(per_class))


def accuracy(predictions, targets) -> float:
    predictions = np.asarray(predictions, dtype=float)
    targets = np.asarray(targets, dtype=float)
    if predictions.shape != targets.shape or predictions.ndim != 1:
        raise EvalError("accuracy needs matching 1-d predictions and targets")
    if len(targets) == 0:
        raise EvalError("accuracy of an empty split is undefined")
    return float((predictions == targets).mean())


def nrmse(predictions, targets) -> float:
    """RMSE divided by the target range of the evaluation split."""
    predictions = np.asarray(predictions, dtype=float)
    targets = np.asarray(targets, dtype=float)
    if predictions.shape != targets.shape or predictions.ndim != 1:
        raise EvalError("nrmse needs matching 1-d predictions and targets")
    if len(targets) < 2:
        raise EvalError("nrmse needs at least two targets")
    spread = float(targets.max() - targets.min())
    if spread <= 0.0:
        raise EvalError("nrmse is undefined for constant targets")
    rmse = float(np.sqrt(np.mean((predictions - targets) ** 2)))
    return rmse / spread


def mean_rank(values, direction: str) -> list[float]:
    """Per-method mean rank across datasets (rows), best = 1, ties averaged.

    NaN entries are excluded pairwise: a row ranks only its present methods,
    and a method's mean covers only rows where it is present.
    """
    values = np.asarray(values, dtype=float)
    if values.ndim != 2 or values.size == 0:
        raise EvalError("mean_rank needs a nonempty dataset x method matrix")
    if direction not in (MAXIMIZE, MINIMIZE):
        raise EvalError(f"unknown direction {direction!r}")
    n_methods = values.shape[1]
    sums = np.zeros(n_methods)
    counts = np.zeros(n_methods)
    for row in values:
        present = ~np.isnan(row)
        if not present.any():
            continue
        keyed = -row[present] if direction == MAXIMIZE else row[present]
        ranks = _average_ranks(keyed)
        sums[present] += ranks
        counts[present] += 1
    means = []
    for j in range(n_methods):
        if counts[j] == 0:
            raise EvalError(f"method column {j} has no usable entries")
        means.append(float(sums[j] / counts[j]))
    return means
