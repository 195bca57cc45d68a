"""Model training, metrics, marginal-gain attribution, external adapter client."""

from .cv import Evaluator, fold_assignment, score_split, train_eval
from .external import ExternalEvaluator
from .metrics import (
    MAXIMIZE, MINIMIZE, EvalReport, Metric, accuracy, auc, compute_gain,
    default_metric, macro_ovr_auc, make_metric, mean_rank, nrmse,
)
from .models import GradientBoosting, LogisticRegressionGD, ModelSpec

__all__ = [
    "EvalReport", "Evaluator", "ExternalEvaluator", "GradientBoosting",
    "LogisticRegressionGD", "MAXIMIZE", "MINIMIZE", "Metric", "ModelSpec",
    "accuracy", "auc", "compute_gain", "default_metric", "fold_assignment",
    "macro_ovr_auc", "make_metric", "mean_rank", "nrmse", "score_split",
    "train_eval",
]
