"""Vectorized, total evaluation of feature programs.

Every operator sanitizes its output (non-finite -> 0.0), matching the
preprocessing convention, so evaluation never raises on data and never emits
NaN or infinities. Statistics that depend on the data distribution (z-score
moments, bin edges, group tables, cluster centers) are computed once on the
fitting table and reused verbatim by FittedProgram.apply on any later table.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from datetime import datetime, timezone

import numpy as np

from ..data import Table
from .nodes import (
    Bin, Binary, Clip, Cluster, Col, Compare, DatePart, ElapsedDays,
    GroupAgg, IfThenElse, Literal, Unary, ZScore,
)
from .typecheck import TypedProgram

_EPS = 1e-12

# datetime.fromtimestamp only covers years 1..9999; epoch values outside that
# window are clamped so date_part stays total.
_EPOCH_MIN = -62135596800.0
_EPOCH_MAX = 253402300799.0

_FIT = "fit"
_APPLY = "apply"


def _finite(arr: np.ndarray) -> np.ndarray:
    return np.where(np.isfinite(arr), arr, 0.0)


def fold_unary(op: str, x: float) -> float:
    """Scalar twin of the vector unary ops, used for literal folding."""
    if op == "neg":
        out = -x
    elif op == "abs":
        out = abs(x)
    elif op == "sq":
        out = x * x
    elif op == "sqrt_s":
        out = math.sqrt(max(x, 0.0))
    elif op == "log_s":
        out = math.log1p(max(x, 0.0))
    elif op == "recip_s":
        out = 1.0 / x if abs(x) > _EPS else 0.0
    else:
        raise ValueError(f"unknown unary op {op!r}")
    return out if math.isfinite(out) else 0.0


def fold_binary(op: str, a: float, b: float) -> float:
    """Scalar twin of the vector binary ops, used for literal folding."""
    if op == "add":
        out = a + b
    elif op == "sub":
        out = a - b
    elif op == "mul":
        out = a * b
    elif op == "div_s":
        out = a / b if abs(b) > _EPS else 0.0
    else:
        raise ValueError(f"unknown binary op {op!r}")
    return out if math.isfinite(out) else 0.0


def fold_compare(op: str, a: float, b: float) -> bool:
    if op == "lt":
        return a < b
    if op == "le":
        return a <= b
    if op == "gt":
        return a > b
    if op == "ge":
        return a >= b
    if op == "eq":
        return a == b
    raise ValueError(f"unknown comparison op {op!r}")


def _zscore_stats(values: np.ndarray) -> tuple[float, float]:
    mean = float(values.mean())
    std = float(values.std())
    return mean, std


def _apply_zscore(values: np.ndarray, mean: float, std: float) -> np.ndarray:
    if std < _EPS:
        return np.zeros_like(values)
    return _finite((values - mean) / std)


def _nearest(points: np.ndarray, centers: np.ndarray) -> np.ndarray:
    d2 = ((points[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
    return d2.argmin(axis=1)


def _kmeans(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """k-means++ seeding, Lloyd iterations capped at 100, tol 1e-6.

    Empty clusters keep their previous center; ties in assignment go to the
    lowest center index (argmin behavior).
    """
    n = len(points)
    centers = np.empty((k, points.shape[1]))
    centers[0] = points[int(rng.integers(n))]
    d2 = ((points - centers[0]) ** 2).sum(axis=1)
    for j in range(1, k):
        total = float(d2.sum())
        if total <= 0.0:
            pick = int(rng.integers(n))
        else:
            pick = int(rng.choice(n, p=d2 / total))
        centers[j] = points[pick]
        d2 = np.minimum(d2, ((points - centers[j]) ** 2).sum(axis=1))
    for _ in range(100):
        assign = _nearest(points, centers)
        moved = 0.0
        for j in range(k):
            members = points[assign == j]
            if len(members) == 0:
                continue
            new_center = members.mean(axis=0)
            moved = max(moved, float(np.linalg.norm(new_center - centers[j])))
            centers[j] = new_center
        if moved < 1e-6:
            break
    return centers


@dataclass(frozen=True)
class FittedProgram:
    """A typed program plus the statistics frozen at fit time."""

    typed: TypedProgram
    seed: int
    stats: dict

    def apply(self, table: Table) -> np.ndarray:
        runner = _Runner(table, self.seed, _APPLY, dict(self.stats))
        with np.errstate(all="ignore"):
            return runner.eval(self.typed.program.body)


class _Runner:
    def __init__(self, table: Table, seed: int, mode: str, stats: dict):
        self.table = table
        self.rows = table.row_count
        self.seed = seed
        self.mode = mode
        self.stats = stats
        self._next_id = 0

    def _claim(self) -> int:
        nid = self._next_id
        self._next_id += 1
        return nid

    def eval(self, node) -> np.ndarray:
        nid = self._claim()
        if isinstance(node, Literal):
            return _finite(np.full(self.rows, node.value))
        if isinstance(node, Col):
            return _finite(np.asarray(self.table.columns[node.name], dtype=float))
        if isinstance(node, Unary):
            return self._unary(node)
        if isinstance(node, Binary):
            return self._binary(node)
        if isinstance(node, Compare):
            return self._compare(node)
        if isinstance(node, IfThenElse):
            cond = self.eval(node.cond)
            then = self.eval(node.then)
            orelse = self.eval(node.orelse)
            return _finite(np.where(cond != 0.0, then, orelse))
        if isinstance(node, GroupAgg):
            return self._group_agg(node, nid)
        if isinstance(node, Bin):
            return self._bin(node, nid)
        if isinstance(node, Clip):
            return _finite(np.clip(self.eval(node.arg), node.lo, node.hi))
        if isinstance(node, ZScore):
            return self._zscore(node, nid)
        if isinstance(node, Cluster):
            return self._cluster(node, nid)
        if isinstance(node, DatePart):
            return self._date_part(node)
        if isinstance(node, ElapsedDays):
            first = self.eval(node.first)
            second = self.eval(node.second)
            return _finite((first - second) / 86400.0)
        raise TypeError(f"not an expression node: {node!r}")

    def _unary(self, node: Unary) -> np.ndarray:
        x = self.eval(node.arg)
        if node.op == "neg":
            out = -x
        elif node.op == "abs":
            out = np.abs(x)
        elif node.op == "sq":
            out = x * x
        elif node.op == "sqrt_s":
            out = np.sqrt(np.maximum(x, 0.0))
        elif node.op == "log_s":
            out = np.log1p(np.maximum(x, 0.0))
        else:  # recip_s
            out = np.divide(1.0, x, out=np.zeros_like(x), where=np.abs(x) > _EPS)
        return _finite(out)

    def _binary(self, node: Binary) -> np.ndarray:
        a = self.eval(node.left)
        b = self.eval(node.right)
        if node.op == "add":
            out = a + b
        elif node.op == "sub":
            out = a - b
        elif node.op == "mul":
            out = a * b
        else:  # div_s
            out = np.divide(a, b, out=np.zeros_like(a), where=np.abs(b) > _EPS)
        return _finite(out)

    def _compare(self, node: Compare) -> np.ndarray:
        a = self.eval(node.left)
        b = self.eval(node.right)
        if node.op == "lt":
            out = a < b
        elif node.op == "le":
            out = a <= b
        elif node.op == "gt":
            out = a > b
        elif node.op == "ge":
            out = a >= b
        else:  # eq
            out = a == b
        return out.astype(float)

    def _zscore(self, node: ZScore, nid: int) -> np.ndarray:
        x = self.eval(node.arg)
        if self.mode == _FIT:
            self.stats[nid] = _zscore_stats(x)
        mean, std = self.stats[nid]
        return _apply_zscore(x, mean, std)

    def _bin(self, node: Bin, nid: int) -> np.ndarray:
        x = self.eval(node.arg)
        if self.mode == _FIT:
            lo, hi = float(x.min()), float(x.max())
            self.stats[nid] = (lo, hi)
        lo, hi = self.stats[nid]
        if hi - lo < _EPS:
            return np.zeros_like(x)
        width = (hi - lo) / node.n_bins
        idx = np.floor((x - lo) / width)
        return _finite(np.clip(idx, 0, node.n_bins - 1))

    def _group_agg(self, node: GroupAgg, nid: int) -> np.ndarray:
        key = self.eval(node.key)
        value = self.eval(node.value)
        if self.mode == _FIT:
            groups = {}
            for k in np.unique(key):
                members = value[key == k]
                groups[float(k)] = self._aggregate(node.agg, members)
            self.stats[nid] = (groups, self._aggregate(node.agg, value))
        groups, fallback = self.stats[nid]
        out = np.full(self.rows, fallback)
        for k, v in groups.items():
            out[key == k] = v
        return _finite(out)

    @staticmethod
    def _aggregate(agg: str, values: np.ndarray) -> float:
        if agg == "mean":
            return float(values.mean())
        if agg == "std":
            return float(values.std())
        if agg == "min":
            return float(values.min())
        if agg == "max":
            return float(values.max())
        return float(len(values))  # count

    def _cluster(self, node: Cluster, nid: int) -> np.ndarray:
        raw = [np.asarray(self.table.columns[c.name], dtype=float) for c in node.cols]
        raw = [_finite(col) for col in raw]
        if self.mode == _FIT:
            moments = [_zscore_stats(col) for col in raw]
            points = np.column_stack(
                [_apply_zscore(col, m, s) for col, (m, s) in zip(raw, moments)]
            )
            rng = np.random.default_rng(self.seed)
            centers = _kmeans(points, node.k, rng)
            self.stats[nid] = (moments, centers)
        moments, centers = self.stats[nid]
        points = np.column_stack(
            [_apply_zscore(col, m, s) for col, (m, s) in zip(raw, moments)]
        )
        return _nearest(points, centers).astype(float)

    def _date_part(self, node: DatePart) -> np.ndarray:
        epoch = _finite(np.asarray(self.table.columns[node.col.name], dtype=float))
        epoch = np.clip(epoch, _EPOCH_MIN, _EPOCH_MAX)
        out = np.empty(self.rows)
        for i, value in enumerate(epoch):
            dt = datetime.fromtimestamp(value, tz=timezone.utc)
            if node.part == "year":
                out[i] = dt.year
            elif node.part == "month":
                out[i] = dt.month
            elif node.part == "day":
                out[i] = dt.day
            elif node.part == "dow":
                out[i] = dt.weekday()
            else:  # hour
                out[i] = dt.hour
        return out


def fit_evaluate(typed: TypedProgram, table: Table, seed: int) -> tuple[np.ndarray, FittedProgram]:
    """Fit the program's statistics on `table` and return (values, fitted).

    The returned values are exactly what fitted.apply(table) would produce;
    the fit pass computes statistics and then applies them, so train and
    apply paths share one code path.
    """
    runner = _Runner(table, seed, _FIT, {})
    # Overflow and invalid-value warnings are expected: every op sanitizes
    # non-finite results to 0.0, so the warnings carry no signal.
    with np.errstate(all="ignore"):
        values = runner.eval(typed.program.body)
    return values, FittedProgram(typed, seed, runner.stats)


def evaluate(typed: TypedProgram, table: Table, seed: int) -> np.ndarray:
    """One value per row; total by construction (never NaN or inf)."""
    values, _ = fit_evaluate(typed, table, seed)
    return values
