"""Tabular data loading, typing, preprocessing, and splitting.

A Table is an immutable column store. Raw tables (straight from CSV) keep
categorical columns as object arrays of strings; encoded tables hold float64
everywhere and are what the rest of the pipeline consumes. The Preprocessor is
fitted on the training split only, so category codes never leak information
from held-out rows.
"""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field, replace
from datetime import datetime, timezone

import numpy as np

from .errors import DataError

NUMERIC = "numeric"
CATEGORICAL = "categorical"
DATETIME = "datetime"
BOOLEAN = "boolean"
KINDS = (NUMERIC, CATEGORICAL, DATETIME, BOOLEAN)

CLASSIFICATION = "classification"
REGRESSION = "regression"

_BOOL_TOKENS = {"true": 1.0, "false": 0.0, "0": 0.0, "1": 1.0}

# Placeholder category for missing values, and the code used for categories
# never seen during fit.
MISSING_CATEGORY = "NA"
UNSEEN_CODE = -1.0


@dataclass(frozen=True)
class ColumnSchema:
    name: str
    kind: str
    distinct_count: int
    missing_count: int


@dataclass(frozen=True)
class Table:
    """Immutable column store with a named target and a task type."""

    schema: tuple[ColumnSchema, ...]
    columns: dict[str, np.ndarray]
    row_count: int
    target: str
    task: str
    # Optional decoded labels for encoded categorical columns, code -> string.
    categories: dict[str, tuple[str, ...]] = field(default_factory=dict)

    def __post_init__(self):
        names = [c.name for c in self.schema]
        if len(set(names)) != len(names):
            raise DataError("duplicate column names in schema")
        if set(names) != set(self.columns):
            raise DataError("schema and columns disagree")
        for name, values in self.columns.items():
            if len(values) != self.row_count:
                raise DataError(f"column {name!r} has {len(values)} rows, expected {self.row_count}")
        if self.target not in self.columns:
            raise DataError(f"target column {self.target!r} not present")
        if self.task not in (CLASSIFICATION, REGRESSION):
            raise DataError(f"unknown task {self.task!r}")
        if self.task == CLASSIFICATION and self.row_count > 0:
            if len(_distinct(self.columns[self.target])) < 2:
                raise DataError("classification target has fewer than two distinct values")

    def kind_of(self, name: str) -> str:
        for col in self.schema:
            if col.name == name:
                return col.kind
        raise DataError(f"no such column: {name!r}")

    def column(self, name: str) -> np.ndarray:
        return self.columns[name]

    def feature_names(self) -> tuple[str, ...]:
        return tuple(c.name for c in self.schema if c.name != self.target)

    def matrix(self, names: tuple[str, ...] | None = None) -> np.ndarray:
        """Stack the named columns (default: all features) as float64."""
        if names is None:
            names = self.feature_names()
        if not names:
            return np.empty((self.row_count, 0))
        return np.column_stack([np.asarray(self.columns[n], dtype=float) for n in names])

    def with_column(self, name: str, values: np.ndarray, kind: str = NUMERIC) -> "Table":
        if name in self.columns:
            raise DataError(f"column {name!r} already exists")
        if kind not in KINDS:
            raise DataError(f"unknown kind {kind!r}")
        values = np.asarray(values, dtype=float)
        columns = dict(self.columns)
        columns[name] = values
        schema = self.schema + (_column_schema(name, kind, values),)
        return replace(self, schema=schema, columns=columns)

    def subset(self, rows: np.ndarray) -> "Table":
        columns = {name: values[rows] for name, values in self.columns.items()}
        schema = tuple(
            _column_schema(c.name, c.kind, columns[c.name]) for c in self.schema
        )
        return replace(self, schema=schema, columns=columns, row_count=len(rows))


@dataclass(frozen=True)
class SplitSpec:
    train_fraction: float = 0.6
    seed: int = 0


def _distinct(values: np.ndarray) -> set:
    if values.dtype == object:
        return {v for v in values if v is not None}
    arr = np.asarray(values, dtype=float)
    return set(arr[~np.isnan(arr)].tolist())


def _missing_count(values: np.ndarray) -> int:
    if values.dtype == object:
        return sum(1 for v in values if v is None)
    return int(np.isnan(np.asarray(values, dtype=float)).sum())


def _column_schema(name: str, kind: str, values: np.ndarray) -> ColumnSchema:
    return ColumnSchema(name, kind, len(_distinct(values)), _missing_count(values))


def _parse_datetime(text: str) -> float:
    # Naive timestamps are taken as UTC so the stored epoch value does not
    # depend on the host timezone.
    if text.endswith("Z"):
        text = text[:-1] + "+00:00"
    dt = datetime.fromisoformat(text)
    if dt.tzinfo is None:
        dt = dt.replace(tzinfo=timezone.utc)
    return dt.timestamp()


def _is_datetime(text: str) -> bool:
    try:
        _parse_datetime(text)
    except ValueError:
        return False
    return True


def _is_numeric(text: str) -> bool:
    try:
        float(text)
    except ValueError:
        return False
    return True


def infer_kind(values: list[str]) -> str:
    """Infer a column kind from its distinct non-missing string values.

    Checked in order datetime, numeric, boolean, categorical, so {"0", "1"}
    comes out numeric and an all-missing column falls through to categorical.
    """
    present = [v for v in values if v != ""]
    if not present:
        return CATEGORICAL
    if all(_is_datetime(v) for v in present):
        return DATETIME
    if all(_is_numeric(v) for v in present):
        return NUMERIC
    if all(v.lower() in _BOOL_TOKENS for v in present):
        return BOOLEAN
    return CATEGORICAL


def load_csv(path: str, target: str, task: str) -> Table:
    """Load an RFC-4180 CSV with a header row into a raw Table.

    Empty fields are missing. Column kinds are inferred per column; numeric,
    boolean, and datetime columns are stored as float64 (datetime as epoch
    seconds, missing as NaN), categorical columns as object arrays with None
    for missing.
    """
    with open(path, newline="", encoding="utf-8") as handle:
        reader = csv.reader(handle)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if len(row) != len(header):
                raise DataError(f"{path}: row {lineno} has {len(row)} fields, expected {len(header)}")
            rows.append(row)
    if not rows:
        raise DataError(f"{path}: no data rows")
    if len(set(header)) != len(header):
        raise DataError(f"{path}: duplicate column names")
    if target not in header:
        raise DataError(f"{path}: target column {target!r} not found")

    columns: dict[str, np.ndarray] = {}
    schema = []
    for j, name in enumerate(header):
        raw = [row[j].strip() for row in rows]
        kind = infer_kind(raw)
        if kind == CATEGORICAL:
            values = np.array([v if v != "" else None for v in raw], dtype=object)
        else:
            parsed = np.empty(len(raw))
            for i, v in enumerate(raw):
                if v == "":
                    parsed[i] = np.nan
                elif kind == DATETIME:
                    parsed[i] = _parse_datetime(v)
                elif kind == BOOLEAN:
                    parsed[i] = _BOOL_TOKENS[v.lower()]
                else:
                    parsed[i] = float(v)
            values = parsed
        columns[name] = values
        schema.append(_column_schema(name, kind, values))
    return Table(tuple(schema), columns, len(rows), target, task)


class Preprocessor:
    """Categorical encoding plus total numeric cleanup.

    fit() learns, per raw categorical column, the category list sorted by byte
    order after missing values are replaced with the "NA" placeholder.
    transform() maps categories to their list index (unseen -> -1), replaces
    non-finite numeric values with 0.0, and leaves already-encoded float
    columns untouched apart from that same cleanup, which makes the operation
    idempotent.
    """

    def __init__(self):
        self.categories_: dict[str, tuple[str, ...]] | None = None

    def fit(self, table: Table) -> "Preprocessor":
        categories: dict[str, tuple[str, ...]] = {}
        for col in table.schema:
            values = table.columns[col.name]
            if col.kind == CATEGORICAL and values.dtype == object:
                filled = {MISSING_CATEGORY if v is None else v for v in values}
                categories[col.name] = tuple(sorted(filled, key=lambda s: s.encode("utf-8")))
        self.categories_ = categories
        return self

    def transform(self, table: Table) -> Table:
        if self.categories_ is None:
            raise DataError("preprocessor used before fit")
        columns: dict[str, np.ndarray] = {}
        for col in table.schema:
            values = table.columns[col.name]
            if col.kind == CATEGORICAL and values.dtype == object:
                if col.name not in self.categories_:
                    raise DataError(f"column {col.name!r} was not present at fit time")
                index = {c: float(i) for i, c in enumerate(self.categories_[col.name])}
                filled = (MISSING_CATEGORY if v is None else v for v in values)
                columns[col.name] = np.array(
                    [index.get(v, UNSEEN_CODE) for v in filled], dtype=float
                )
            else:
                arr = np.asarray(values, dtype=float)
                columns[col.name] = np.where(np.isfinite(arr), arr, 0.0)
        schema = tuple(
            _column_schema(c.name, c.kind, columns[c.name]) for c in table.schema
        )
        merged = dict(table.categories)
        merged.update(self.categories_)
        return replace(table, schema=schema, columns=columns, categories=merged)

    def fit_transform(self, table: Table) -> Table:
        return self.fit(table).transform(table)

    def decode(self, column: str, code: int) -> str:
        if self.categories_ is None or column not in self.categories_:
            raise DataError(f"no categories fitted for column {column!r}")
        code = int(code)
        if code < 0 or code >= len(self.categories_[column]):
            return "<unseen>"
        return self.categories_[column][code]


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def _train_quotas(labels: list, counts: dict, frac: float, total: int) -> dict:
    """Largest-remainder allocation of `total` train slots across classes.

    Quotas are clamped so every class with two or more members appears on both
    sides of the split; singleton classes are forced into train.
    """
    quota = {c: frac * counts[c] for c in labels}
    take = {c: int(math.floor(quota[c])) for c in labels}
    spare = total - sum(take.values())
    by_remainder = sorted(labels, key=lambda c: (-(quota[c] - take[c]), labels.index(c)))
    for c in by_remainder[:max(spare, 0)]:
        take[c] += 1
    for c in labels:
        if counts[c] == 1:
            take[c] = 1
            warnings.warn(f"class {c!r} has a single row; placing it in train")
        else:
            take[c] = min(max(take[c], 1), counts[c] - 1)
    # Clamping can shift the total; settle the difference against classes with
    # slack, largest slack first, without violating the clamps.
    delta = total - sum(take.values())
    while delta != 0:
        if delta > 0:
            open_c = [c for c in labels if counts[c] > 1 and take[c] < counts[c] - 1]
            if not open_c:
                break
            pick = max(open_c, key=lambda c: (counts[c] - take[c], -labels.index(c)))
            take[pick] += 1
            delta -= 1
        else:
            open_c = [c for c in labels if counts[c] > 1 and take[c] > 1]
            if not open_c:
                break
            pick = max(open_c, key=lambda c: (take[c], -labels.index(c)))
            take[pick] -= 1
            delta += 1
    return take


def split(table: Table, spec: SplitSpec) -> tuple[Table, Table]:
    """Split rows into train and test with one seeded permutation.

    Classification splits are stratified: per-class train quotas come from a
    largest-remainder allocation against round-half-up(train_fraction * rows),
    and rows fill their class quota in permutation order. Regression takes the
    leading slice of the permutation. Within each side, row order is the
    shuffled order.
    """
    if not 0.0 < spec.train_fraction < 1.0:
        raise DataError(f"train_fraction must be in (0, 1), got {spec.train_fraction}")
    m = table.row_count
    if m < 2:
        raise DataError("need at least two rows to split")
    total = _round_half_up(spec.train_fraction * m)
    total = min(max(total, 1), m - 1)
    rng = np.random.default_rng(spec.seed)
    perm = rng.permutation(m)

    if table.task == CLASSIFICATION:
        y = table.columns[table.target]
        if y.dtype == object:
            key = {v: (0, "") if v is None else (1, v) for v in set(y)}
            labels = sorted(set(y.tolist()), key=lambda v: key[v])
        else:
            labels = sorted(_distinct(y))
        counts = {c: int(sum(1 for v in y if v == c)) for c in labels}
        take = _train_quotas(labels, counts, spec.train_fraction, total)
        # Singletons land entirely in train, so the test side only keeps the
        # multi-member classes; fewer than two of those cannot be stratified.
        if sum(1 for c in labels if counts[c] > 1) < 2:
            raise DataError("test split would hold a single target class")
        train_idx, test_idx = [], []
        for i in perm:
            cls = y[i]
            if take.get(cls, 0) > 0:
                take[cls] -= 1
                train_idx.append(i)
            else:
                test_idx.append(i)
    else:
        train_idx = perm[:total].tolist()
        test_idx = perm[total:].tolist()

    return table.subset(np.array(train_idx)), table.subset(np.array(test_idx))


def _fmt(x: float) -> str:
    return f"{x:.6g}"


def _fmt_datetime(epoch: float) -> str:
    return datetime.fromtimestamp(epoch, tz=timezone.utc).strftime("%Y-%m-%dT%H:%M:%S")


def _top_categories(table: Table, name: str, limit: int = 5) -> str:
    values = table.columns[name]
    counts: dict = {}
    if values.dtype == object:
        for v in values:
            label = MISSING_CATEGORY if v is None else v
            counts[label] = counts.get(label, 0) + 1
    else:
        cats = table.categories.get(name)
        arr = np.asarray(values, dtype=float)
        for v in arr[~np.isnan(arr)]:
            if cats is not None:
                code = int(v)
                label = cats[code] if 0 <= code < len(cats) else "<unseen>"
            else:
                label = _fmt(v)
            counts[label] = counts.get(label, 0) + 1
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))[:limit]
    return ", ".join(f"{label}({count})" for label, count in ranked)


def metadata_text(table: Table) -> str:
    """Deterministic plain-text dataset summary used in agent prompts.

    Identical tables produce byte-identical text: stable column order (schema
    order), %.6g numbers, counts, and top-5 categories.
    """
    lines = [
        f"task={table.task} target={table.target} rows={table.row_count} columns={len(table.schema)}"
    ]
    for col in table.schema:
        values = table.columns[col.name]
        head = f"- {col.name}: {col.kind} distinct={col.distinct_count} missing={col.missing_count}"
        if col.kind == NUMERIC or (col.kind == DATETIME and values.dtype != object):
            arr = np.asarray(values, dtype=float)
            arr = arr[~np.isnan(arr)]
            if arr.size == 0:
                lines.append(head)
                continue
            if col.kind == DATETIME:
                head += f" min={_fmt_datetime(arr.min())} max={_fmt_datetime(arr.max())}"
            else:
                head += (
                    f" min={_fmt(arr.min())} max={_fmt(arr.max())}"
                    f" mean={_fmt(arr.mean())} std={_fmt(arr.std())}"
                )
        elif col.kind == BOOLEAN:
            arr = np.asarray(values, dtype=float)
            arr = arr[~np.isnan(arr)]
            head += f" true={int((arr == 1.0).sum())} false={int((arr == 0.0).sum())}"
        else:
            top = _top_categories(table, col.name)
            if top:
                head += f" top5={top}"
        lines.append(head)
    return "\n".join(lines)
