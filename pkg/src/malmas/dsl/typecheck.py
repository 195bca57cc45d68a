"""Static checks of a parsed program against a table schema."""

from __future__ import annotations

import re
from dataclasses import dataclass

from ..data import CATEGORICAL, DATETIME, NUMERIC, ColumnSchema
from ..errors import DslTypeError
from .nodes import (
    AGG_OPS, BINARY_OPS, CMP_OPS, DATE_PARTS, IDENT_RE, MAX_BINS, MAX_DEPTH,
    MAX_K, MAX_NODES, MIN_BINS, MIN_K, UNARY_OPS, Bin, Binary, Cluster, Col,
    Compare, DatePart, ElapsedDays, GroupAgg, IfThenElse, Literal, Program,
    Unary, ZScore, base_columns, depth, node_count, walk,
)

_IDENT = re.compile(f"^{IDENT_RE}$")


@dataclass(frozen=True)
class TypedProgram:
    program: Program
    base_columns: tuple[str, ...]


def _require_kind(kinds: dict[str, str], col: Col, wanted: str, op: str):
    if col.name not in kinds:
        raise DslTypeError(f"unknown column {col.name!r}")
    if kinds[col.name] != wanted:
        raise DslTypeError(
            f"{op} requires a {wanted} column, but {col.name!r} is {kinds[col.name]}"
        )


def typecheck(program: Program, schema: list[ColumnSchema] | tuple[ColumnSchema, ...]) -> TypedProgram:
    """Check column references and kind rules; returns the typed program.

    Also re-validates structural invariants (operator names, limits, feature
    name shape) so programs built directly as AST values get the same
    guarantees as parsed ones. The feature name must not shadow an existing
    column, since the program's output becomes a new column.
    """
    kinds = {c.name: c.kind for c in schema}
    if not _IDENT.match(program.feature_name):
        raise DslTypeError(f"invalid feature name {program.feature_name!r}")
    if program.feature_name in kinds:
        raise DslTypeError(f"feature name {program.feature_name!r} is already a column")
    if depth(program.body) > MAX_DEPTH:
        raise DslTypeError(f"expression depth exceeds {MAX_DEPTH}")
    if node_count(program.body) > MAX_NODES:
        raise DslTypeError(f"expression node count exceeds {MAX_NODES}")

    for node in walk(program.body):
        if isinstance(node, Col):
            if node.name not in kinds:
                raise DslTypeError(f"unknown column {node.name!r}")
        elif isinstance(node, Unary):
            if node.op not in UNARY_OPS:
                raise DslTypeError(f"unknown unary op {node.op!r}")
        elif isinstance(node, Binary):
            if node.op not in BINARY_OPS:
                raise DslTypeError(f"unknown binary op {node.op!r}")
        elif isinstance(node, Compare):
            if node.op not in CMP_OPS:
                raise DslTypeError(f"unknown comparison op {node.op!r}")
        elif isinstance(node, GroupAgg):
            if node.agg not in AGG_OPS:
                raise DslTypeError(f"unknown aggregate {node.agg!r}")
            _require_kind(kinds, node.key, CATEGORICAL, "group_agg key")
        elif isinstance(node, Bin):
            if not MIN_BINS <= node.n_bins <= MAX_BINS:
                raise DslTypeError(f"bin count must be in [{MIN_BINS}, {MAX_BINS}]")
        elif isinstance(node, Cluster):
            if not MIN_K <= node.k <= MAX_K:
                raise DslTypeError(f"cluster k must be in [{MIN_K}, {MAX_K}]")
            if not node.cols:
                raise DslTypeError("cluster needs at least one column")
            for col in node.cols:
                _require_kind(kinds, col, NUMERIC, "cluster")
        elif isinstance(node, DatePart):
            if node.part not in DATE_PARTS:
                raise DslTypeError(f"unknown date part {node.part!r}")
            _require_kind(kinds, node.col, DATETIME, "date_part")
        elif isinstance(node, ElapsedDays):
            _require_kind(kinds, node.first, DATETIME, "elapsed_days")
            _require_kind(kinds, node.second, DATETIME, "elapsed_days")
        elif isinstance(node, (Literal, IfThenElse, ZScore)):
            pass

    return TypedProgram(program, base_columns(program.body))
