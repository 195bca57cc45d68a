"""AST node types for the feature language.

Nodes are frozen dataclasses so programs hash and compare structurally; every
constructor is a plain value holder and all validation lives in the parser and
typechecker.
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from typing import Union

UNARY_OPS = ("neg", "abs", "sq", "sqrt_s", "log_s", "recip_s")
BINARY_OPS = ("add", "sub", "mul", "div_s")
CMP_OPS = ("lt", "le", "gt", "ge", "eq")
AGG_OPS = ("mean", "std", "min", "max", "count")
DATE_PARTS = ("year", "month", "day", "dow", "hour")

MAX_DEPTH = 12
MAX_NODES = 64

MIN_BINS, MAX_BINS = 2, 32
MIN_K, MAX_K = 2, 16

IDENT_RE = r"[A-Za-z_][A-Za-z0-9_]*"


@dataclass(frozen=True)
class Literal:
    value: float


@dataclass(frozen=True)
class Col:
    name: str


@dataclass(frozen=True)
class Unary:
    op: str
    arg: "Expr"


@dataclass(frozen=True)
class Binary:
    op: str
    left: "Expr"
    right: "Expr"


@dataclass(frozen=True)
class Compare:
    op: str
    left: "Expr"
    right: "Expr"


@dataclass(frozen=True)
class IfThenElse:
    cond: Compare
    then: "Expr"
    orelse: "Expr"


@dataclass(frozen=True)
class GroupAgg:
    agg: str
    key: Col
    value: "Expr"


@dataclass(frozen=True)
class Bin:
    arg: "Expr"
    n_bins: int


@dataclass(frozen=True)
class Clip:
    arg: "Expr"
    lo: float
    hi: float


@dataclass(frozen=True)
class ZScore:
    arg: "Expr"


@dataclass(frozen=True)
class Cluster:
    k: int
    cols: tuple[Col, ...]


@dataclass(frozen=True)
class DatePart:
    part: str
    col: Col


@dataclass(frozen=True)
class ElapsedDays:
    first: Col
    second: Col


Expr = Union[
    Literal, Col, Unary, Binary, IfThenElse, GroupAgg,
    Bin, Clip, ZScore, Cluster, DatePart, ElapsedDays,
]


@dataclass(frozen=True)
class Program:
    feature_name: str
    body: Expr


def children(node) -> tuple:
    """Direct sub-nodes of an AST node, in field order."""
    out = []
    for f in fields(node):
        v = getattr(node, f.name)
        if isinstance(v, tuple):
            out.extend(x for x in v if _is_node(x))
        elif _is_node(v):
            out.append(v)
    return tuple(out)


def _is_node(v) -> bool:
    return isinstance(
        v,
        (Literal, Col, Unary, Binary, Compare, IfThenElse, GroupAgg,
         Bin, Clip, ZScore, Cluster, DatePart, ElapsedDays),
    )


def walk(node):
    """Pre-order traversal over a node and everything beneath it."""
    yield node
    for child in children(node):
        yield from walk(child)


def node_count(node) -> int:
    return sum(1 for _ in walk(node))


def depth(node) -> int:
    kids = children(node)
    if not kids:
        return 1
    return 1 + max(depth(k) for k in kids)


def op_names(node) -> set[str]:
    """Operator names used anywhere in the tree, for role-conformance checks."""
    ops: set[str] = set()
    for n in walk(node):
        if isinstance(n, Unary):
            ops.add(n.op)
        elif isinstance(n, Binary):
            ops.add(n.op)
        elif isinstance(n, Compare):
            ops.add(n.op)
        elif isinstance(n, IfThenElse):
            ops.add("if_then_else")
        elif isinstance(n, GroupAgg):
            ops.add("group_agg")
        elif isinstance(n, Bin):
            ops.add("bin")
        elif isinstance(n, Clip):
            ops.add("clip")
        elif isinstance(n, ZScore):
            ops.add("zscore")
        elif isinstance(n, Cluster):
            ops.add("cluster")
        elif isinstance(n, DatePart):
            ops.add("date_part")
        elif isinstance(n, ElapsedDays):
            ops.add("elapsed_days")
    return ops


def base_columns(node) -> tuple[str, ...]:
    """Sorted distinct column names referenced by the tree."""
    return tuple(sorted({n.name for n in walk(node) if isinstance(n, Col)}))
