"""Program rendering and canonical dedup keys.

render() emits concrete syntax that parses back to a structurally identical
AST. canonical_key() renders a normal form: literal-only subtrees folded with
the interpreter's exact scalar semantics, add/mul/eq operands sorted, feature
name excluded. Canonical-equal programs therefore evaluate identically.
"""

from __future__ import annotations

from .interp import fold_binary, fold_compare, fold_unary
from .nodes import (
    Bin, Binary, Clip, Cluster, Col, Compare, DatePart, ElapsedDays,
    GroupAgg, IfThenElse, Literal, Program, Unary, ZScore,
)

_CMP_SYMBOL = {"lt": "<", "le": "<=", "gt": ">", "ge": ">=", "eq": "=="}
_ARITH_SYMBOL = {"add": "+", "sub": "-", "mul": "*", "div_s": "/"}
_PRECEDENCE = {"add": 1, "sub": 1, "mul": 2, "div_s": 2}

_ROOT = -1


def _fmt(value: float) -> str:
    if float(value).is_integer() and abs(value) < 1e16:
        return str(int(value))
    return repr(float(value))


def _render(node, parent_prec: int, right_side: bool = False) -> str:
    if isinstance(node, Literal):
        text = _fmt(node.value)
        # A negative literal on the right of - or / must not fuse with the
        # operator symbol; parenthesize so round-trip parsing is exact.
        if text.startswith("-") and parent_prec > 0:
            return f"({text})"
        return text
    if isinstance(node, Col):
        return f'col("{node.name}")'
    if isinstance(node, Binary):
        prec = _PRECEDENCE[node.op]
        left = _render(node.left, prec)
        right = _render(node.right, prec, right_side=True)
        text = f"{left} {_ARITH_SYMBOL[node.op]} {right}"
        if prec < parent_prec or (prec == parent_prec and right_side):
            return f"({text})"
        return text
    if isinstance(node, Unary):
        return f"{node.op}({_render(node.arg, 0)})"
    if isinstance(node, Compare):
        return f"{_render(node.left, 0)} {_CMP_SYMBOL[node.op]} {_render(node.right, 0)}"
    if isinstance(node, IfThenElse):
        text = (
            f"if {_render(node.cond, 0)} then {_render(node.then, 0)}"
            f" else {_render(node.orelse, 0)}"
        )
        if parent_prec == _ROOT:
            return text
        return f"({text})"
    if isinstance(node, GroupAgg):
        return (
            f"group_agg({node.agg}, key={_render(node.key, 0)},"
            f" value={_render(node.value, 0)})"
        )
    if isinstance(node, Bin):
        return f"bin({_render(node.arg, 0)}, {node.n_bins})"
    if isinstance(node, Clip):
        return f"clip({_render(node.arg, 0)}, {_fmt(node.lo)}, {_fmt(node.hi)})"
    if isinstance(node, ZScore):
        return f"zscore({_render(node.arg, 0)})"
    if isinstance(node, Cluster):
        cols = ", ".join(_render(c, 0) for c in node.cols)
        return f"cluster({node.k}, {cols})"
    if isinstance(node, DatePart):
        return f"date_part({node.part}, {_render(node.col, 0)})"
    if isinstance(node, ElapsedDays):
        return f"elapsed_days({_render(node.first, 0)}, {_render(node.second, 0)})"
    raise TypeError(f"not an expression node: {node!r}")


def render(program: Program) -> str:
    """Concrete syntax for a program; parse(render(p)) == p."""
    return f"FEATURE {program.feature_name} = {_render(program.body, _ROOT)}"


def _fold(node):
    """Collapse literal-only subtrees using the evaluator's scalar semantics."""
    if isinstance(node, Unary):
        arg = _fold(node.arg)
        if isinstance(arg, Literal):
            return Literal(fold_unary(node.op, arg.value))
        return Unary(node.op, arg)
    if isinstance(node, Binary):
        left, right = _fold(node.left), _fold(node.right)
        if isinstance(left, Literal) and isinstance(right, Literal):
            return Literal(fold_binary(node.op, left.value, right.value))
        return Binary(node.op, left, right)
    if isinstance(node, Compare):
        return Compare(node.op, _fold(node.left), _fold(node.right))
    if isinstance(node, IfThenElse):
        cond = _fold(node.cond)
        then, orelse = _fold(node.then), _fold(node.orelse)
        if isinstance(cond.left, Literal) and isinstance(cond.right, Literal):
            taken = fold_compare(cond.op, cond.left.value, cond.right.value)
            return then if taken else orelse
        return IfThenElse(cond, then, orelse)
    if isinstance(node, GroupAgg):
        return GroupAgg(node.agg, node.key, _fold(node.value))
    if isinstance(node, Bin):
        arg = _fold(node.arg)
        if isinstance(arg, Literal):
            # Binning a constant yields the all-zeros column.
            return Literal(0.0)
        return Bin(arg, node.n_bins)
    if isinstance(node, Clip):
        arg = _fold(node.arg)
        if isinstance(arg, Literal):
            folded = min(max(arg.value, node.lo), node.hi)
            return Literal(folded if folded == folded else 0.0)
        return Clip(arg, node.lo, node.hi)
    if isinstance(node, ZScore):
        arg = _fold(node.arg)
        if isinstance(arg, Literal):
            # A constant column z-scores to all zeros.
            return Literal(0.0)
        return ZScore(arg)
    return node


def _key(node) -> str:
    if isinstance(node, Literal):
        return _fmt(node.value)
    if isinstance(node, Col):
        return f'col("{node.name}")'
    if isinstance(node, Unary):
        return f"{node.op}({_key(node.arg)})"
    if isinstance(node, Binary):
        left, right = _key(node.left), _key(node.right)
        if node.op in ("add", "mul") and right < left:
            left, right = right, left
        return f"{node.op}({left}, {right})"
    if isinstance(node, Compare):
        left, right = _key(node.left), _key(node.right)
        if node.op == "eq" and right < left:
            left, right = right, left
        return f"{node.op}({left}, {right})"
    if isinstance(node, IfThenElse):
        return f"if({_key(node.cond)}, {_key(node.then)}, {_key(node.orelse)})"
    if isinstance(node, GroupAgg):
        return f"group_agg({node.agg}, {_key(node.key)}, {_key(node.value)})"
    if isinstance(node, Bin):
        return f"bin({_key(node.arg)}, {node.n_bins})"
    if isinstance(node, Clip):
        return f"clip({_key(node.arg)}, {_fmt(node.lo)}, {_fmt(node.hi)})"
    if isinstance(node, ZScore):
        return f"zscore({_key(node.arg)})"
    if isinstance(node, Cluster):
        cols = ", ".join(_key(c) for c in node.cols)
        return f"cluster({node.k}, {cols})"
    if isinstance(node, DatePart):
        return f"date_part({node.part}, {_key(node.col)})"
    if isinstance(node, ElapsedDays):
        return f"elapsed_days({_key(node.first)}, {_key(node.second)})"
    raise TypeError(f"not an expression node: {node!r}")


def canonical_key(program: Program) -> str:
    return _key(_fold(program.body))
