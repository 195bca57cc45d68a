"""Closed feature-transformation language: parse, check, run, canonicalize."""

from .canon import canonical_key, render
from .interp import FittedProgram, evaluate, fit_evaluate
from .nodes import (
    AGG_OPS, BINARY_OPS, CMP_OPS, DATE_PARTS, MAX_DEPTH, MAX_NODES, UNARY_OPS,
    Bin, Binary, Clip, Cluster, Col, Compare, DatePart, ElapsedDays, GroupAgg,
    IfThenElse, Literal, Program, Unary, ZScore, base_columns, depth,
    node_count, op_names, walk,
)
from .parser import parse
from .typecheck import TypedProgram, typecheck

__all__ = [
    "AGG_OPS", "BINARY_OPS", "CMP_OPS", "DATE_PARTS", "MAX_DEPTH", "MAX_NODES",
    "UNARY_OPS", "Bin", "Binary", "Clip", "Cluster", "Col", "Compare",
    "DatePart", "ElapsedDays", "FittedProgram", "GroupAgg", "IfThenElse",
    "Literal", "Program", "TypedProgram", "Unary", "ZScore", "base_columns",
    "canonical_key", "depth", "evaluate", "fit_evaluate", "node_count",
    "op_names", "parse", "render", "typecheck", "walk",
]
