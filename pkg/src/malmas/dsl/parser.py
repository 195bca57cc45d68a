"""Recursive-descent parser for the feature language.

Concrete syntax, one statement per program:

    FEATURE <name> = <expr>

    expr     := additive
    additive := mult (("+" | "-") mult)*
    mult     := prefix (("*" | "/") prefix)*
    prefix   := "-" prefix | primary
    primary  := NUMBER | NAME | NAME "(" args ")" | "(" expr ")"
              | "if" expr CMP expr "then" expr "else" expr
    CMP      := "<" | "<=" | ">" | ">=" | "=="

Column references are `col("name")` or a bare identifier. Every named op is
callable with function syntax; `if_then_else(a < b, x, y)` is the call form of
the if statement. `#` starts a comment that runs to end of line. All errors
carry the byte offset of the offending token.
"""

from __future__ import annotations

import re
from dataclasses import dataclass

from ..errors import DslError
from .nodes import (
    AGG_OPS, BINARY_OPS, CMP_OPS, DATE_PARTS, IDENT_RE, MAX_BINS, MAX_DEPTH,
    MAX_K, MAX_NODES, MIN_BINS, MIN_K, UNARY_OPS, Bin, Binary, Clip, Cluster,
    Col, Compare, DatePart, ElapsedDays, GroupAgg, IfThenElse, Literal,
    Program, Unary, ZScore, depth, node_count,
)

_KEYWORDS = {"FEATURE", "if", "then", "else"}

_CMP_TOKENS = {"<": "lt", "<=": "le", ">": "gt", ">=": "ge", "==": "eq"}

_NUMBER_RE = re.compile(r"(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?")
_NAME_RE = re.compile(IDENT_RE)


@dataclass(frozen=True)
class _Token:
    kind: str  # NAME NUMBER STRING SYM EOF
    text: str
    offset: int


def _tokenize(text: str) -> list[_Token]:
    tokens = []
    i = 0
    byte_off = 0
    n = len(text)

    def advance(count: int):
        nonlocal i, byte_off
        byte_off += len(text[i:i + count].encode("utf-8"))
        i += count

    while i < n:
        c = text[i]
        if c in " \t\r\n":
            advance(1)
            continue
        if c == "#":
            end = text.find("\n", i)
            advance((end if end != -1 else n) - i)
            continue
        start = byte_off
        if c == '"':
            end = text.find('"', i + 1)
            if end == -1:
                raise DslError("unterminated string", start)
            tokens.append(_Token("STRING", text[i + 1:end], start))
            advance(end + 1 - i)
            continue
        m = _NUMBER_RE.match(text, i)
        if m and m.start() == i:
            tokens.append(_Token("NUMBER", m.group(), start))
            advance(len(m.group()))
            continue
        m = _NAME_RE.match(text, i)
        if m and m.start() == i:
            tokens.append(_Token("NAME", m.group(), start))
            advance(len(m.group()))
            continue
        two = text[i:i + 2]
        if two in ("<=", ">=", "=="):
            tokens.append(_Token("SYM", two, start))
            advance(2)
            continue
        if c in "()=,+-*/<>":
            tokens.append(_Token("SYM", c, start))
            advance(1)
            continue
        raise DslError(f"unexpected character {c!r}", start)
    tokens.append(_Token("EOF", "", byte_off))
    return tokens


class _Parser:
    def __init__(self, tokens: list[_Token]):
        self.tokens = tokens
        self.pos = 0

    def peek(self) -> _Token:
        return self.tokens[self.pos]

    def next(self) -> _Token:
        tok = self.tokens[self.pos]
        self.pos += 1
        return tok

    def expect(self, kind: str, text: str | None = None) -> _Token:
        tok = self.peek()
        if tok.kind != kind or (text is not None and tok.text != text):
            want = text if text is not None else kind
            raise DslError(f"expected {want!r}, found {tok.text or 'end of input'!r}", tok.offset)
        return self.next()

    # --- grammar ------------------------------------------------------------

    def program(self) -> Program:
        head = self.expect("NAME")
        if head.text != "FEATURE":
            raise DslError("program must start with FEATURE", head.offset)
        name_tok = self.expect("NAME")
        if name_tok.text in _KEYWORDS:
            raise DslError(f"{name_tok.text!r} is a reserved word", name_tok.offset)
        self.expect("SYM", "=")
        body_tok = self.peek()
        body = self.expr()
        tail = self.peek()
        if tail.kind != "EOF":
            raise DslError(f"unexpected trailing input {tail.text!r}", tail.offset)
        if depth(body) > MAX_DEPTH:
            raise DslError(f"expression depth exceeds {MAX_DEPTH}", body_tok.offset)
        if node_count(body) > MAX_NODES:
            raise DslError(f"expression node count exceeds {MAX_NODES}", body_tok.offset)
        return Program(name_tok.text, body)

    def expr(self):
        return self.additive()

    def additive(self):
        node = self.mult()
        while self.peek().kind == "SYM" and self.peek().text in ("+", "-"):
            op = "add" if self.next().text == "+" else "sub"
            node = Binary(op, node, self.mult())
        return node

    def mult(self):
        node = self.prefix()
        while self.peek().kind == "SYM" and self.peek().text in ("*", "/"):
            op = "mul" if self.next().text == "*" else "div_s"
            node = Binary(op, node, self.prefix())
        return node

    def prefix(self):
        tok = self.peek()
        if tok.kind == "SYM" and tok.text == "-":
            self.next()
            inner = self.prefix()
            if isinstance(inner, Literal):
                return Literal(-inner.value)
            return Unary("neg", inner)
        return self.primary()

    def primary(self):
        tok = self.peek()
        if tok.kind == "NUMBER":
            self.next()
            return Literal(float(tok.text))
        if tok.kind == "COLREF":
            self.next()
            return Col(tok.text)
        if tok.kind == "SYM" and tok.text == "(":
            self.next()
            node = self.expr()
            self.expect("SYM", ")")
            return node
        if tok.kind == "NAME":
            if tok.text == "if":
                return self.if_expr()
            if tok.text in ("then", "else", "FEATURE"):
                raise DslError(f"{tok.text!r} is a reserved word", tok.offset)
            self.next()
            if self.peek().kind == "SYM" and self.peek().text == "(":
                return self.call(tok)
            return Col(tok.text)
        raise DslError(f"expected an expression, found {tok.text or 'end of input'!r}", tok.offset)

    def if_expr(self):
        self.expect("NAME", "if")
        cond = self.comparison()
        self.expect("NAME", "then")
        then = self.expr()
        self.expect("NAME", "else")
        orelse = self.expr()
        return IfThenElse(cond, then, orelse)

    def comparison(self) -> Compare:
        left = self.expr()
        tok = self.peek()
        if tok.kind == "SYM" and tok.text in _CMP_TOKENS:
            self.next()
            return Compare(_CMP_TOKENS[tok.text], left, self.expr())
        raise DslError(f"expected a comparison operator, found {tok.text or 'end of input'!r}", tok.offset)

    def call_arg(self):
        """One call argument: [name =] expr [cmp expr]."""
        name = None
        tok = self.peek()
        if (
            tok.kind == "NAME"
            and self.tokens[self.pos + 1].kind == "SYM"
            and self.tokens[self.pos + 1].text == "="
            and (self.pos + 2 >= len(self.tokens) or self.tokens[self.pos + 2].text != "=")
        ):
            name = self.next().text
            self.next()
        value = self.expr()
        nxt = self.peek()
        if nxt.kind == "SYM" and nxt.text in _CMP_TOKENS:
            self.next()
            value = Compare(_CMP_TOKENS[nxt.text], value, self.expr())
        return name, value, tok.offset

    def call(self, name_tok: _Token):
        self.expect("SYM", "(")
        args = []
        if not (self.peek().kind == "SYM" and self.peek().text == ")"):
            args.append(self.call_arg())
            while self.peek().kind == "SYM" and self.peek().text == ",":
                self.next()
                args.append(self.call_arg())
        self.expect("SYM", ")")
        return _build_call(name_tok.text, args, name_tok.offset)


def _positional(name: str, args: list, offset: int, count: int) -> list:
    if len(args) != count:
        raise DslError(f"{name} takes {count} argument(s), got {len(args)}", offset)
    for arg_name, _, arg_off in args:
        if arg_name is not None:
            raise DslError(f"{name} takes no keyword arguments", arg_off)
    return [value for _, value, _ in args]


def _plain_expr(name: str, value, offset: int):
    if isinstance(value, Compare):
        raise DslError(f"comparison not allowed as an argument of {name}", offset)
    return value


def _as_col(name: str, value, offset: int) -> Col:
    if not isinstance(value, Col):
        raise DslError(f"{name} expects a column reference here", offset)
    return value


def _as_literal(name: str, value, offset: int) -> float:
    if not isinstance(value, Literal):
        raise DslError(f"{name} expects a numeric literal here", offset)
    return value.value


def _as_int(name: str, what: str, value, offset: int) -> int:
    raw = _as_literal(name, value, offset)
    if not float(raw).is_integer():
        raise DslError(f"{name} {what} must be an integer", offset)
    return int(raw)


def _bareword(value, vocabulary: tuple[str, ...]) -> str | None:
    if isinstance(value, Col) and value.name in vocabulary:
        return value.name
    return None


def _build_call(name: str, args: list, offset: int):
    if name == "col":
        if len(args) != 1 or args[0][0] is not None:
            raise DslError("col takes one string argument", offset)
        raise DslError("col expects a quoted column name", args[0][2])
    if name in UNARY_OPS:
        (value,) = _positional(name, args, offset, 1)
        return Unary(name, _plain_expr(name, value, offset))
    if name in BINARY_OPS:
        left, right = _positional(name, args, offset, 2)
        return Binary(name, _plain_expr(name, left, offset), _plain_expr(name, right, offset))
    if name == "if_then_else":
        cond, then, orelse = _positional(name, args, offset, 3)
        if not isinstance(cond, Compare):
            raise DslError("if_then_else condition must be a comparison", offset)
        return IfThenElse(cond, _plain_expr(name, then, offset), _plain_expr(name, orelse, offset))
    if name == "group_agg":
        return _build_group_agg(args, offset)
    if name == "bin":
        value, n = _positional(name, args, offset, 2)
        n_bins = _as_int("bin", "bin count", n, offset)
        if not MIN_BINS <= n_bins <= MAX_BINS:
            raise DslError(f"bin count must be in [{MIN_BINS}, {MAX_BINS}]", offset)
        return Bin(_plain_expr(name, value, offset), n_bins)
    if name == "clip":
        value, lo, hi = _positional(name, args, offset, 3)
        return Clip(
            _plain_expr(name, value, offset),
            _as_literal("clip", lo, offset),
            _as_literal("clip", hi, offset),
        )
    if name == "zscore":
        (value,) = _positional(name, args, offset, 1)
        return ZScore(_plain_expr(name, value, offset))
    if name == "cluster":
        if len(args) < 2:
            raise DslError("cluster takes k and at least one column", offset)
        k = _as_int("cluster", "k", _positional_head(args), offset)
        if not MIN_K <= k <= MAX_K:
            raise DslError(f"cluster k must be in [{MIN_K}, {MAX_K}]", offset)
        cols = tuple(_as_col("cluster", v, off) for _, v, off in args[1:])
        return Cluster(k, cols)
    if name == "date_part":
        first, second = _positional(name, args, offset, 2)
        part = _bareword(first, DATE_PARTS)
        if part is None:
            raise DslError(f"date_part expects one of {', '.join(DATE_PARTS)} first", offset)
        return DatePart(part, _as_col("date_part", second, offset))
    if name == "elapsed_days":
        first, second = _positional(name, args, offset, 2)
        return ElapsedDays(_as_col("elapsed_days", first, offset), _as_col("elapsed_days", second, offset))
    raise DslError(f"unknown function {name!r}", offset)


def _positional_head(args: list):
    arg_name, value, arg_off = args[0]
    if arg_name is not None:
        raise DslError("first argument cannot be a keyword", arg_off)
    return value


def _build_group_agg(args: list, offset: int) -> GroupAgg:
    if not args:
        raise DslError("group_agg takes an aggregate, a key, and a value", offset)
    agg = _bareword(_positional_head(args), AGG_OPS)
    if agg is None:
        raise DslError(f"group_agg expects one of {', '.join(AGG_OPS)} first", offset)
    key = value = None
    positional = []
    for arg_name, arg_value, arg_off in args[1:]:
        if arg_name == "key":
            key = _as_col("group_agg", arg_value, arg_off)
        elif arg_name == "value":
            value = _plain_expr("group_agg", arg_value, arg_off)
        elif arg_name is None:
            positional.append((arg_value, arg_off))
        else:
            raise DslError(f"group_agg got an unexpected keyword {arg_name!r}", arg_off)
    for arg_value, arg_off in positional:
        if key is None:
            key = _as_col("group_agg", arg_value, arg_off)
        elif value is None:
            value = _plain_expr("group_agg", arg_value, arg_off)
        else:
            raise DslError("group_agg got too many arguments", arg_off)
    if key is None or value is None:
        raise DslError("group_agg needs both a key column and a value expression", offset)
    return GroupAgg(agg, key, value)


def parse(text: str) -> Program:
    """Parse one FEATURE statement into a Program.

    Raises DslError with a byte offset on lexical errors, syntax errors, and
    depth/node-count limit violations.
    """
    tokens = _rewrite_col_calls(_tokenize(text))
    return _Parser(tokens).program()


def _rewrite_col_calls(tokens: list[_Token]) -> list[_Token]:
    """Collapse NAME(col) "(" STRING ")" into a single NAME token.

    Done before parsing so `col("name")` yields a Col for any name, including
    ones that look like keywords or numbers.
    """
    out = []
    i = 0
    while i < len(tokens):
        tok = tokens[i]
        if (
            tok.kind == "NAME"
            and tok.text == "col"
            and i + 3 < len(tokens)
            and tokens[i + 1].kind == "SYM" and tokens[i + 1].text == "("
            and tokens[i + 2].kind == "STRING"
            and tokens[i + 3].kind == "SYM" and tokens[i + 3].text == ")"
        ):
            out.append(_Token("COLREF", tokens[i + 2].text, tok.offset))
            i += 4
            continue
        out.append(tok)
        i += 1
    return out
