"""Strategy agents, router, and summarizers.

Six fixed strategy roles each own an operator family; a proposal conforms to
its role when it uses at least one operator from that family. The router picks
the active subset each round (temporal only when the data has a datetime
column). Summarizers distill a round's records into short bullet notes, with
previous notes carried forward when the round was too thin to learn from.
"""

from __future__ import annotations

import json
import logging
import re
from dataclasses import dataclass, field
from importlib import resources

import numpy as np

from .backends import ChatBackend, ChatMessage, ChatRequest
from .data import DATETIME, ColumnSchema
from .dsl import canonical_key, op_names, parse, render, typecheck
from .errors import BackendError, ConfigError, DslError, DslTypeError
from .memory import ConceptNote, FeedRecord, ProcRecord

log = logging.getLogger("malmas.agents")

ROLE_ORDER = ("unary", "cross", "temporal", "aggregation", "local_transform", "local_pattern")

ROUTER_FALLBACK_K = 4

# Prompt budgets: keep context concise without dropping the newest signal.
EFFECTIVE_BUDGET = 15
ATTEMPTED_BUDGET = 40

_ROLE_OPS = {
    "unary": frozenset({"neg", "abs", "sq", "sqrt_s", "log_s", "recip_s", "zscore"}),
    "cross": frozenset({"add", "sub", "mul", "div_s", "if_then_else"}),
    "temporal": frozenset({"date_part", "elapsed_days"}),
    "aggregation": frozenset({"group_agg"}),
    "local_transform": frozenset({"bin", "clip", "zscore"}),
    "local_pattern": frozenset({"cluster", "if_then_else"}),
}

_ROLE_BLURBS = {
    "unary": "single-column transforms (log, sqrt, square, reciprocal, z-score)",
    "cross": "arithmetic and conditional interactions between columns",
    "temporal": "calendar parts and elapsed time from datetime columns",
    "aggregation": "per-group statistics keyed by a categorical column",
    "local_transform": "binning, clipping, and rescaling of single columns",
    "local_pattern": "clustering and threshold indicators over numeric columns",
}

DSL_REFERENCE = """\
Feature language (one statement per proposal):
  FEATURE <name> = <expr>
Expressions: numbers, col("column"), infix + - * /, parentheses,
  if <expr> <cmp> <expr> then <expr> else <expr>   with <cmp> in < <= > >= ==
Functions:
  neg(e) abs(e) sq(e) sqrt_s(e) log_s(e) recip_s(e)
  add(a, b) sub(a, b) mul(a, b) div_s(a, b)
  if_then_else(a < b, x, y)
  group_agg(mean|std|min|max|count, key=col("cat"), value=e)
  bin(e, n_bins)            # n_bins in [2, 32]
  clip(e, lo, hi)
  zscore(e)
  cluster(k, col("a"), col("b"), ...)   # k in [2, 16], numeric columns
  date_part(year|month|day|dow|hour, col("dt"))
  elapsed_days(col("dt1"), col("dt2"))
Division and reciprocal are guarded (x/0 = 0); sqrt and log clamp negatives.
A `#` comment line above the statement describes the feature."""


def _load_prompt(name: str) -> str:
    return resources.files("malmas").joinpath("prompts", f"{name}.txt").read_text(
        encoding="utf-8"
    ).strip()


@dataclass(frozen=True)
class AgentRole:
    id: str
    system_prompt: str
    allowed_ops: frozenset


def _make_roles() -> dict[str, AgentRole]:
    return {
        role: AgentRole(role, _load_prompt(role), _ROLE_OPS[role])
        for role in ROLE_ORDER
    }


ROLES = _make_roles()

_ROUTER_PROMPT = _load_prompt("router")
_SUMMARY_PROMPT = _load_prompt("summary")
_GLOBAL_SUMMARY_PROMPT = _load_prompt("global_summary")


@dataclass(frozen=True)
class PromptContext:
    metadata: str
    effective_features: tuple[tuple[str, float], ...] = ()
    concept_notes: tuple[str, ...] = ()
    global_concepts: tuple[str, ...] = ()
    attempted_keys: tuple[str, ...] = ()
    dedup_keys: frozenset = frozenset()
    round: int = 1


@dataclass(frozen=True)
class RouterDecision:
    selected: tuple[str, ...]
    rationale: str
    strategy: str


@dataclass(frozen=True)
class TransformationSpec:
    program: object
    feature_name: str
    base_columns: tuple[str, ...]
    transform_type: str
    description: str
    round: int
    canonical_key: str


@dataclass
class ProposalResult:
    specs: list[TransformationSpec] = field(default_factory=list)
    rejected: list[ProcRecord] = field(default_factory=list)


def build_prompt(role: AgentRole, ctx: PromptContext, n_proposals: int) -> ChatRequest:
    """Deterministic prompt assembly; empty memory sections are omitted."""
    system = (
        f"{role.system_prompt}\n\n{DSL_REFERENCE}\n\n"
        f"Allowed operators for this role: {', '.join(sorted(role.allowed_ops))}."
    )
    parts = [f"Dataset:\n{ctx.metadata}"]
    if ctx.effective_features:
        shown = ctx.effective_features[-EFFECTIVE_BUDGET:]
        lines = "\n".join(f"- {name}: {value:.6g}" for name, value in shown)
        parts.append(f"Effective features so far (name: metric value):\n{lines}")
    if ctx.concept_notes:
        lines = "\n".join(f"- {note}" for note in ctx.concept_notes)
        parts.append(f"Strategy notes from earlier rounds:\n{lines}")
    if ctx.global_concepts:
        lines = "\n".join(f"- {note}" for note in ctx.global_concepts)
        parts.append(f"Team-wide guidance:\n{lines}")
    if ctx.attempted_keys:
        shown = ctx.attempted_keys[-ATTEMPTED_BUDGET:]
        lines = "\n".join(f"- {key}" for key in shown)
        parts.append(f"Do not repeat these transformations:\n{lines}")
    parts.append(
        f"Propose exactly {n_proposals} new feature transformations. Reply with "
        f"exactly {n_proposals} fenced ```dsl blocks. Each block holds one `#` "
        "comment line describing the feature, then one FEATURE statement using "
        "only the allowed operators. Use fresh feature names."
    )
    return ChatRequest(
        messages=[
            ChatMessage("system", system),
            ChatMessage("user", "\n\n".join(parts)),
        ],
        tag=f"{ctx.round}:{role.id}:0",
    )


_BLOCK_RE = re.compile(r"```dsl\s*\n(.*?)```", re.DOTALL)


def _extract_blocks(content: str) -> list[str]:
    return [m.group(1).strip() for m in _BLOCK_RE.finditer(content)]


def _description_of(block: str, program) -> str:
    for line in block.splitlines():
        line = line.strip()
        if line.startswith("#"):
            return line.lstrip("#").strip()
    return render(program)


def _validate_block(
    block: str,
    role: AgentRole,
    schema,
    seen_keys: set[str],
    seen_names: set[str],
    round_no: int,
):
    """Returns (spec, None) on success, (None, ProcRecord) on rejection."""

    def rejection(outcome: str, message: str, name: str = "", key: str = "", cols=()):
        return ProcRecord(
            base_columns=tuple(cols),
            transform_type=role.id,
            feature_name=name,
            description=message,
            round=round_no,
            canonical_key=key,
            outcome=outcome,
        )

    try:
        program = parse(block)
    except DslError as exc:
        return None, rejection("parse_error", str(exc))
    key = canonical_key(program)
    try:
        typed = typecheck(program, schema)
    except DslTypeError as exc:
        return None, rejection("type_error", str(exc), program.feature_name, key)
    if not typed.base_columns:
        return None, rejection(
            "type_error", "feature must reference at least one column",
            program.feature_name, key,
        )
    if program.feature_name in seen_names:
        return None, rejection(
            "type_error", f"feature name {program.feature_name!r} already used",
            program.feature_name, key, typed.base_columns,
        )
    if not (op_names(program.body) & role.allowed_ops):
        return None, rejection(
            "role_violation",
            f"program uses none of this role's operators ({', '.join(sorted(role.allowed_ops))})",
            program.feature_name, key, typed.base_columns,
        )
    if key in seen_keys:
        return None, rejection(
            "duplicate", "transformation already attempted",
            program.feature_name, key, typed.base_columns,
        )
    spec = TransformationSpec(
        program=program,
        feature_name=program.feature_name,
        base_columns=typed.base_columns,
        transform_type=role.id,
        description=_description_of(block, program),
        round=round_no,
        canonical_key=key,
    )
    return spec, None


def propose(
    role: AgentRole,
    ctx: PromptContext,
    backend: ChatBackend,
    schema,
    n_proposals: int,
) -> ProposalResult:
    """Ask the backend for proposals; validate, dedup, and repair.

    Parse, type, and role failures get up to 2 repair round-trips carrying the
    exact error messages. Duplicates are recorded but not repaired. Returns at
    most n_proposals specs; zero valid proposals is not an error.
    """
    result = ProposalResult()
    seen_keys = set(ctx.dedup_keys) | set(ctx.attempted_keys)
    seen_names: set[str] = set()
    request = build_prompt(role, ctx, n_proposals)

    for attempt in range(3):
        if attempt:
            request = _repair_request(
                role, repairable, n_proposals - len(result.specs), ctx.round, attempt
            )
        response = backend.complete(request)
        repairable = []
        for block in _extract_blocks(response.content):
            if len(result.specs) >= n_proposals:
                break
            spec, rejected = _validate_block(
                block, role, schema, seen_keys, seen_names, ctx.round
            )
            if spec is not None:
                result.specs.append(spec)
                seen_keys.add(spec.canonical_key)
                seen_names.add(spec.feature_name)
                continue
            result.rejected.append(rejected)
            if rejected.outcome in ("parse_error", "type_error", "role_violation"):
                repairable.append((block, rejected.description))
        if len(result.specs) >= n_proposals or not repairable:
            break
    return result


def _repair_request(
    role: AgentRole, failures: list[tuple[str, str]], remaining: int, round_no: int, seq: int
) -> ChatRequest:
    listed = "\n\n".join(
        f"Proposal:\n{block}\nError: {message}" for block, message in failures
    )
    user = (
        "These proposals failed validation:\n\n"
        f"{listed}\n\n"
        f"Resubmit up to {max(remaining, 1)} corrected proposals as fenced "
        "```dsl blocks, fixing exactly the reported errors."
    )
    system = (
        f"{role.system_prompt}\n\n{DSL_REFERENCE}\n\n"
        f"Allowed operators for this role: {', '.join(sorted(role.allowed_ops))}."
    )
    return ChatRequest(
        messages=[ChatMessage("system", system), ChatMessage("user", user)],
        tag=f"{round_no}:{role.id}:{seq}",
    )


def eligible_roles(schema) -> tuple[str, ...]:
    has_datetime = any(c.kind == DATETIME for c in schema)
    return tuple(r for r in ROLE_ORDER if r != "temporal" or has_datetime)


def _router_request(metadata: str, eligible: tuple[str, ...], global_concepts, round_no: int, seq: int, strict: bool) -> ChatRequest:
    catalog = "\n".join(f"- {r}: {_ROLE_BLURBS[r]}" for r in eligible)
    parts = [f"Dataset:\n{metadata}", f"Available strategy agents:\n{catalog}"]
    if global_concepts:
        lines = "\n".join(f"- {note}" for note in global_concepts)
        parts.append(f"Team-wide guidance:\n{lines}")
    instruction = "Select the agents to activate this round."
    if strict:
        instruction += " Your previous reply was not parseable."
    instruction += ' Reply with a JSON array of role ids, e.g. ["unary", "cross"].'
    parts.append(instruction)
    return ChatRequest(
        messages=[ChatMessage("system", _ROUTER_PROMPT), ChatMessage("user", "\n\n".join(parts))],
        tag=f"{round_no}:router:{seq}",
    )


_JSON_ARRAY_RE = re.compile(r"\[[^\[\]]*\]", re.DOTALL)


def _parse_router_reply(content: str, eligible: tuple[str, ...]) -> tuple[str, ...]:
    match = _JSON_ARRAY_RE.search(content)
    if not match:
        return ()
    try:
        names = json.loads(match.group(0))
    except json.JSONDecodeError:
        return ()
    if not isinstance(names, list):
        return ()
    wanted = {n for n in names if isinstance(n, str)}
    return tuple(r for r in eligible if r in wanted)


def route(
    metadata: str,
    schema,
    global_concepts,
    strategy: str,
    k: int,
    seed: int,
    backend: ChatBackend,
    round_no: int = 1,
) -> RouterDecision:
    """Pick the active roles for a round.

    temporal is eligible only when the schema has a datetime column. The llm
    strategy gets one retry on an unparseable reply, then falls back to the
    first 4 eligible roles.
    """
    eligible = eligible_roles(schema)
    if strategy == "all":
        return RouterDecision(eligible, "all eligible roles", "all")
    if strategy == "fixed_k":
        if k < 1:
            raise ConfigError("router k must be >= 1")
        return RouterDecision(eligible[:k], f"first {k} eligible roles", "fixed_k")
    if strategy == "random_k":
        if k < 1:
            raise ConfigError("router k must be >= 1")
        rng = np.random.default_rng(seed)
        size = min(k, len(eligible))
        picks = sorted(rng.choice(len(eligible), size=size, replace=False).tolist())
        return RouterDecision(
            tuple(eligible[i] for i in picks), f"seeded draw of {size} roles", "random_k"
        )
    if strategy != "llm":
        raise ConfigError(f"unknown router strategy {strategy!r}")

    for seq in range(2):
        request = _router_request(
            metadata, eligible, global_concepts, round_no, seq, strict=seq > 0
        )
        content = backend.complete(request).content
        selected = _parse_router_reply(content, eligible)
        if selected:
            rationale = content.splitlines()[0].strip() if content.strip() else "llm router"
            return RouterDecision(selected, rationale, "llm")
    fallback = eligible[:ROUTER_FALLBACK_K]
    return RouterDecision(
        fallback,
        f"fallback: first {len(fallback)} eligible roles (router reply unparseable)",
        "llm",
    )


def _parse_bullets(content: str, limit: int) -> list[str]:
    bullets = []
    for line in content.splitlines():
        line = line.strip()
        if line.startswith("- ") or line.startswith("* "):
            text = line[2:].strip()
            if text:
                bullets.append(text)
    return bullets[:limit]


def summarize_agent(
    role: AgentRole,
    proc_round: list[ProcRecord],
    feed_round: list[FeedRecord],
    prev_notes: tuple[ConceptNote, ...],
    backend: ChatBackend,
    min_effective: int,
    round_no: int,
) -> list[str]:
    """Distill one agent's round into at most 5 heuristics.

    Skips the backend call (keeping previous notes) when the round produced
    fewer than min_effective effective features or no records at all; keeps
    previous notes on backend failure too.
    """
    previous = [note.text for note in prev_notes]
    effective = sum(1 for rec in feed_round if rec.effective)
    if effective < min_effective or (not proc_round and not feed_round):
        return previous

    lines = []
    feed_by_name = {rec.feature_name: rec for rec in feed_round}
    for rec in proc_round:
        entry = f"- [{rec.outcome}] {rec.feature_name or '(unparsed)'}: {rec.description}"
        feedback = feed_by_name.get(rec.feature_name)
        if rec.outcome == "accepted" and feedback is not None:
            entry += f" (value={feedback.value:.6g}, gain={feedback.gain:+.6g})"
        lines.append(entry)
    user = (
        f"Round {round_no} record for the {role.id} strategy:\n"
        + "\n".join(lines)
        + "\n\nWrite at most 5 reusable heuristics as bullet lines."
    )
    request = ChatRequest(
        messages=[ChatMessage("system", _SUMMARY_PROMPT), ChatMessage("user", user)],
        tag=f"{round_no}:{role.id}-summary:0",
    )
    try:
        content = backend.complete(request).content
    except BackendError as exc:
        log.warning("summary for %s failed, keeping previous notes: %s", role.id, exc)
        return previous
    bullets = _parse_bullets(content, 5)
    return bullets if bullets else previous


def summarize_global(
    per_agent: dict[str, tuple[tuple[ConceptNote, ...], list[FeedRecord]]],
    prev_global: tuple[ConceptNote, ...],
    backend: ChatBackend,
    round_no: int,
) -> list[str]:
    """Aggregate active agents' notes and effective features into ≤ 8 bullets.

    Unchanged when no agent has notes and nothing was effective this round, or
    when the backend fails.
    """
    previous = [note.text for note in prev_global]
    has_signal = any(
        notes or any(rec.effective for rec in feeds)
        for notes, feeds in per_agent.values()
    )
    if not has_signal:
        return previous

    sections = []
    for role_id in ROLE_ORDER:
        if role_id not in per_agent:
            continue
        notes, feeds = per_agent[role_id]
        lines = [f"- {note.text}" for note in notes]
        lines += [
            f"- effective feature {rec.feature_name} (value={rec.value:.6g}, gain={rec.gain:+.6g})"
            for rec in feeds
            if rec.effective
        ]
        if lines:
            sections.append(f"{role_id}:\n" + "\n".join(lines))
    user = (
        f"Round {round_no} team record:\n\n"
        + "\n\n".join(sections)
        + "\n\nWrite at most 8 dataset-level guidance bullets."
    )
    request = ChatRequest(
        messages=[ChatMessage("system", _GLOBAL_SUMMARY_PROMPT), ChatMessage("user", user)],
        tag=f"{round_no}:global-summary:0",
    )
    try:
        content = backend.complete(request).content
    except BackendError as exc:
        log.warning("global summary failed, keeping previous notes: %s", exc)
        return previous
    bullets = _parse_bullets(content, 8)
    return bullets if bullets else previous
