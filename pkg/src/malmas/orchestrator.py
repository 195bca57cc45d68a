"""Round loop: routing, concurrent proposal/evaluation, memory, selection.

Rounds are strictly sequential. Within a round the active agents run in a
worker pool, but their results are merged in fixed role order, so scheduling
cannot change the outcome. The test split is sequestered behind an access
counter and opened exactly once, after the last round.
"""

from __future__ import annotations

import logging
import os
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .agents import ROLES, ROLE_ORDER, PromptContext, RouterDecision, TransformationSpec, propose, route, summarize_agent, summarize_global
from .backends import ChatBackend, ChatRequest, ChatResponse, TokenLedger
from .data import (
    CLASSIFICATION,
    Preprocessor,
    SplitSpec,
    Table,
    metadata_text,
    split,
)
from .dsl import FittedProgram, fit_evaluate, render, typecheck
from .errors import BackendError, ConfigError, DataError, EvalError
from .evaluator import (
    EvalReport,
    Evaluator,
    Metric,
    ModelSpec,
    default_metric,
    make_metric,
    score_split,
)
from .evaluator.cv import _make_model
from .jsonio import dump_canonical, read_json, write_json
from .memory import FeedRecord, MemoryBank, MemoryFlags, ProcRecord
from .seeds import derive_seed

log = logging.getLogger("malmas.orchestrator")

_ROLE_INDEX = {role: i for i, role in enumerate(ROLE_ORDER)}

RUN_FILES = ("config.json", "result.json", "ledger.json", "memory.json", "transcript.json")


@dataclass(frozen=True)
class RunConfig:
    rounds: int = 4
    top_n: int = 3
    proposals_per_agent: int = 5
    min_effective: int = 2
    router_strategy: str = "llm"
    router_k: int = 4
    model: ModelSpec = field(default_factory=lambda: ModelSpec.make("builtin_gbdt"))
    metric: str = ""  # empty: pick the task default
    folds: int = 5
    seed: int = 0
    train_fraction: float = 0.6
    memory: MemoryFlags = field(default_factory=MemoryFlags)
    require_positive_gain: bool = True
    # Alternative selection reading: each agent keeps its own top-N before
    # pooling, instead of one global top-N per round.
    per_agent_top_n: bool = False
    batch_eval: bool = False
    workers: int = 0  # 0: one per active agent, capped by cpu count

    def __post_init__(self):
        if self.rounds < 1:
            raise ConfigError("rounds must be >= 1")
        if self.top_n < 1:
            raise ConfigError("top_n must be >= 1")
        if self.proposals_per_agent < 1:
            raise ConfigError("proposals_per_agent must be >= 1")
        if self.min_effective < 0:
            raise ConfigError("min_effective must be >= 0")
        if self.folds < 2:
            raise ConfigError("folds must be >= 2")
        if not 0.0 < self.train_fraction < 1.0:
            raise ConfigError("train_fraction must be in (0, 1)")
        if self.router_strategy not in ("llm", "fixed_k", "random_k", "all"):
            raise ConfigError(f"unknown router strategy {self.router_strategy!r}")
        if self.workers < 0:
            raise ConfigError("workers must be >= 0")

    def to_dict(self) -> dict:
        return {
            "rounds": self.rounds,
            "top_n": self.top_n,
            "proposals_per_agent": self.proposals_per_agent,
            "min_effective": self.min_effective,
            "router_strategy": self.router_strategy,
            "router_k": self.router_k,
            "model": self.model.to_dict(),
            "metric": self.metric,
            "folds": self.folds,
            "seed": self.seed,
            "train_fraction": self.train_fraction,
            "memory_flags": self.memory.to_dict(),
            "require_positive_gain": self.require_positive_gain,
            "per_agent_top_n": self.per_agent_top_n,
            "batch_eval": self.batch_eval,
            "workers": self.workers,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        defaults = cls()
        return cls(
            rounds=int(data.get("rounds", defaults.rounds)),
            top_n=int(data.get("top_n", defaults.top_n)),
            proposals_per_agent=int(data.get("proposals_per_agent", defaults.proposals_per_agent)),
            min_effective=int(data.get("min_effective", defaults.min_effective)),
            router_strategy=data.get("router_strategy", defaults.router_strategy),
            router_k=int(data.get("router_k", defaults.router_k)),
            model=ModelSpec.from_dict(data["model"]) if "model" in data else defaults.model,
            metric=data.get("metric", ""),
            folds=int(data.get("folds", defaults.folds)),
            seed=int(data.get("seed", defaults.seed)),
            train_fraction=float(data.get("train_fraction", defaults.train_fraction)),
            memory=MemoryFlags.from_dict(data.get("memory_flags", {})),
            require_positive_gain=bool(data.get("require_positive_gain", True)),
            per_agent_top_n=bool(data.get("per_agent_top_n", False)),
            batch_eval=bool(data.get("batch_eval", False)),
            workers=int(data.get("workers", 0)),
        )


@dataclass(frozen=True)
class RoundReport:
    round: int
    selected_roles: tuple[str, ...]
    rationale: str
    strategy: str
    candidates: int
    accepted: int
    selected_features: tuple[tuple[str, float], ...]
    metric_before: float
    metric_after: float
    prompt_tokens: int
    completion_tokens: int
    agent_errors: tuple[str, ...] = ()

    def to_dict(self) -> dict:
        return {
            "round": self.round,
            "selected_roles": list(self.selected_roles),
            "rationale": self.rationale,
            "strategy": self.strategy,
            "candidates": self.candidates,
            "accepted": self.accepted,
            "selected_features": [[name, gain] for name, gain in self.selected_features],
            "metric_before": self.metric_before,
            "metric_after": self.metric_after,
            "tokens": {"prompt": self.prompt_tokens, "completion": self.completion_tokens},
            "agent_errors": list(self.agent_errors),
        }


@dataclass(frozen=True)
class AdmittedFeature:
    spec: TransformationSpec
    fitted: FittedProgram
    report: EvalReport
    round: int

    def to_dict(self) -> dict:
        return {
            "name": self.spec.feature_name,
            "program": render(self.spec.program),
            "description": self.spec.description,
            "transform_type": self.spec.transform_type,
            "base_columns": list(self.spec.base_columns),
            "round": self.round,
            "gain": self.report.gain,
            "value": self.report.value,
        }


@dataclass
class RunResult:
    config: RunConfig
    metric_name: str
    reports: list[RoundReport]
    base_features: tuple[str, ...]
    final_features: tuple[str, ...]
    admitted: list[AdmittedFeature]
    final_cv_metric: float
    test_metric: float
    test_accesses: int
    ledger: TokenLedger
    bank: MemoryBank
    train: Table

    def to_dict(self) -> dict:
        return {
            "config": self.config.to_dict(),
            "metric": self.metric_name,
            "rounds": [report.to_dict() for report in self.reports],
            "base_features": list(self.base_features),
            "final_features": list(self.final_features),
            "admitted": [entry.to_dict() for entry in self.admitted],
            "final_cv_metric": self.final_cv_metric,
            "test_metric": self.test_metric,
            "test_accesses": self.test_accesses,
            "memory_path": "memory.json",
            "ledger": self.ledger.to_dict(),
        }


class _Sequestered:
    """Holds the test split; opening it more than once is a bug."""

    def __init__(self, table: Table):
        self._table = table
        self.accesses = 0

    def open(self) -> Table:
        self.accesses += 1
        if self.accesses > 1:
            raise DataError("test split opened more than once")
        return self._table


class RecordingBackend(ChatBackend):
    """Wraps a backend and captures every exchange keyed by request tag.

    The captured transcript is a valid scripted-backend script, which is what
    makes replay possible. Tags must be unique within a run; a repeat means
    the orchestration is mislabeling requests.
    """

    def __init__(self, inner: ChatBackend):
        super().__init__(inner.ledger)
        self.inner = inner
        self.transcript: dict[str, dict] = {}
        self._lock = threading.Lock()

    def describe(self) -> dict:
        return self.inner.describe()

    def _complete(self, request: ChatRequest) -> ChatResponse:
        response = self.inner._complete(request)
        with self._lock:
            if request.tag in self.transcript:
                raise BackendError(f"duplicate request tag {request.tag!r}")
            self.transcript[request.tag] = {
                "content": response.content,
                "prompt_tokens": response.prompt_tokens,
                "completion_tokens": response.completion_tokens,
            }
        return response


def select_top_n(
    candidates: list[tuple[TransformationSpec, EvalReport]],
    n: int,
    require_positive: bool,
) -> list[TransformationSpec]:
    """Gain-descending selection; ties break by role order, then name."""
    pool = [
        (spec, report)
        for spec, report in candidates
        if not require_positive or report.gain > 0
    ]
    pool.sort(
        key=lambda pair: (
            -pair[1].gain,
            _ROLE_INDEX[pair[0].transform_type],
            pair[0].feature_name,
        )
    )
    return [spec for spec, _ in pool[:n]]


def update_metadata(metadata: str, selected: list[AdmittedFeature]) -> str:
    """Append derived-feature sections, one per round, in round order."""
    if not selected:
        return metadata
    rounds: dict[int, list[AdmittedFeature]] = {}
    for entry in selected:
        rounds.setdefault(entry.round, []).append(entry)
    sections = [metadata]
    for round_no in sorted(rounds):
        lines = [f"derived features (round {round_no}):"]
        for entry in rounds[round_no]:
            lines.append(
                f"- {entry.spec.feature_name} = {render(entry.spec.program)}"
                f" | {entry.spec.description} | gain {entry.report.gain:+.6g}"
            )
        sections.append("\n".join(lines))
    return "\n\n".join(sections)


def prepare(data: Table, config: RunConfig) -> tuple[Table, _Sequestered, Preprocessor]:
    """Split first, then fit encoders on train only; test stays sequestered."""
    raw_train, raw_test = split(
        data, SplitSpec(config.train_fraction, derive_seed(config.seed, "split"))
    )
    prep = Preprocessor().fit(raw_train)
    return prep.transform(raw_train), _Sequestered(prep.transform(raw_test)), prep


@dataclass
class _AgentOutcome:
    role: str
    rejected: list[ProcRecord] = field(default_factory=list)
    evaluated: list[tuple[TransformationSpec, np.ndarray, FittedProgram, EvalReport]] = field(default_factory=list)
    error: str = ""


def _run_agent(
    role: str,
    ctx: PromptContext,
    backend: ChatBackend,
    train: Table,
    evaluator: Evaluator,
    config: RunConfig,
    round_no: int,
) -> _AgentOutcome:
    """One agent's propose + fit + evaluate pipeline; failures stay local."""
    outcome = _AgentOutcome(role)
    schema = tuple(c for c in train.schema if c.name != train.target)
    try:
        proposal = propose(
            ROLES[role], ctx, backend, schema, config.proposals_per_agent
        )
        outcome.rejected = proposal.rejected
        fitted_by_name: dict[str, tuple[TransformationSpec, np.ndarray, FittedProgram]] = {}
        for spec in proposal.specs:
            # The schema handed to the typechecker excludes the target, so a
            # proposal named exactly like it (or like any column) must be
            # caught here before with_column would raise mid-evaluation.
            if spec.feature_name in train.columns:
                outcome.rejected.append(ProcRecord(
                    base_columns=spec.base_columns,
                    transform_type=role,
                    feature_name=spec.feature_name,
                    description="feature name is already a column",
                    round=round_no,
                    canonical_key=spec.canonical_key,
                    outcome="type_error",
                ))
                continue
            typed = typecheck(spec.program, schema)
            seed = derive_seed(config.seed, "transform", str(round_no), role, spec.feature_name)
            values, fitted = fit_evaluate(typed, train, seed)
            fitted_by_name[spec.feature_name] = (spec, values, fitted)
        pairs = [(name, values) for name, (_, values, _) in fitted_by_name.items()]
        reports = evaluator.evaluate_candidates(train, pairs)
        for report in reports:
            spec, values, fitted = fitted_by_name[report.feature_name]
            outcome.evaluated.append((spec, values, fitted, report))
    except (BackendError, EvalError) as exc:
        outcome.error = f"{role}: {exc}"
        log.warning("agent %s aborted in round %d: %s", role, round_no, exc)
    return outcome


def run(
    config: RunConfig,
    data: Table,
    backend: ChatBackend,
    external=None,
) -> RunResult:
    """Execute the full feature-generation loop on a raw table."""
    train, vault, _ = prepare(data, config)
    metric = make_metric(config.metric) if config.metric else default_metric(data.task)
    evaluator = Evaluator(
        config.model,
        metric,
        config.folds,
        derive_seed(config.seed, "cv"),
        external=external,
        batch=config.batch_eval,
    )
    bank = MemoryBank(ROLE_ORDER, config.memory)
    base_features = train.feature_names()
    metadata = metadata_text(train)
    admitted: list[AdmittedFeature] = []
    reports: list[RoundReport] = []
    tokens_seen: dict[int, tuple[int, int]] = {}

    for round_no in range(1, config.rounds + 1):
        bank.begin_round(round_no)
        schema = tuple(c for c in train.schema if c.name != train.target)
        decision = route(
            metadata,
            schema,
            tuple(note.text for note in bank.global_concepts()),
            config.router_strategy,
            config.router_k,
            derive_seed(config.seed, "router", str(round_no)),
            backend,
            round_no,
        )
        metric_before = evaluator.baseline(train)

        contexts = {
            role: PromptContext(
                metadata=metadata,
                effective_features=tuple(
                    (rec.feature_name, rec.value)
                    for rec in bank.feed_records(role)
                    if rec.effective
                ),
                concept_notes=tuple(note.text for note in bank.concepts(role)),
                global_concepts=tuple(note.text for note in bank.global_concepts()),
                attempted_keys=tuple(
                    rec.canonical_key
                    for rec in bank.proc_records(role)
                    if rec.canonical_key
                ),
                dedup_keys=bank.accepted_keys(),
                round=round_no,
            )
            for role in decision.selected
        }
        workers = config.workers or min(len(decision.selected), os.cpu_count() or 1)
        with ThreadPoolExecutor(max_workers=workers) as pool:
            futures = {
                role: pool.submit(
                    _run_agent, role, contexts[role], backend, train,
                    evaluator, config, round_no,
                )
                for role in decision.selected
            }
            outcomes = {role: futures[role].result() for role in decision.selected}

        # Merge in role order so concurrency cannot reorder collisions.
        pooled: list[tuple[TransformationSpec, np.ndarray, FittedProgram, EvalReport]] = []
        agent_errors = []
        used_names = set(train.columns)
        used_keys: set[str] = set()
        rejected_count = 0
        for role in decision.selected:
            outcome = outcomes[role]
            if outcome.error:
                agent_errors.append(outcome.error)
            for record in outcome.rejected:
                bank.append_proc(role, record)
                rejected_count += 1
            for spec, values, fitted, report in outcome.evaluated:
                record = ProcRecord(
                    base_columns=spec.base_columns,
                    transform_type=role,
                    feature_name=spec.feature_name,
                    description=spec.description,
                    round=round_no,
                    canonical_key=spec.canonical_key,
                    outcome="accepted",
                )
                if spec.feature_name in used_names:
                    bank.append_proc(role, replace(
                        record,
                        outcome="type_error",
                        description="feature name collides with another agent's proposal",
                    ))
                    rejected_count += 1
                    continue
                if spec.canonical_key in used_keys or bank.is_duplicate(spec.canonical_key):
                    bank.append_proc(role, replace(record, outcome="duplicate"))
                    rejected_count += 1
                    continue
                bank.append_proc(role, record)
                bank.append_feed(role, FeedRecord(
                    feature_name=spec.feature_name,
                    metric=metric.name,
                    value=report.value,
                    effective=report.effective,
                    round=round_no,
                    gain=report.gain,
                ))
                used_names.add(spec.feature_name)
                used_keys.add(spec.canonical_key)
                pooled.append((spec, values, fitted, report))

        if config.memory.con:
            for role in decision.selected:
                proc_round = [r for r in bank.proc_records(role) if r.round == round_no]
                feed_round = [r for r in bank.feed_records(role) if r.round == round_no]
                previous = bank.concepts(role)
                notes = summarize_agent(
                    ROLES[role], proc_round, feed_round, previous,
                    backend, config.min_effective, round_no,
                )
                if notes != [note.text for note in previous]:
                    bank.set_concepts(role, notes, round_no)
        if config.memory.use_global:
            per_agent = {
                role: (
                    bank.concepts(role),
                    [r for r in bank.feed_records(role) if r.round == round_no],
                )
                for role in decision.selected
            }
            previous = bank.global_concepts()
            notes = summarize_global(per_agent, previous, backend, round_no)
            if notes != [note.text for note in previous]:
                bank.set_global(notes, round_no)

        candidates = [(spec, report) for spec, _, _, report in pooled]
        if config.per_agent_top_n:
            chosen: list[TransformationSpec] = []
            for role in decision.selected:
                own = [(s, r) for s, r in candidates if s.transform_type == role]
                chosen.extend(select_top_n(own, config.top_n, config.require_positive_gain))
        else:
            chosen = select_top_n(candidates, config.top_n, config.require_positive_gain)

        chosen_names = [spec.feature_name for spec in chosen]
        by_name = {spec.feature_name: (spec, values, fitted, report)
                   for spec, values, fitted, report in pooled}
        round_admitted = []
        for name in chosen_names:
            spec, values, fitted, report = by_name[name]
            train = train.with_column(name, values)
            entry = AdmittedFeature(spec, fitted, report, round_no)
            admitted.append(entry)
            round_admitted.append(entry)

        if round_admitted:
            values_ = [entry.report.value for entry in round_admitted]
            metric_after = max(values_) if metric.direction == "maximize" else min(values_)
        else:
            metric_after = metric_before
        metadata = update_metadata(metadata_text(train), admitted)

        by_round = backend.ledger.by_round()
        prompt_total, completion_total = by_round.get(round_no, (0, 0))
        reports.append(RoundReport(
            round=round_no,
            selected_roles=decision.selected,
            rationale=decision.rationale,
            strategy=decision.strategy,
            candidates=len(pooled) + rejected_count,
            accepted=len(pooled),
            selected_features=tuple(
                (entry.spec.feature_name, entry.report.gain) for entry in round_admitted
            ),
            metric_before=metric_before,
            metric_after=metric_after,
            prompt_tokens=prompt_total,
            completion_tokens=completion_total,
            agent_errors=tuple(agent_errors),
        ))

    final_cv = evaluator.baseline(train)

    test = vault.open()
    for entry in admitted:
        test = test.with_column(entry.spec.feature_name, entry.fitted.apply(test))
    test_metric = _score_test(train, test, config.model, metric)

    return RunResult(
        config=config,
        metric_name=metric.name,
        reports=reports,
        base_features=base_features,
        final_features=train.feature_names(),
        admitted=admitted,
        final_cv_metric=final_cv,
        test_metric=test_metric,
        test_accesses=vault.accesses,
        ledger=backend.ledger,
        bank=bank,
        train=train,
    )


def _score_test(train: Table, test: Table, spec: ModelSpec, metric: Metric) -> float:
    """Train the downstream model on the full train split, score on test.

    The external adapter only speaks CV evaluation, so an external spec is
    scored with the built-in trees at the same size and rate.
    """
    if spec.kind == "external":
        spec = ModelSpec.make(
            "builtin_gbdt", trees=spec.trees, learning_rate=spec.learning_rate
        )
    model = _make_model(spec, train.task)
    names = train.feature_names()
    X_train = train.matrix(names)
    y_train = np.asarray(train.columns[train.target], dtype=float)
    X_test = test.matrix(names)
    y_test = np.asarray(test.columns[test.target], dtype=float)
    model.fit(X_train, y_train)
    return score_split(model, metric, X_test, y_test, train.task)


# --- run directory ------------------------------------------------------------


def write_run_dir(
    out: str | Path,
    config: RunConfig,
    data_info: dict,
    result: RunResult,
    transcript: dict,
) -> Path:
    """Persist a run: config, per-round reports, memory, ledger, transcript.

    Everything is canonical JSON with no timestamps, so identical runs produce
    byte-identical directories.
    """
    out = Path(out)
    (out / "rounds").mkdir(parents=True, exist_ok=True)
    write_json(out / "config.json", {**config.to_dict(), "data": data_info})
    for report in result.reports:
        write_json(out / "rounds" / f"round-{report.round}.json", report.to_dict())
    result.bank.save(out / "memory.json")
    write_json(out / "ledger.json", result.ledger.to_dict())
    write_json(out / "transcript.json", transcript)
    write_json(out / "result.json", result.to_dict())
    return out


def run_and_persist(
    config: RunConfig,
    data: Table,
    backend: ChatBackend,
    out: str | Path,
    data_info: dict,
    external=None,
) -> RunResult:
    recorder = RecordingBackend(backend)
    result = run(config, data, recorder, external=external)
    write_run_dir(out, config, data_info, result, recorder.transcript)
    return result


def replay(run_dir: str | Path, scratch: str | Path) -> list[str]:
    """Re-execute a persisted run from its transcript and diff the artifacts.

    Returns the relative paths whose bytes differ (empty means verified).
    The replay is written under `scratch`, never into the original directory.
    """
    from .backends import ScriptedBackend
    from .data import load_csv
    from .evaluator.external import ExternalEvaluator

    run_dir = Path(run_dir)
    stored = read_json(run_dir / "config.json")
    config = RunConfig.from_dict(stored)
    data_info = stored.get("data")
    if not data_info:
        raise ConfigError(f"{run_dir / 'config.json'} has no data section")
    data = load_csv(data_info["path"], data_info["target"], data_info["task"])

    ledger = TokenLedger()
    backend = ScriptedBackend(str(run_dir / "transcript.json"), ledger)
    external = None
    try:
        if config.model.kind == "external":
            external = ExternalEvaluator(config.model.external_cmd)
        run_and_persist(config, data, backend, scratch, data_info, external=external)
    finally:
        if external is not None:
            external.close()

    mismatches = []
    names = [name for name in RUN_FILES]
    names += sorted(
        f"rounds/{p.name}" for p in (run_dir / "rounds").glob("round-*.json")
    )
    for name in names:
        original = (run_dir / name)
        replayed = (Path(scratch) / name)
        if not replayed.exists() or original.read_bytes() != replayed.read_bytes():
            mismatches.append(name)
    return mismatches


# --- reporting ----------------------------------------------------------------


def _table(rows: list[list[str]], header: list[str]) -> str:
    widths = [max(len(str(row[i])) for row in [header] + rows) for i in range(len(header))]
    def fmt(row):
        return "  ".join(str(cell).ljust(widths[i]) for i, cell in enumerate(row)).rstrip()
    lines = [fmt(header), fmt(["-" * w for w in widths])]
    lines += [fmt(row) for row in rows]
    return "\n".join(lines)


def report_text(result: dict) -> str:
    """Plain-text report: per-round metrics, token usage, final test metric."""
    metric = result["metric"]
    rows = []
    for rnd in result["rounds"]:
        selected = ", ".join(name for name, _ in rnd["selected_features"]) or "-"
        rows.append([
            rnd["round"],
            ", ".join(rnd["selected_roles"]),
            f"{rnd['metric_before']:.6g}",
            f"{rnd['metric_after']:.6g}",
            selected,
        ])
    sections = [
        f"metric: {metric}",
        _table(rows, ["round", "agents", "before", "after", "selected"]),
    ]

    per_tag = result["ledger"]["per_tag"]
    grouped: dict[tuple[int, str], list[int]] = {}
    for tag, counts in per_tag.items():
        round_no, agent = tag.split(":")[0], tag.split(":")[1]
        key = (int(round_no), agent)
        entry = grouped.setdefault(key, [0, 0])
        entry[0] += counts["prompt_tokens"]
        entry[1] += counts["completion_tokens"]
    token_rows = [
        [round_no, agent, prompt, completion]
        for (round_no, agent), (prompt, completion) in sorted(grouped.items())
    ]
    totals = result["ledger"]["total"]
    token_rows.append(["", "total", totals["prompt_tokens"], totals["completion_tokens"]])
    sections.append(_table(token_rows, ["round", "agent", "prompt", "completion"]))
    sections.append(
        f"final train CV {metric}: {result['final_cv_metric']:.6g}\n"
        f"held-out test {metric}: {result['test_metric']:.6g}"
    )
    return "\n\n".join(sections)
