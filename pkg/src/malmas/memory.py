"""Typed memory stores for the feature-generation loop.

Four kinds: procedural records (every proposal attempt with its outcome),
feedback records (every evaluated candidate with its gain), per-agent concept
notes, and run-wide global concepts. Proc/feed stores are append-only traces;
concept stores are replaced wholesale at round barriers. Each kind has an
enable flag so ablations can turn a component off: disabled reads return
empty, disabled writes are dropped.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from pathlib import Path

from .errors import MemoryStateError
from .jsonio import dump_canonical, read_json

SNAPSHOT_VERSION = 1

OUTCOMES = ("accepted", "parse_error", "type_error", "role_violation", "duplicate")

MAX_CONCEPT_NOTES = 5
MAX_GLOBAL_NOTES = 8


@dataclass(frozen=True)
class ProcRecord:
    base_columns: tuple[str, ...]
    transform_type: str
    feature_name: str
    description: str
    round: int
    canonical_key: str
    outcome: str

    def __post_init__(self):
        if self.outcome not in OUTCOMES:
            raise MemoryStateError(f"unknown outcome {self.outcome!r}")
        if self.round < 1:
            raise MemoryStateError("round must be >= 1")
        if self.outcome == "accepted" and not self.base_columns:
            raise MemoryStateError("accepted records must name their base columns")


@dataclass(frozen=True)
class FeedRecord:
    feature_name: str
    metric: str
    value: float
    effective: bool
    round: int
    gain: float

    def __post_init__(self):
        if self.round < 1:
            raise MemoryStateError("round must be >= 1")
        if self.effective != (self.gain > 0):
            raise MemoryStateError("effective flag must equal (gain > 0)")


@dataclass(frozen=True)
class ConceptNote:
    text: str
    round: int

    def __post_init__(self):
        if not self.text:
            raise MemoryStateError("concept notes must be nonempty")


@dataclass(frozen=True)
class MemoryFlags:
    proc: bool = True
    feed: bool = True
    con: bool = True
    use_global: bool = True

    def to_dict(self) -> dict:
        return {"proc": self.proc, "feed": self.feed, "con": self.con, "global": self.use_global}

    @classmethod
    def from_dict(cls, data: dict) -> "MemoryFlags":
        return cls(
            proc=bool(data.get("proc", True)),
            feed=bool(data.get("feed", True)),
            con=bool(data.get("con", True)),
            use_global=bool(data.get("global", True)),
        )


@dataclass
class _AgentStores:
    proc: list = field(default_factory=list)
    feed: list = field(default_factory=list)
    concepts: list = field(default_factory=list)


class MemoryBank:
    """All memory stores for one run, gated by per-component flags."""

    def __init__(self, roles: tuple[str, ...], flags: MemoryFlags = MemoryFlags()):
        self.roles = tuple(roles)
        self.flags = flags
        self.round = 0
        self._agents = {role: _AgentStores() for role in self.roles}
        self._global: list[ConceptNote] = []
        self._accepted_keys: set[str] = set()

    def begin_round(self, round_no: int) -> None:
        if round_no != self.round + 1:
            raise MemoryStateError(f"round {round_no} does not follow round {self.round}")
        self.round = round_no

    def _stores(self, role: str) -> _AgentStores:
        if role not in self._agents:
            raise MemoryStateError(f"unknown role {role!r}")
        return self._agents[role]

    def append_proc(self, role: str, record: ProcRecord) -> None:
        stores = self._stores(role)
        if not self.flags.proc:
            return
        if record.round != self.round:
            raise MemoryStateError(f"record is for round {record.round}, current round is {self.round}")
        stores.proc.append(record)
        if record.outcome == "accepted":
            self._accepted_keys.add(record.canonical_key)

    def append_feed(self, role: str, record: FeedRecord) -> None:
        stores = self._stores(role)
        if not self.flags.feed:
            return
        if record.round != self.round:
            raise MemoryStateError(f"record is for round {record.round}, current round is {self.round}")
        stores.feed.append(record)

    def proc_records(self, role: str) -> tuple[ProcRecord, ...]:
        if not self.flags.proc:
            return ()
        return tuple(self._stores(role).proc)

    def feed_records(self, role: str) -> tuple[FeedRecord, ...]:
        if not self.flags.feed:
            return ()
        return tuple(self._stores(role).feed)

    def effective_count(self, role: str, round_no: int) -> int:
        return sum(
            1 for rec in self.feed_records(role)
            if rec.round == round_no and rec.effective
        )

    def set_concepts(self, role: str, notes: list[str], round_no: int) -> None:
        stores = self._stores(role)
        if not self.flags.con:
            return
        if len(notes) > MAX_CONCEPT_NOTES:
            raise MemoryStateError(f"at most {MAX_CONCEPT_NOTES} concept notes per agent")
        stores.concepts = [ConceptNote(text, round_no) for text in notes]

    def concepts(self, role: str) -> tuple[ConceptNote, ...]:
        if not self.flags.con:
            return ()
        return tuple(self._stores(role).concepts)

    def set_global(self, notes: list[str], round_no: int) -> None:
        if not self.flags.use_global:
            return
        if len(notes) > MAX_GLOBAL_NOTES:
            raise MemoryStateError(f"at most {MAX_GLOBAL_NOTES} global notes")
        self._global = [ConceptNote(text, round_no) for text in notes]

    def global_concepts(self) -> tuple[ConceptNote, ...]:
        if not self.flags.use_global:
            return ()
        return tuple(self._global)

    def accepted_keys(self) -> frozenset:
        if not self.flags.proc:
            return frozenset()
        return frozenset(self._accepted_keys)

    def is_duplicate(self, key: str) -> bool:
        return key in self.accepted_keys()

    # --- persistence ----------------------------------------------------------

    def snapshot(self) -> dict:
        agents = {}
        for role in self.roles:
            stores = self._agents[role]
            agents[role] = {
                "proc": [asdict(r) for r in stores.proc],
                "feed": [asdict(r) for r in stores.feed],
                "concepts": [asdict(n) for n in stores.concepts],
            }
        return {
            "schema_version": SNAPSHOT_VERSION,
            "round": self.round,
            "agents": agents,
            "global": [asdict(n) for n in self._global],
        }

    def save(self, path: str | Path) -> None:
        Path(path).write_text(dump_canonical(self.snapshot()), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path, flags: MemoryFlags = MemoryFlags()) -> "MemoryBank":
        data = read_json(path)
        version = data.get("schema_version")
        if version != SNAPSHOT_VERSION:
            raise MemoryStateError(
                f"snapshot schema_version {version!r} is not supported (expected {SNAPSHOT_VERSION})"
            )
        bank = cls(tuple(data["agents"].keys()), flags)
        bank.round = int(data["round"])
        for role, stores in data["agents"].items():
            agent = bank._agents[role]
            for rec in stores["proc"]:
                record = ProcRecord(
                    base_columns=tuple(rec["base_columns"]),
                    transform_type=rec["transform_type"],
                    feature_name=rec["feature_name"],
                    description=rec["description"],
                    round=rec["round"],
                    canonical_key=rec["canonical_key"],
                    outcome=rec["outcome"],
                )
                agent.proc.append(record)
                if record.outcome == "accepted":
                    bank._accepted_keys.add(record.canonical_key)
            for rec in stores["feed"]:
                agent.feed.append(FeedRecord(
                    feature_name=rec["feature_name"],
                    metric=rec["metric"],
                    value=rec["value"],
                    effective=rec["effective"],
                    round=rec["round"],
                    gain=rec["gain"],
                ))
            agent.concepts = [ConceptNote(n["text"], n["round"]) for n in stores["concepts"]]
        bank._global = [ConceptNote(n["text"], n["round"]) for n in data["global"]]
        return bank
