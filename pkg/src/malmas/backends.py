"""Chat-completion backends and token accounting.

Three interchangeable implementations: an OpenAI-compatible HTTP client, a
scripted replayer keyed by request tag, and an offline heuristic that
synthesizes valid proposals from a schema. Requests carry a "round:agent:seq"
tag; the scripted backend looks responses up by that tag, which keeps replay
stateless and safe under concurrent agents.
"""

from __future__ import annotations

import json
import math
import os
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    BackendError, ConfigError, MalformedReplyError, RetryExhaustedError,
    ScriptKeyError,
)
from .seeds import derive_seed

API_KEY_ENV = "MALMAS_API_KEY"

_CHAT_ROLES = ("system", "user", "assistant")


@dataclass(frozen=True)
class ChatMessage:
    role: str
    content: str

    def __post_init__(self):
        if self.role not in _CHAT_ROLES:
            raise ConfigError(f"unknown chat role {self.role!r}")


@dataclass
class ChatRequest:
    messages: list[ChatMessage]
    temperature: float = 1.0
    max_tokens: int = 1024
    tag: str = ""

    def __post_init__(self):
        if not self.messages:
            raise ConfigError("a chat request needs at least one message")

    def prompt_text(self) -> str:
        return "\n".join(m.content for m in self.messages)


@dataclass(frozen=True)
class ChatResponse:
    content: str
    prompt_tokens: int
    completion_tokens: int

    def __post_init__(self):
        if self.prompt_tokens < 0 or self.completion_tokens < 0:
            raise BackendError("token counts must be >= 0")


def approx_tokens(text: str) -> int:
    """Character-count estimate used when no real usage numbers exist."""
    return math.ceil(len(text) / 4)


class TokenLedger:
    """Per-tag prompt/completion token counts; safe for concurrent writers."""

    def __init__(self):
        self._lock = threading.Lock()
        self._per_tag: dict[str, list[int]] = {}

    def record(self, tag: str, prompt_tokens: int, completion_tokens: int) -> None:
        with self._lock:
            entry = self._per_tag.setdefault(tag, [0, 0])
            entry[0] += prompt_tokens
            entry[1] += completion_tokens

    def totals(self) -> tuple[int, int]:
        with self._lock:
            prompt = sum(v[0] for v in self._per_tag.values())
            completion = sum(v[1] for v in self._per_tag.values())
        return prompt, completion

    def rows(self) -> list[tuple[str, int, int]]:
        with self._lock:
            return sorted((tag, v[0], v[1]) for tag, v in self._per_tag.items())

    def by_round(self) -> dict[int, tuple[int, int]]:
        grouped: dict[int, list[int]] = {}
        for tag, prompt, completion in self.rows():
            round_no = int(tag.split(":", 1)[0])
            entry = grouped.setdefault(round_no, [0, 0])
            entry[0] += prompt
            entry[1] += completion
        return {r: (v[0], v[1]) for r, v in sorted(grouped.items())}

    def to_dict(self) -> dict:
        prompt, completion = self.totals()
        return {
            "per_tag": {
                tag: {"prompt_tokens": p, "completion_tokens": c}
                for tag, p, c in self.rows()
            },
            "total": {"prompt_tokens": prompt, "completion_tokens": completion},
        }


class ChatBackend:
    """Base class: subclasses produce a response, the base records tokens."""

    def __init__(self, ledger: TokenLedger):
        self.ledger = ledger

    def complete(self, request: ChatRequest) -> ChatResponse:
        response = self._complete(request)
        self.ledger.record(request.tag, response.prompt_tokens, response.completion_tokens)
        return response

    def _complete(self, request: ChatRequest) -> ChatResponse:
        raise NotImplementedError

    def describe(self) -> dict:
        raise NotImplementedError


class OpenAIBackend(ChatBackend):
    """OpenAI-compatible chat-completions client.

    Up to 3 tries with exponential backoff (1 s, 2 s) on transport errors,
    429, and 5xx; other HTTP errors fail immediately. The API key comes from
    the MALMAS_API_KEY environment variable unless passed explicitly.
    """

    def __init__(
        self,
        endpoint: str,
        model: str,
        ledger: TokenLedger,
        api_key: str | None = None,
        timeout: float = 120.0,
        retries: int = 3,
        session=None,
    ):
        super().__init__(ledger)
        if not endpoint:
            raise ConfigError("openai backend needs an endpoint URL")
        self.endpoint = endpoint
        self.model = model
        self.api_key = api_key if api_key is not None else os.environ.get(API_KEY_ENV)
        self.timeout = timeout
        self.retries = retries
        if session is None:
            import requests

            session = requests.Session()
        self.session = session

    def describe(self) -> dict:
        return {"kind": "openai", "endpoint": self.endpoint, "model": self.model}

    def _complete(self, request: ChatRequest) -> ChatResponse:
        import requests

        body = {
            "model": self.model,
            "messages": [{"role": m.role, "content": m.content} for m in request.messages],
            "temperature": request.temperature,
            "max_tokens": request.max_tokens,
        }
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"

        last_error = None
        for attempt in range(self.retries):
            if attempt:
                time.sleep(2 ** (attempt - 1))
            try:
                reply = self.session.post(
                    self.endpoint, json=body, headers=headers, timeout=self.timeout
                )
            except requests.RequestException as exc:
                last_error = f"transport error: {exc}"
                continue
            if reply.status_code == 429 or reply.status_code >= 500:
                last_error = f"HTTP {reply.status_code}"
                continue
            if reply.status_code != 200:
                raise BackendError(f"HTTP {reply.status_code}: {reply.text[:200]}")
            return self._parse(request, reply)
        raise RetryExhaustedError(
            f"gave up after {self.retries} attempts ({last_error})"
        )

    def _parse(self, request: ChatRequest, reply) -> ChatResponse:
        try:
            data = reply.json()
        except ValueError as exc:
            raise MalformedReplyError(f"endpoint returned non-JSON: {exc}") from exc
        try:
            content = data["choices"][0]["message"]["content"]
        except (KeyError, IndexError, TypeError) as exc:
            raise MalformedReplyError(f"endpoint reply missing choices: {exc}") from exc
        usage = data.get("usage") or {}
        return ChatResponse(
            content=content,
            prompt_tokens=int(usage.get("prompt_tokens", approx_tokens(request.prompt_text()))),
            completion_tokens=int(usage.get("completion_tokens", approx_tokens(content))),
        )


class ScriptedBackend(ChatBackend):
    """Replays canned responses keyed by request tag.

    Entry values may be a plain string, an object {content, prompt_tokens?,
    completion_tokens?}, or a conditional {if_contains, then, else} resolved
    against the request's prompt text (conditionals may nest). Token counts
    default to ceil(chars / 4).
    """

    def __init__(self, script: dict | str | Path, ledger: TokenLedger, source: str = ""):
        super().__init__(ledger)
        if isinstance(script, (str, Path)):
            source = source or str(script)
            script = json.loads(Path(script).read_text(encoding="utf-8"))
        if not isinstance(script, dict):
            raise ConfigError("script must be a JSON object keyed by tag")
        self.script = script
        self.source = source

    def describe(self) -> dict:
        return {"kind": "scripted", "script": self.source}

    def _complete(self, request: ChatRequest) -> ChatResponse:
        if request.tag not in self.script:
            raise ScriptKeyError(f"no scripted response for tag {request.tag!r}")
        entry = self._resolve(self.script[request.tag], request.prompt_text())
        if isinstance(entry, str):
            entry = {"content": entry}
        content = entry.get("content", "")
        return ChatResponse(
            content=content,
            prompt_tokens=int(entry.get("prompt_tokens", approx_tokens(request.prompt_text()))),
            completion_tokens=int(entry.get("completion_tokens", approx_tokens(content))),
        )

    def _resolve(self, entry, prompt_text: str):
        while isinstance(entry, dict) and "if_contains" in entry:
            branch = "then" if entry["if_contains"] in prompt_text else "else"
            if branch not in entry:
                raise ScriptKeyError(f"conditional entry missing {branch!r} branch")
            entry = entry[branch]
        return entry


class HeuristicBackend(ChatBackend):
    """Offline stand-in: synthesizes valid DSL proposals from the schema.

    Output is a pure function of (seed, tag, requested proposal count), so
    repeated calls with the same tag are identical and concurrent use is safe.
    Never touches the network. The schema passed in must already exclude the
    target column.
    """

    def __init__(self, schema, seed: int, ledger: TokenLedger):
        super().__init__(ledger)
        self.schema = tuple(schema)
        self.seed = int(seed)
        self._numeric = tuple(c.name for c in self.schema if c.kind == "numeric")
        self._categorical = tuple(c.name for c in self.schema if c.kind == "categorical")
        self._datetime = tuple(c.name for c in self.schema if c.kind == "datetime")

    def describe(self) -> dict:
        return {"kind": "heuristic", "seed": self.seed}

    def _complete(self, request: ChatRequest) -> ChatResponse:
        parts = request.tag.split(":")
        if len(parts) != 3:
            raise BackendError(f"malformed request tag {request.tag!r}")
        round_no, agent, seq = parts
        rng = np.random.default_rng(derive_seed(self.seed, "heuristic", request.tag))
        if agent == "router":
            content = self._router(rng)
        elif agent == "global-summary" or agent.endswith("-summary"):
            content = self._summary(agent, rng)
        else:
            content = self._proposals(agent, round_no, seq, rng, request)
        return ChatResponse(
            content=content,
            prompt_tokens=approx_tokens(request.prompt_text()),
            completion_tokens=approx_tokens(content),
        )

    def _router(self, rng: np.random.Generator) -> str:
        eligible = ["unary", "cross", "aggregation", "local_transform", "local_pattern"]
        if self._datetime:
            eligible.insert(2, "temporal")
        count = min(4, len(eligible))
        picks = sorted(rng.choice(len(eligible), size=count, replace=False).tolist())
        chosen = [eligible[i] for i in picks]
        return "Focusing on the most promising strategies.\n" + json.dumps(chosen)

    def _summary(self, agent: str, rng: np.random.Generator) -> str:
        topics = [
            "ratios between correlated numeric columns",
            "monotone rescaling of heavy-tailed columns",
            "group-level statistics over frequent categories",
            "threshold indicators near decision boundaries",
            "interactions between weakly correlated pairs",
            "coarse binning to reduce noise sensitivity",
        ]
        count = 4 if agent == "global-summary" else 3
        picks = rng.choice(len(topics), size=min(count, len(topics)), replace=False)
        return "\n".join(f"- {topics[i]}" for i in sorted(picks.tolist()))

    def _requested_count(self, request: ChatRequest) -> int:
        import re

        match = re.search(r"exactly (\d+)", request.messages[-1].content)
        return int(match.group(1)) if match else 3

    def _proposals(self, role: str, round_no: str, seq: str, rng, request: ChatRequest) -> str:
        count = self._requested_count(request)
        blocks = []
        for i in range(count):
            body = self._template(role, rng)
            if body is None:
                break
            name = f"gen_{role}_{round_no}_{seq}_{i}_{rng.integers(0, 16**4):04x}"
            comment, expr = body
            blocks.append(f"```dsl\n# {comment}\nFEATURE {name} = {expr}\n```")
        if not blocks:
            return "No applicable columns for this role on this dataset."
        return "\n".join(blocks)

    def _pick(self, rng, options):
        return options[int(rng.integers(len(options)))]

    def _template(self, role: str, rng) -> tuple[str, str] | None:
        num, cat, dt = self._numeric, self._categorical, self._datetime
        if role == "unary" and num:
            col = self._pick(rng, num)
            op = self._pick(rng, ["sq", "log_s", "sqrt_s", "abs", "recip_s", "zscore"])
            return f"{op} of {col}", f'{op}(col("{col}"))'
        if role == "cross" and len(num) >= 2:
            a, b = rng.choice(len(num), size=2, replace=False).tolist()
            sym = self._pick(rng, ["*", "+", "-", "/"])
            return f"{num[a]} {sym} {num[b]}", f'col("{num[a]}") {sym} col("{num[b]}")'
        if role == "temporal" and dt:
            if len(dt) >= 2 and rng.integers(2):
                a, b = rng.choice(len(dt), size=2, replace=False).tolist()
                return f"days between {dt[a]} and {dt[b]}", f'elapsed_days(col("{dt[a]}"), col("{dt[b]}"))'
            col = self._pick(rng, dt)
            part = self._pick(rng, ["year", "month", "day", "dow", "hour"])
            return f"{part} of {col}", f'date_part({part}, col("{col}"))'
        if role == "aggregation" and cat and num:
            key = self._pick(rng, cat)
            value = self._pick(rng, num)
            agg = self._pick(rng, ["mean", "std", "min", "max", "count"])
            return f"{agg} of {value} per {key}", f'group_agg({agg}, key=col("{key}"), value=col("{value}"))'
        if role == "local_transform" and num:
            col = self._pick(rng, num)
            if rng.integers(2):
                bins = self._pick(rng, [4, 8, 16])
                return f"{bins}-way binning of {col}", f'bin(col("{col}"), {bins})'
            return f"z-score of {col}", f'zscore(col("{col}"))'
        if role == "local_pattern" and num:
            if len(num) >= 2 and rng.integers(2):
                a, b = rng.choice(len(num), size=2, replace=False).tolist()
                k = self._pick(rng, [2, 3, 4])
                return (
                    f"{k}-means over {num[a]}, {num[b]}",
                    f'cluster({k}, col("{num[a]}"), col("{num[b]}"))',
                )
            col = self._pick(rng, num)
            return f"positive indicator of {col}", f'if col("{col}") > 0 then 1 else 0'
        return None


def make_backend(kind: str, ledger: TokenLedger, *, endpoint: str = "", model: str = "",
                 script: str = "", schema=None, seed: int = 0) -> ChatBackend:
    """Construct a backend from config values (backend.kind et al.)."""
    if kind == "openai":
        return OpenAIBackend(endpoint, model, ledger)
    if kind == "scripted":
        if not script:
            raise ConfigError("scripted backend needs a script path")
        return ScriptedBackend(script, ledger)
    if kind == "heuristic":
        if schema is None:
            raise ConfigError("heuristic backend needs a schema")
        return HeuristicBackend(schema, seed, ledger)
    raise ConfigError(f"unknown backend kind {kind!r}")
