import json

import pytest

from malmas.backends import (
    ChatMessage,
    ChatRequest,
    ChatResponse,
    HeuristicBackend,
    OpenAIBackend,
    ScriptedBackend,
    TokenLedger,
    approx_tokens,
    make_backend,
)
from malmas.data import ColumnSchema
from malmas.errors import (
    BackendError,
    ConfigError,
    MalformedReplyError,
    RetryExhaustedError,
    ScriptKeyError,
)


def request(tag, text="hello", system=""):
    messages = []
    if system:
        messages.append(ChatMessage("system", system))
    messages.append(ChatMessage("user", text))
    return ChatRequest(messages=messages, tag=tag)


SCHEMA = (
    ColumnSchema("x1", "numeric", 50, 0),
    ColumnSchema("x2", "numeric", 50, 0),
    ColumnSchema("cat", "categorical", 3, 0),
    ColumnSchema("when", "datetime", 50, 0),
)


class TestChatTypes:
    def test_request_needs_messages(self):
        with pytest.raises(ConfigError, match="at least one message"):
            ChatRequest(messages=[])

    def test_unknown_role(self):
        with pytest.raises(ConfigError, match="unknown chat role"):
            ChatMessage("tool", "x")

    def test_negative_tokens_rejected(self):
        with pytest.raises(BackendError):
            ChatResponse("x", -1, 0)

    def test_approx_tokens(self):
        assert approx_tokens("") == 0
        assert approx_tokens("abcd") == 1
        assert approx_tokens("abcde") == 2


class TestTokenLedger:
    def test_totals_accumulate(self):
        ledger = TokenLedger()
        ledger.record("1:unary:0", 10, 5)
        ledger.record("1:unary:0", 3, 2)
        ledger.record("2:cross:0", 7, 1)
        assert ledger.totals() == (20, 8)

    def test_rows_sorted_by_tag(self):
        ledger = TokenLedger()
        ledger.record("2:b:0", 1, 1)
        ledger.record("1:a:0", 2, 2)
        assert [r[0] for r in ledger.rows()] == ["1:a:0", "2:b:0"]

    def test_by_round_groups_on_tag_prefix(self):
        ledger = TokenLedger()
        ledger.record("1:unary:0", 10, 5)
        ledger.record("1:router:0", 4, 1)
        ledger.record("2:cross:0", 6, 3)
        assert ledger.by_round() == {1: (14, 6), 2: (6, 3)}

    def test_to_dict_shape(self):
        ledger = TokenLedger()
        ledger.record("1:unary:0", 10, 5)
        data = ledger.to_dict()
        assert data["per_tag"]["1:unary:0"] == {"prompt_tokens": 10, "completion_tokens": 5}
        assert data["total"] == {"prompt_tokens": 10, "completion_tokens": 5}


class TestScriptedBackend:
    def test_plain_string_entry(self):
        backend = ScriptedBackend({"1:unary:0": "reply"}, TokenLedger())
        response = backend.complete(request("1:unary:0"))
        assert response.content == "reply"
        assert response.completion_tokens == approx_tokens("reply")

    def test_object_entry_with_tokens(self):
        script = {"1:unary:0": {"content": "hi", "prompt_tokens": 99, "completion_tokens": 7}}
        backend = ScriptedBackend(script, TokenLedger())
        response = backend.complete(request("1:unary:0"))
        assert (response.prompt_tokens, response.completion_tokens) == (99, 7)

    def test_tokens_recorded_in_ledger(self):
        ledger = TokenLedger()
        ScriptedBackend({"t:unary:0": "abcd"}, ledger).complete(request("t:unary:0"))
        prompt, completion = ledger.totals()
        assert completion == 1

    def test_missing_tag_raises(self):
        backend = ScriptedBackend({}, TokenLedger())
        with pytest.raises(ScriptKeyError, match="no scripted response"):
            backend.complete(request("1:unary:0"))

    def test_conditional_entry(self):
        script = {"1:unary:0": {"if_contains": "MAGIC", "then": "yes", "else": "no"}}
        backend = ScriptedBackend(script, TokenLedger())
        assert backend.complete(request("1:unary:0", "has MAGIC inside")).content == "yes"
        assert backend.complete(request("1:unary:0", "plain")).content == "no"

    def test_nested_conditionals(self):
        script = {
            "t:unary:0": {
                "if_contains": "A",
                "then": {"if_contains": "B", "then": "both", "else": "just A"},
                "else": "neither",
            }
        }
        backend = ScriptedBackend(script, TokenLedger())
        assert backend.complete(request("t:unary:0", "A and B")).content == "both"
        assert backend.complete(request("t:unary:0", "A only")).content == "just A"
        assert backend.complete(request("t:unary:0", "nope")).content == "neither"

    def test_conditional_missing_branch(self):
        script = {"t:unary:0": {"if_contains": "A", "then": "x"}}
        backend = ScriptedBackend(script, TokenLedger())
        with pytest.raises(ScriptKeyError, match="missing 'else'"):
            backend.complete(request("t:unary:0", "nope"))

    def test_loads_script_from_file(self, tmp_path):
        path = tmp_path / "script.json"
        path.write_text(json.dumps({"t:unary:0": "from file"}))
        backend = ScriptedBackend(path, TokenLedger())
        assert backend.complete(request("t:unary:0")).content == "from file"
        assert backend.describe()["script"] == str(path)


class TestHeuristicBackend:
    def make(self, seed=0, ledger=None):
        return HeuristicBackend(SCHEMA, seed, ledger or TokenLedger())

    def test_deterministic_per_tag(self):
        a = self.make().complete(request("1:unary:0", "Propose exactly 3 features."))
        b = self.make().complete(request("1:unary:0", "Propose exactly 3 features."))
        assert a.content == b.content

    def test_different_tags_differ(self):
        backend = self.make()
        a = backend.complete(request("1:unary:0", "Propose exactly 3 features."))
        b = backend.complete(request("2:unary:0", "Propose exactly 3 features."))
        assert a.content != b.content

    def test_respects_requested_count(self):
        response = self.make().complete(request("1:cross:0", "Propose exactly 5 features."))
        assert response.content.count("```dsl") == 5

    def test_proposals_parse_and_name_uniquely(self):
        from malmas.dsl import parse

        response = self.make().complete(request("1:unary:0", "Propose exactly 4 features."))
        blocks = [
            part.split("```")[0].strip()
            for part in response.content.split("```dsl")[1:]
        ]
        names = set()
        for block in blocks:
            program = parse(block)
            names.add(program.feature_name)
        assert len(names) == 4

    def test_router_reply_ends_with_json_list(self):
        response = self.make().complete(request("1:router:0", "pick roles"))
        chosen = json.loads(response.content.strip().splitlines()[-1])
        assert isinstance(chosen, list)
        assert 1 <= len(chosen) <= 4

    def test_router_without_datetime_never_picks_temporal(self):
        schema = tuple(c for c in SCHEMA if c.kind != "datetime")
        for seed in range(10):
            backend = HeuristicBackend(schema, seed, TokenLedger())
            response = backend.complete(request("1:router:0", "pick roles"))
            chosen = json.loads(response.content.strip().splitlines()[-1])
            assert "temporal" not in chosen

    def test_summary_is_bulleted(self):
        response = self.make().complete(request("1:unary-summary:0", "summarize"))
        lines = response.content.splitlines()
        assert lines and all(line.startswith("- ") for line in lines)

    def test_malformed_tag_rejected(self):
        with pytest.raises(BackendError, match="malformed request tag"):
            self.make().complete(request("no-colons"))


class _FakeReply:
    def __init__(self, status_code, payload=None, text=""):
        self.status_code = status_code
        self._payload = payload
        self.text = text

    def json(self):
        if self._payload is None:
            raise ValueError("not json")
        return self._payload


class _FakeSession:
    def __init__(self, replies):
        self.replies = list(replies)
        self.calls = []

    def post(self, url, json=None, headers=None, timeout=None):
        self.calls.append({"url": url, "json": json, "headers": headers})
        reply = self.replies.pop(0)
        if isinstance(reply, Exception):
            raise reply
        return reply


def _ok_payload(content="fine", prompt=12, completion=3):
    return {
        "choices": [{"message": {"content": content}}],
        "usage": {"prompt_tokens": prompt, "completion_tokens": completion},
    }


class TestOpenAIBackend:
    def make(self, replies, **kwargs):
        session = _FakeSession(replies)
        backend = OpenAIBackend(
            "http://example.invalid/v1/chat", "test-model", TokenLedger(),
            api_key="sk-test", session=session, **kwargs,
        )
        return backend, session

    def test_success_parses_usage(self, monkeypatch):
        monkeypatch.setattr("time.sleep", lambda s: None)
        backend, session = self.make([_FakeReply(200, _ok_payload())])
        response = backend.complete(request("1:unary:0"))
        assert response.content == "fine"
        assert (response.prompt_tokens, response.completion_tokens) == (12, 3)
        assert session.calls[0]["headers"]["Authorization"] == "Bearer sk-test"
        assert session.calls[0]["json"]["model"] == "test-model"

    def test_retries_on_5xx_then_succeeds(self, monkeypatch):
        sleeps = []
        monkeypatch.setattr("time.sleep", sleeps.append)
        backend, session = self.make([
            _FakeReply(500, text="boom"),
            _FakeReply(429, text="slow down"),
            _FakeReply(200, _ok_payload()),
        ])
        assert backend.complete(request("1:unary:0")).content == "fine"
        assert len(session.calls) == 3
        assert sleeps == [1, 2]

    def test_gives_up_after_retries(self, monkeypatch):
        monkeypatch.setattr("time.sleep", lambda s: None)
        backend, _ = self.make([_FakeReply(503)] * 3)
        with pytest.raises(RetryExhaustedError, match="3 attempts"):
            backend.complete(request("1:unary:0"))

    def test_client_error_fails_fast(self):
        backend, session = self.make([_FakeReply(401, text="bad key")])
        with pytest.raises(BackendError, match="HTTP 401"):
            backend.complete(request("1:unary:0"))
        assert len(session.calls) == 1

    def test_transport_error_retried(self, monkeypatch):
        import requests

        monkeypatch.setattr("time.sleep", lambda s: None)
        backend, _ = self.make([
            requests.ConnectionError("refused"),
            _FakeReply(200, _ok_payload()),
        ])
        assert backend.complete(request("1:unary:0")).content == "fine"

    def test_malformed_json_reply(self):
        backend, _ = self.make([_FakeReply(200, payload=None)])
        with pytest.raises(MalformedReplyError, match="non-JSON"):
            backend.complete(request("1:unary:0"))

    def test_missing_choices(self):
        backend, _ = self.make([_FakeReply(200, payload={"choices": []})])
        with pytest.raises(MalformedReplyError, match="choices"):
            backend.complete(request("1:unary:0"))

    def test_usage_fallback_estimates(self):
        payload = {"choices": [{"message": {"content": "abcdefgh"}}]}
        backend, _ = self.make([_FakeReply(200, payload)])
        response = backend.complete(request("1:unary:0", "hi"))
        assert response.completion_tokens == approx_tokens("abcdefgh")

    def test_requires_endpoint(self):
        with pytest.raises(ConfigError, match="endpoint"):
            OpenAIBackend("", "m", TokenLedger())


class TestMakeBackend:
    def test_heuristic(self):
        backend = make_backend("heuristic", TokenLedger(), schema=SCHEMA, seed=3)
        assert backend.describe() == {"kind": "heuristic", "seed": 3}

    def test_scripted_needs_script(self):
        with pytest.raises(ConfigError, match="script path"):
            make_backend("scripted", TokenLedger())

    def test_heuristic_needs_schema(self):
        with pytest.raises(ConfigError, match="schema"):
            make_backend("heuristic", TokenLedger())

    def test_unknown_kind(self):
        with pytest.raises(ConfigError, match="unknown backend kind"):
            make_backend("psychic", TokenLedger())
