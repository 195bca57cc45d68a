import pytest

from malmas.agents import (
    ATTEMPTED_BUDGET,
    EFFECTIVE_BUDGET,
    ROLE_ORDER,
    ROLES,
    PromptContext,
    build_prompt,
    eligible_roles,
    propose,
    route,
    summarize_agent,
    summarize_global,
)
from malmas.backends import HeuristicBackend, ScriptedBackend, TokenLedger
from malmas.data import ColumnSchema
from malmas.errors import ConfigError
from malmas.memory import ConceptNote, FeedRecord, ProcRecord

SCHEMA = (
    ColumnSchema("x1", "numeric", 50, 0),
    ColumnSchema("x2", "numeric", 50, 0),
    ColumnSchema("cat", "categorical", 3, 0),
)
SCHEMA_DT = SCHEMA + (ColumnSchema("when", "datetime", 50, 0),)


def scripted(script):
    return ScriptedBackend(script, TokenLedger())


def block(text):
    return f"```dsl\n{text}\n```"


class TestRoles:
    def test_role_order_matches_registry(self):
        assert tuple(ROLES) == ROLE_ORDER

    def test_each_role_has_prompt_and_ops(self):
        for role in ROLES.values():
            assert role.system_prompt.strip()
            assert role.allowed_ops

    def test_eligible_roles_gate_temporal(self):
        assert "temporal" not in eligible_roles(SCHEMA)
        assert "temporal" in eligible_roles(SCHEMA_DT)
        assert eligible_roles(SCHEMA_DT) == ROLE_ORDER


class TestBuildPrompt:
    def test_tag_and_instruction(self):
        request = build_prompt(ROLES["unary"], PromptContext("meta", round=3), 5)
        assert request.tag == "3:unary:0"
        assert "Propose exactly 5" in request.messages[-1].content

    def test_empty_sections_omitted(self):
        request = build_prompt(ROLES["unary"], PromptContext("meta"), 2)
        user = request.messages[-1].content
        assert "Effective features so far" not in user
        assert "Strategy notes" not in user
        assert "Team-wide guidance" not in user
        assert "Do not repeat" not in user

    def test_sections_appear_in_fixed_order(self):
        ctx = PromptContext(
            "meta",
            effective_features=(("f1", 0.75),),
            concept_notes=("use ratios",),
            global_concepts=("products help",),
            attempted_keys=("key1",),
        )
        user = build_prompt(ROLES["cross"], ctx, 2).messages[-1].content
        positions = [
            user.index("Dataset:"),
            user.index("Effective features so far"),
            user.index("Strategy notes from earlier rounds"),
            user.index("Team-wide guidance"),
            user.index("Do not repeat these transformations"),
            user.index("Propose exactly 2"),
        ]
        assert positions == sorted(positions)
        assert "- f1: 0.75" in user
        assert "- use ratios" in user

    def test_effective_budget_keeps_most_recent(self):
        feats = tuple((f"f{i}", 0.5) for i in range(EFFECTIVE_BUDGET + 10))
        ctx = PromptContext("meta", effective_features=feats)
        user = build_prompt(ROLES["unary"], ctx, 1).messages[-1].content
        assert "- f0:" not in user
        assert f"- f{EFFECTIVE_BUDGET + 9}:" in user
        shown = [l for l in user.splitlines() if l.startswith("- f")]
        assert len(shown) == EFFECTIVE_BUDGET

    def test_attempted_budget_keeps_most_recent(self):
        keys = tuple(f"key{i}" for i in range(ATTEMPTED_BUDGET + 5))
        ctx = PromptContext("meta", attempted_keys=keys)
        user = build_prompt(ROLES["unary"], ctx, 1).messages[-1].content
        assert "- key0\n" not in user
        assert f"- key{ATTEMPTED_BUDGET + 4}" in user

    def test_system_prompt_names_allowed_ops(self):
        request = build_prompt(ROLES["cross"], PromptContext("meta"), 1)
        system = request.messages[0].content
        assert "Allowed operators for this role" in system
        assert "mul" in system


class TestPropose:
    def run(self, script, role="unary", n=2, ctx=None):
        backend = scripted(script)
        ctx = ctx or PromptContext("meta")
        return propose(ROLES[role], ctx, backend, SCHEMA, n)

    def test_valid_proposals_accepted(self):
        content = "\n".join([
            block('# square\nFEATURE sq_x1 = sq(col("x1"))'),
            block('# log\nFEATURE log_x2 = log_s(col("x2"))'),
        ])
        result = self.run({"1:unary:0": content})
        assert [s.feature_name for s in result.specs] == ["sq_x1", "log_x2"]
        assert result.specs[0].description == "square"
        assert result.specs[0].base_columns == ("x1",)
        assert result.specs[0].transform_type == "unary"
        assert result.rejected == []

    def test_excess_blocks_ignored(self):
        content = "\n".join(
            block(f'FEATURE f{i} = sq(col("x1")) + {i}') for i in range(4)
        )
        result = self.run({"1:unary:0": content})
        assert len(result.specs) == 2

    def test_parse_error_repaired(self):
        script = {
            "1:unary:0": "\n".join([
                block('FEATURE good = sq(col("x1"))'),
                block("FEATURE bad = ???"),
            ]),
            "1:unary:1": block('FEATURE fixed = abs(col("x2"))'),
        }
        result = self.run(script)
        assert [s.feature_name for s in result.specs] == ["good", "fixed"]
        assert [r.outcome for r in result.rejected] == ["parse_error"]

    def test_repair_carries_block_and_error(self):
        captured = {}

        class Spy(ScriptedBackend):
            def _complete(self, request):
                if request.tag.endswith(":1"):
                    captured["text"] = request.messages[-1].content
                return super()._complete(request)

        script = {
            "1:unary:0": block("FEATURE bad = ???"),
            "1:unary:1": block('FEATURE fixed = sq(col("x1"))'),
        }
        backend = Spy(script, TokenLedger())
        result = propose(ROLES["unary"], PromptContext("meta"), backend, SCHEMA, 1)
        assert result.specs[0].feature_name == "fixed"
        assert "FEATURE bad = ???" in captured["text"]
        assert "Error:" in captured["text"]

    def test_at_most_two_repairs(self):
        script = {
            "1:unary:0": block("FEATURE a = ???"),
            "1:unary:1": block("FEATURE b = ???"),
            "1:unary:2": block("FEATURE c = ???"),
            # A fourth request would need tag 1:unary:3 and raise ScriptKeyError.
        }
        result = self.run(script, n=1)
        assert result.specs == []
        assert len(result.rejected) == 3

    def test_duplicates_recorded_but_not_repaired(self):
        from malmas.dsl import canonical_key, parse

        key = canonical_key(parse('FEATURE f = sq(col("x1"))'))
        ctx = PromptContext("meta", dedup_keys=frozenset({key}))
        script = {"1:unary:0": block('FEATURE again = sq(col("x1"))')}
        result = self.run(script, ctx=ctx, n=1)
        assert result.specs == []
        assert [r.outcome for r in result.rejected] == ["duplicate"]

    def test_within_batch_duplicate_key(self):
        content = "\n".join([
            block('FEATURE one = sq(col("x1"))'),
            block('FEATURE two = sq(col("x1"))'),
        ])
        result = self.run({"1:unary:0": content})
        assert [s.feature_name for s in result.specs] == ["one"]
        assert [r.outcome for r in result.rejected] == ["duplicate"]

    def test_within_batch_name_reuse(self):
        content = "\n".join([
            block('FEATURE same = sq(col("x1"))'),
            block('FEATURE same = abs(col("x2"))'),
        ])
        script = {
            "1:unary:0": content,
            "1:unary:1": block('FEATURE other = log_s(col("x1"))'),
        }
        result = self.run(script)
        assert [s.feature_name for s in result.specs] == ["same", "other"]
        assert [r.outcome for r in result.rejected] == ["type_error"]

    def test_role_violation(self):
        script = {
            "1:cross:0": block('FEATURE lonely = sq(col("x1"))'),
            "1:cross:1": block('FEATURE pair = mul(col("x1"), col("x2"))'),
        }
        result = self.run(script, role="cross", n=1)
        assert [s.feature_name for s in result.specs] == ["pair"]
        assert [r.outcome for r in result.rejected] == ["role_violation"]

    def test_constant_program_rejected(self):
        script = {
            "1:unary:0": block("FEATURE c = sq(2)"),
            "1:unary:1": block('FEATURE ok = sq(col("x1"))'),
        }
        result = self.run(script, n=1)
        assert [s.feature_name for s in result.specs] == ["ok"]
        assert result.rejected[0].outcome == "type_error"
        assert "at least one column" in result.rejected[0].description

    def test_unknown_column_is_type_error(self):
        script = {
            "1:unary:0": block('FEATURE f = sq(col("nope"))'),
            "1:unary:1": block('FEATURE g = sq(col("x1"))'),
        }
        result = self.run(script, n=1)
        assert result.rejected[0].outcome == "type_error"
        assert "unknown column" in result.rejected[0].description

    def test_no_blocks_is_empty_result(self):
        result = self.run({"1:unary:0": "I have no ideas today."})
        assert result.specs == [] and result.rejected == []


class TestRoute:
    def test_all_strategy(self):
        decision = route("meta", SCHEMA_DT, (), "all", 0, 0, None)
        assert decision.selected == ROLE_ORDER
        assert decision.strategy == "all"

    def test_all_respects_eligibility(self):
        decision = route("meta", SCHEMA, (), "all", 0, 0, None)
        assert "temporal" not in decision.selected
        assert len(decision.selected) == 5

    def test_fixed_k(self):
        decision = route("meta", SCHEMA_DT, (), "fixed_k", 2, 0, None)
        assert decision.selected == ("unary", "cross")

    def test_fixed_k_validates(self):
        with pytest.raises(ConfigError, match=">= 1"):
            route("meta", SCHEMA, (), "fixed_k", 0, 0, None)

    def test_random_k_seeded(self):
        a = route("meta", SCHEMA_DT, (), "random_k", 3, 42, None)
        b = route("meta", SCHEMA_DT, (), "random_k", 3, 42, None)
        assert a.selected == b.selected
        assert len(a.selected) == 3
        # Selections keep the canonical role order.
        order = {r: i for i, r in enumerate(ROLE_ORDER)}
        assert sorted(a.selected, key=order.get) == list(a.selected)

    def test_random_k_caps_at_eligible(self):
        decision = route("meta", SCHEMA, (), "random_k", 99, 1, None)
        assert len(decision.selected) == 5

    def test_unknown_strategy(self):
        with pytest.raises(ConfigError, match="unknown router strategy"):
            route("meta", SCHEMA, (), "psychic", 0, 0, None)

    def test_llm_parses_json_array(self):
        backend = scripted({"1:router:0": 'Focus narrow.\n["cross", "unary"]'})
        decision = route("meta", SCHEMA, (), "llm", 4, 0, backend)
        # Output order follows the canonical eligibility order.
        assert decision.selected == ("unary", "cross")
        assert decision.strategy == "llm"
        assert decision.rationale == "Focus narrow."

    def test_llm_filters_ineligible_and_unknown(self):
        backend = scripted({"1:router:0": '["temporal", "cross", "wizard"]'})
        decision = route("meta", SCHEMA, (), "llm", 4, 0, backend)
        assert decision.selected == ("cross",)

    def test_llm_retry_then_success(self):
        backend = scripted({
            "1:router:0": "no list here",
            "1:router:1": '["aggregation"]',
        })
        decision = route("meta", SCHEMA, (), "llm", 4, 0, backend)
        assert decision.selected == ("aggregation",)

    def test_llm_fallback_after_two_bad_replies(self):
        backend = scripted({"1:router:0": "nope", "1:router:1": "still nope"})
        decision = route("meta", SCHEMA, (), "llm", 4, 0, backend)
        assert decision.selected == ("unary", "cross", "aggregation", "local_transform")
        assert "fallback" in decision.rationale

    def test_llm_retry_prompt_mentions_failure(self):
        captured = []

        class Spy(ScriptedBackend):
            def _complete(self, request):
                captured.append(request.messages[-1].content)
                return super()._complete(request)

        backend = Spy({"1:router:0": "junk", "1:router:1": '["unary"]'}, TokenLedger())
        route("meta", SCHEMA, (), "llm", 4, 0, backend)
        assert "not parseable" in captured[1]

    def test_heuristic_backend_routes(self):
        backend = HeuristicBackend(SCHEMA_DT, 7, TokenLedger())
        decision = route("meta", SCHEMA_DT, (), "llm", 4, 7, backend)
        assert 1 <= len(decision.selected) <= 4


def feed(name, gain, round_no=1):
    return FeedRecord(name, "auc", 0.7 + gain, gain > 0, round_no, gain)


def proc(name, outcome="accepted", round_no=1):
    return ProcRecord(("x1",), "unary", name, f"desc {name}", round_no, f"key-{name}", outcome)


class TestSummarizeAgent:
    def test_skips_below_min_effective(self):
        prev = (ConceptNote("old note", 1),)
        notes = summarize_agent(
            ROLES["unary"], [proc("f")], [feed("f", 0.0)], prev,
            backend=None, min_effective=1, round_no=2,
        )
        assert notes == ["old note"]

    def test_skips_on_empty_round(self):
        notes = summarize_agent(
            ROLES["unary"], [], [], (), backend=None, min_effective=0, round_no=1
        )
        assert notes == []

    def test_generates_bullets(self):
        script = {"1:unary-summary:0": "- prefer squares\n- avoid recip\nignored prose"}
        notes = summarize_agent(
            ROLES["unary"], [proc("f")], [feed("f", 0.1), feed("g", 0.2)],
            (), scripted(script), min_effective=2, round_no=1,
        )
        assert notes == ["prefer squares", "avoid recip"]

    def test_caps_at_five_bullets(self):
        script = {"1:unary-summary:0": "\n".join(f"- n{i}" for i in range(9))}
        notes = summarize_agent(
            ROLES["unary"], [proc("f")], [feed("f", 0.1)],
            (), scripted(script), min_effective=1, round_no=1,
        )
        assert len(notes) == 5

    def test_keeps_previous_on_backend_failure(self):
        prev = (ConceptNote("keep me", 1),)
        notes = summarize_agent(
            ROLES["unary"], [proc("f")], [feed("f", 0.1)], prev,
            scripted({}), min_effective=1, round_no=1,
        )
        assert notes == ["keep me"]

    def test_keeps_previous_when_reply_has_no_bullets(self):
        prev = (ConceptNote("keep me", 1),)
        script = {"1:unary-summary:0": "I could not find any patterns."}
        notes = summarize_agent(
            ROLES["unary"], [proc("f")], [feed("f", 0.1)], prev,
            scripted(script), min_effective=1, round_no=1,
        )
        assert notes == ["keep me"]

    def test_prompt_includes_outcomes_and_gains(self):
        captured = []

        class Spy(ScriptedBackend):
            def _complete(self, request):
                captured.append(request.messages[-1].content)
                return super()._complete(request)

        backend = Spy({"1:unary-summary:0": "- ok"}, TokenLedger())
        summarize_agent(
            ROLES["unary"],
            [proc("f"), proc("bad", outcome="parse_error")],
            [feed("f", 0.25)],
            (), backend, min_effective=1, round_no=1,
        )
        text = captured[0]
        assert "[accepted] f" in text
        assert "[parse_error] bad" in text
        assert "gain=+0.25" in text


class TestSummarizeGlobal:
    def test_skips_without_signal(self):
        prev = (ConceptNote("old", 1),)
        per_agent = {"unary": ((), [feed("f", 0.0)])}
        assert summarize_global(per_agent, prev, None, 1) == ["old"]

    def test_generates_bullets(self):
        script = {"1:global-summary:0": "- products dominate\n- skip raw columns"}
        per_agent = {
            "unary": ((ConceptNote("squares work", 1),), []),
            "cross": ((), [feed("p", 0.3)]),
        }
        notes = summarize_global(per_agent, (), scripted(script), 1)
        assert notes == ["products dominate", "skip raw columns"]

    def test_caps_at_eight(self):
        script = {"1:global-summary:0": "\n".join(f"- n{i}" for i in range(12))}
        per_agent = {"unary": ((ConceptNote("x", 1),), [])}
        assert len(summarize_global(per_agent, (), scripted(script), 1)) == 8

    def test_keeps_previous_on_backend_failure(self):
        prev = (ConceptNote("stay", 1),)
        per_agent = {"unary": ((ConceptNote("x", 1),), [])}
        assert summarize_global(per_agent, prev, scripted({}), 1) == ["stay"]

    def test_prompt_groups_by_role(self):
        captured = []

        class Spy(ScriptedBackend):
            def _complete(self, request):
                captured.append(request.messages[-1].content)
                return super()._complete(request)

        backend = Spy({"1:global-summary:0": "- ok"}, TokenLedger())
        per_agent = {
            "cross": ((ConceptNote("pair note", 1),), [feed("p", 0.3)]),
            "unary": ((ConceptNote("solo note", 1),), []),
        }
        summarize_global(per_agent, (), backend, 1)
        text = captured[0]
        assert text.index("unary:") < text.index("cross:")
        assert "effective feature p" in text
