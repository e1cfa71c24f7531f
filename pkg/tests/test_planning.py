import asyncio
import json
from pathlib import Path

import pytest

from beaconmesh.bench import LocalAgent, LocalFabric
from beaconmesh.engine import ScriptedBehavior, ScriptedEngine
from beaconmesh.events import EventLog
from beaconmesh.fabric import CoordinatorSettings
from beaconmesh.matching import one_hot
from beaconmesh.planning import (
    ChainOfThought,
    DecompositionError,
    NoPlanners,
    PlanningFailed,
    PromptTemplates,
    TaskDescription,
    decode_plan,
    decompose,
    default_templates,
    encode_plan,
    extract_background,
    parse_decomposition,
    plan_fanout,
)

FIXTURES = Path(__file__).parent / "fixtures"
EXAMPLE1_INPUT = "One root of the equation $5x^2+kx=4$ is 2. What is the other?"
EXAMPLE1_JSON = json.dumps({
    "original_question": EXAMPLE1_INPUT,
    "subtasks": [
        "Q1: What is the equation rewritten in standard quadratic form?",
        "Q2: What is the product of the roots of this quadratic equation?",
        "Q3: Given one root is 2, what is the other root?",
    ],
}, indent=2)
FAST = CoordinatorSettings(beacon_timeout_s=0.05, step_timeout_s=0.2)


def scripted(*rules, default="", latency_ms=0.0):
    return ScriptedEngine(ScriptedBehavior(rules=tuple(rules), default=default, latency_ms=latency_ms))


def test_decomposition_template_renders_example():
    expected = (FIXTURES / "decomposition_example1.txt").read_text("utf-8")
    assert default_templates().render_decomposition(EXAMPLE1_INPUT) == expected


def test_templates_keep_unrelated_braces():
    t = default_templates()
    assert "$\\boxed{{<Answer>}}$" in t.render_execution("ctx", "Q1: x?")
    assert "{user_input}" in t.decomposition and "{context}" in t.execution


def test_custom_template_paths(tmp_path):
    d = tmp_path / "d.txt"
    d.write_text("Split: {user_input}")
    t = PromptTemplates.load(decomposition=d)
    assert t.render_decomposition("abc") == "Split: abc"
    assert t.execution == default_templates().execution


def test_task_description_options():
    t = TaskDescription("t", "Pick one?", ("Yes", "No"))
    assert t.user_input == "Pick one?\nOptions:\n- Yes\n- No"
    with pytest.raises(ValueError):
        TaskDescription("t", "  ")


def test_background_passthrough():
    engine = scripted(("Restate only", "Fixed background."))
    assert asyncio.run(extract_background(TaskDescription("t", "q?"), engine)) == "Fixed background."


def test_background_keeps_given_equation():
    engine = scripted(("Restate only", "If $23=x^4+\\frac{1}{x^4}$."))
    task = TaskDescription("t", "If $23=x^4+\\frac{1}{x^4}$, then what is the value of $x^2+\\frac{1}{x^2}$?")
    assert "23=x^4+\\frac{1}{x^4}" in asyncio.run(extract_background(task, engine))


def test_empty_background_retries_once_then_fails():
    engine = scripted(default="   ")
    with pytest.raises(PlanningFailed):
        asyncio.run(extract_background(TaskDescription("t", "q?"), engine, chain_id=2))
    assert engine.calls == 2


def test_decompose_example1():
    engine = scripted(("problem decomposer", EXAMPLE1_JSON))
    chain = asyncio.run(decompose(TaskDescription("t", EXAMPLE1_INPUT), "bg", engine, chain_id=1))
    assert len(chain.subtasks) == 3
    assert chain.subtasks[0] == "What is the equation rewritten in standard quadratic form?"
    assert chain.numbered()[2] == "Q3: Given one root is 2, what is the other root?"


def test_decompose_strips_prose():
    engine = scripted(("problem decomposer", "Sure, here it is:\n" + EXAMPLE1_JSON + "\nDone."))
    chain = asyncio.run(decompose(TaskDescription("t", EXAMPLE1_INPUT), "bg", engine))
    assert len(chain.subtasks) == 3
    assert parse_decomposition("noise " + EXAMPLE1_JSON + " noise")[1].startswith("What is the product")


def test_braces_in_trailing_prose_defeat_recovery():
    with pytest.raises(DecompositionError):
        parse_decomposition(EXAMPLE1_JSON + "\nHope this helps {really}.")


def test_empty_decomposition_fails_after_reprompt():
    engine = scripted(("problem decomposer", '{"subtasks": []}'))
    with pytest.raises(PlanningFailed):
        asyncio.run(decompose(TaskDescription("t", "q?"), "bg", engine))
    assert engine.calls == 2


@pytest.mark.parametrize("raw", [
    "no json here",
    '{"original_question": "q", "subtasks": ["What?"]}',
    '{"original_question": "q", "subtasks": ["Q2: What?"]}',
    '{"original_question": "q", "subtasks": ["Q1: Compute it."]}',
    '{"original_question": "q", "subtasks": [3]}',
    '{"subtasks": ["Q1: What?"]}',
])
def test_parse_rejects(raw):
    with pytest.raises(DecompositionError):
        parse_decomposition(raw)


def test_parse_limit():
    doc = {"original_question": "q", "subtasks": [f"Q{i}: Step {i}?" for i in range(1, 10)]}
    with pytest.raises(DecompositionError):
        parse_decomposition(json.dumps(doc), max_subtasks=8)


def test_chain_invariants():
    with pytest.raises(ValueError):
        ChainOfThought(1, "bg", (), "p")
    with pytest.raises(ValueError):
        ChainOfThought(1, "bg", ("Not a question.",), "p")


def test_plan_encoding_roundtrip():
    chain = ChainOfThought(2, "bg", ("A?", "B?"), "p")
    assert decode_plan(encode_plan(chain), 2, "p") == chain


def planner(name, planning_weight, latency_ms=0.0, reply=None):
    cap = tuple(planning_weight if s == 1.0 else 0.1 for s in one_hot("planning"))
    reply = reply or json.dumps({"original_question": "q", "subtasks": [f"Q1: Which plan does {name} pick?"]})
    engine = scripted(("Restate only", f"bg-{name}"), ("problem decomposer", reply), latency_ms=latency_ms)
    return LocalAgent(name * 64, cap, frozenset({"planner"}), engine)


def test_fanout_picks_top_planners():
    agents = [planner(c, w) for c, w in zip("abcdefgh", (0.2, 0.9, 0.3, 0.8, 0.5, 0.95, 0.1, 0.4))]
    fabric = LocalFabric(agents, settings=FAST)
    chains = asyncio.run(plan_fanout(TaskDescription("t", "q?"), fabric, 3, EventLog(), FAST))
    assert [c.planner[0] for c in chains] == ["f", "b", "d"]
    assert [c.chain_id for c in chains] == [0, 1, 2]


def test_fanout_degrades_to_available_planners():
    fabric = LocalFabric([planner("a", 0.9)], settings=FAST)
    chains = asyncio.run(plan_fanout(TaskDescription("t", "q?"), fabric, 3, EventLog(), FAST))
    assert len(chains) == 1


def test_fanout_drops_slow_planner():
    agents = [planner("a", 0.9), planner("b", 0.8, latency_ms=1000), planner("c", 0.7)]
    fabric = LocalFabric(agents, settings=FAST)
    chains = asyncio.run(plan_fanout(TaskDescription("t", "q?"), fabric, 3, EventLog(), FAST))
    assert sorted(c.planner[0] for c in chains) == ["a", "c"]


def test_fanout_without_planners():
    with pytest.raises(NoPlanners):
        asyncio.run(plan_fanout(TaskDescription("t", "q?"), LocalFabric([]), 3, EventLog(), FAST))


def test_fanout_all_fail():
    agents = [planner("a", 0.9, reply="garbage"), planner("b", 0.8, reply="garbage")]
    with pytest.raises(PlanningFailed):
        asyncio.run(plan_fanout(TaskDescription("t", "q?"), LocalFabric(agents, settings=FAST), 2, EventLog(), FAST))
