"""Eight-agent coffee-shop fixture: three planners, five executors, scripted replies.

Capability vectors are chosen so the keyword tagger routes every sub-task
to a known executor with a known match score:

    R  reading specialist      score 1.0 on reading sub-tasks
    L  logic specialist        score 1.0 on logic sub-tasks
    W  world 0.8, reading 0.6  score 0.8 on world-knowledge sub-tasks
    A  arithmetic 0.96, code 0.28  score 0.96 on arithmetic sub-tasks
    U  uniform generalist (also the coordinator)
"""

from __future__ import annotations

import json
import math

from beaconmesh.engine import ScriptedBehavior, ScriptedEngine
from beaconmesh.planning import TaskDescription
from beaconmesh.runtime.config import NodeConfig

SKILLS = ("arithmetic", "algebra", "logic", "reading-comprehension", "planning",
          "world-knowledge", "formatting", "code")

QUESTION = (
    "How would a typical person answer each of the following questions about causation?\n"
    "Drew, Kylie, Oliver, and Jen are regular customers at a small, local coffee shop. Given the selling "
    "price of the coffee and the cost of daily operation, the coffee shop will turn a profit if anyone "
    "orders coffee on a given day. Only one person ordering coffee is needed for the coffee shop to turn "
    "a profit that day. Kylie and Oliver usually order coffee on Tuesdays. However, Drew doesn't usually "
    "order coffee on Tuesdays. This Tuesday, unexpectedly, Drew ordered coffee. The same day, Kylie "
    "ordered coffee, and Oliver also ordered coffee. Since at least one person ordered coffee on Tuesday, "
    "the coffee shop made a profit that day. Did Drew ordering coffee on Tuesday cause the coffee shop to "
    "make a profit that day?"
)
OPTIONS = ("Yes", "No")
BACKGROUND = (
    "Only one customer ordering coffee is enough for the shop to profit. Drew does not usually order on "
    "Tuesdays; Kylie and Oliver do. This Tuesday Drew, Kylie and Oliver all ordered coffee."
)

# (sub-task, boxed answer) per chain
COT_A = [
    ("Who ordered coffee on this Tuesday?", "Drew, Kylie and Oliver"),
    ("Did at least one person order coffee on this Tuesday?", "Yes"),
    ("Was Drew's action necessary for the coffee shop to make a profit on this Tuesday "
     "(since Kylie and Oliver also ordered)?", "No"),
]
COT_B = [
    ("Would the shop have made a profit on Tuesday without Drew, since only one order is necessary?", "Yes"),
    ("Would a typical person say Drew's order was the reason for the profit?", "No"),
]
COT_C = [
    ("Who is described as ordering coffee on Tuesday?", "Drew, Kylie and Oliver"),
    ("How many people ordered coffee on Tuesday?", "3"),
    ("Would a typical person say Drew's unusual order brought about the profit?", "Yes"),
]
EXPECTED = {"A": (1.0, "no"), "B": (0.9, "no"), "C": (0.92, "yes")}


def _vec(**parts: float) -> list[float]:
    return [parts.get(s.replace("-", "_"), 0.0) for s in SKILLS]


def _plan_reply(steps) -> str:
    subtasks = [f"Q{i}: {q}" for i, (q, _) in enumerate(steps, 1)]
    return "Here is the plan:\n" + json.dumps({"original_question": QUESTION, "subtasks": subtasks}, indent=1)


def planner_behavior(steps, latency_ms: float = 0.0) -> ScriptedBehavior:
    return ScriptedBehavior(
        rules=(("Restate only the given facts", BACKGROUND), ("You are a problem decomposer", _plan_reply(steps))),
        latency_ms=latency_ms,
    )


def executor_behavior(latency_ms: float = 0.0) -> ScriptedBehavior:
    rules = []
    for steps in (COT_A, COT_B, COT_C):
        for k, (q, a) in enumerate(steps, 1):
            rules.append((f'solve the sub-task: "Q{k}: {q}"', f"$\\boxed{{{a}}}$"))
    return ScriptedBehavior(rules=tuple(rules), latency_ms=latency_ms)


AGENTS = {
    # name: (roles, capability)
    "P1": (["planner"], _vec(planning=1.0)),
    "P2": (["planner"], _vec(planning=0.95, reading_comprehension=math.sqrt(1 - 0.95 ** 2))),
    "P3": (["planner"], _vec(planning=0.9, logic=math.sqrt(1 - 0.9 ** 2))),
    "R": (["executor"], _vec(reading_comprehension=1.0)),
    "L": (["executor"], _vec(logic=1.0)),
    "W": (["executor"], _vec(world_knowledge=0.8, reading_comprehension=0.6)),
    "A": (["executor"], _vec(arithmetic=0.96, code=0.28)),
    "U": (["executor"], [1.0] * 8),
}
PLANS = {"P1": COT_A, "P2": COT_B, "P3": COT_C}


def configs(base_port: int = 9100, **overrides) -> list[NodeConfig]:
    out = []
    for i, (name, (roles, cap)) in enumerate(AGENTS.items()):
        out.append(NodeConfig(name=name, host="mem", port=base_port + i, roles=roles,
                              capability_vector=cap, **overrides))
    return out


def engines(latency_ms: float = 0.0) -> dict[str, ScriptedEngine]:
    out = {}
    for name in AGENTS:
        behavior = planner_behavior(PLANS[name], latency_ms) if name in PLANS else executor_behavior(latency_ms)
        out[name] = ScriptedEngine(behavior, engine_id=name)
    return out


def task(task_id: str = "coffee") -> TaskDescription:
    return TaskDescription(task_id, QUESTION, OPTIONS)
