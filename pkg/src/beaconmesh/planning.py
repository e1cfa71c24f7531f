"""Background extraction, task decomposition and planner fan-out."""

from __future__ import annotations

import asyncio
import json
import logging
import math
import re
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Sequence

from .engine import EngineError, EngineRequest
from .events import EventLog
from .fabric import CoordinatorSettings, DispatchTimeout, Fabric, collect_bids
from .matching import DEFAULT_TAXONOMY, NoResponders, rank_responses, uniform_vector
from .protocol import TaskBody, TaskResultBody, canonical_json

log = logging.getLogger(__name__)

PLANNING_SLOT = 0  # subtask_index reserved for planning; sub-tasks count from 1
_QPREFIX = re.compile(r"^Q(\d+):\s*(.*)$", re.S)


class PlanningError(Exception):
    pass


class PlanningFailed(PlanningError):
    def __init__(self, where, reason: str = ""):
        super().__init__(f"planning failed for {where}: {reason}" if reason else f"planning failed for {where}")
        self.where = where
        self.reason = reason


class NoPlanners(PlanningError):
    pass


class DecompositionError(PlanningError, ValueError):
    pass


@dataclass(frozen=True)
class TaskDescription:
    task_id: str
    text: str
    options: tuple[str, ...] | None = None

    def __post_init__(self):
        if not self.text.strip():
            raise ValueError("task text is empty")
        if self.options is not None:
            object.__setattr__(self, "options", tuple(self.options))

    @property
    def user_input(self) -> str:
        """The text handed to planners: the description plus any answer options."""
        if not self.options:
            return self.text
        return self.text + "\nOptions:\n" + "\n".join(f"- {o}" for o in self.options)


@dataclass(frozen=True)
class ChainOfThought:
    chain_id: int
    background: str
    subtasks: tuple[str, ...]
    planner: str
    max_subtasks: int = 8

    def __post_init__(self):
        object.__setattr__(self, "subtasks", tuple(self.subtasks))
        if not 1 <= len(self.subtasks) <= self.max_subtasks:
            raise ValueError(f"chain needs 1..{self.max_subtasks} sub-tasks, got {len(self.subtasks)}")
        for s in self.subtasks:
            if not s.strip():
                raise ValueError("empty sub-task")
            if not s.rstrip().endswith("?"):
                raise ValueError(f"sub-task is not phrased as a question: {s!r}")

    def numbered(self) -> list[str]:
        return [f"Q{i}: {s}" for i, s in enumerate(self.subtasks, 1)]


# ---------------------------------------------------------------- templates


def _builtin(name: str) -> str:
    return resources.files("beaconmesh.data").joinpath("prompts", name).read_text("utf-8")


@dataclass(frozen=True)
class PromptTemplates:
    decomposition: str
    execution: str
    background: str

    @classmethod
    def load(cls, decomposition: str | Path | None = None, execution: str | Path | None = None,
             background: str | Path | None = None) -> "PromptTemplates":
        def read(path, name):
            return Path(path).read_text("utf-8") if path else _builtin(name)

        return cls(
            decomposition=read(decomposition, "decomposition.txt"),
            execution=read(execution, "execution.txt"),
            background=read(background, "background.txt"),
        )

    def render_decomposition(self, user_input: str) -> str:
        return self.decomposition.replace("{user_input}", user_input)

    def render_background(self, user_input: str) -> str:
        return self.background.replace("{user_input}", user_input)

    def render_execution(self, context: str, instruction: str) -> str:
        # only the named placeholders are substituted; other braces are literal
        return self.execution.replace("{context}", context).replace("{instruction}", instruction)


_TEMPLATES: PromptTemplates | None = None


def default_templates() -> PromptTemplates:
    global _TEMPLATES
    if _TEMPLATES is None:
        _TEMPLATES = PromptTemplates.load()
    return _TEMPLATES


# ---------------------------------------------------------- decomposition


def parse_decomposition(raw: str, max_subtasks: int = 8) -> list[str]:
    """Parse a planner reply into sub-task texts with their ``Q<n>:`` prefix removed."""
    start, end = raw.find("{"), raw.rfind("}")
    if start < 0 or end <= start:
        raise DecompositionError("no JSON object in planner output")
    try:
        doc = json.loads(raw[start : end + 1])
    except json.JSONDecodeError as exc:
        raise DecompositionError(f"invalid JSON: {exc.msg}") from None
    if not isinstance(doc, dict):
        raise DecompositionError("decomposition is not a JSON object")
    if not isinstance(doc.get("original_question"), str):
        raise DecompositionError("missing original_question")
    subtasks = doc.get("subtasks")
    if not isinstance(subtasks, list) or not subtasks:
        raise DecompositionError("subtasks must be a nonempty array")
    if len(subtasks) > max_subtasks:
        raise DecompositionError(f"{len(subtasks)} sub-tasks exceeds the limit of {max_subtasks}")
    out = []
    for n, item in enumerate(subtasks, 1):
        if not isinstance(item, str):
            raise DecompositionError(f"sub-task {n} is not a string")
        m = _QPREFIX.match(item.strip())
        if not m or int(m.group(1)) != n:
            raise DecompositionError(f"sub-task {n} is not numbered Q{n}: {item!r}")
        text = m.group(2).strip()
        if not text or not text.endswith("?"):
            raise DecompositionError(f"sub-task {n} is not a question: {item!r}")
        out.append(text)
    return out


async def _timed_ask(engine, prompt: str, sampling: dict, spent: list[float]) -> str:
    reply = await engine.generate(EngineRequest(prompt=prompt, **sampling))
    spent.append(reply.latency_ms)
    return reply.text


async def extract_background(
    task: TaskDescription,
    engine,
    chain_id: int = 0,
    templates: PromptTemplates | None = None,
    settings: CoordinatorSettings = CoordinatorSettings(),
    spent: list[float] | None = None,
) -> str:
    templates = templates or default_templates()
    prompt = templates.render_background(task.user_input)
    spent = spent if spent is not None else []
    reason = ""
    for _ in range(settings.retries + 1):
        try:
            text = (await _timed_ask(engine, prompt, settings.sampling("planning"), spent)).strip()
        except EngineError as exc:
            reason = str(exc)
            continue
        if text:
            return text
        reason = "empty background"
    raise PlanningFailed(chain_id, reason)


async def decompose(
    task: TaskDescription,
    background: str,
    engine,
    chain_id: int = 0,
    planner: str = "0" * 64,
    templates: PromptTemplates | None = None,
    settings: CoordinatorSettings = CoordinatorSettings(),
    spent: list[float] | None = None,
) -> ChainOfThought:
    templates = templates or default_templates()
    prompt = templates.render_decomposition(task.user_input)
    spent = spent if spent is not None else []
    reason = ""
    for _ in range(settings.retries + 1):
        try:
            raw = await _timed_ask(engine, prompt, settings.sampling("planning"), spent)
            subtasks = parse_decomposition(raw, settings.max_subtasks)
        except (EngineError, DecompositionError) as exc:
            reason = str(exc)
            log.info("chain %s decomposition rejected: %s", chain_id, reason)
            continue
        return ChainOfThought(chain_id, background, tuple(subtasks), planner, settings.max_subtasks)
    raise PlanningFailed(chain_id, reason)


async def plan_chain(task: TaskDescription, engine, chain_id: int = 0, planner: str = "0" * 64,
                     templates: PromptTemplates | None = None,
                     settings: CoordinatorSettings = CoordinatorSettings()) -> tuple[ChainOfThought, float]:
    """Planner-side work for one chain. Returns the chain and total engine milliseconds."""
    spent: list[float] = []
    background = await extract_background(task, engine, chain_id, templates, settings, spent)
    chain = await decompose(task, background, engine, chain_id, planner, templates, settings, spent)
    return chain, sum(spent)


async def perform_planning(engine, task_id: str, body: TaskBody, chain_id: int, planner: str,
                           templates: PromptTemplates | None = None,
                           settings: CoordinatorSettings = CoordinatorSettings()) -> TaskResultBody:
    """What a planner does with a planning Task: background, decomposition, encoded plan."""
    confidence = min(1.0, math.fsum(body.accumulated_scores) / len(body.accumulated_scores))
    task = TaskDescription(task_id, body.subtask_text)
    try:
        chain, spent = await plan_chain(task, engine, chain_id, planner, templates, settings)
    except PlanningError as exc:
        return TaskResultBody("", confidence, 0, f"planning_failed: {exc}")
    return TaskResultBody(encode_plan(chain), confidence, int(round(spent)))


def encode_plan(chain: ChainOfThought) -> str:
    return canonical_json({"background": chain.background, "subtasks": list(chain.subtasks)}).decode("utf-8")


def decode_plan(text: str, chain_id: int, planner: str, max_subtasks: int = 8) -> ChainOfThought:
    doc = json.loads(text)
    return ChainOfThought(chain_id, doc["background"], tuple(doc["subtasks"]), planner, max_subtasks)


# ---------------------------------------------------------------- fan-out


def planning_requirement(skills: Sequence[str] = DEFAULT_TAXONOMY) -> tuple[float, ...]:
    if "planning" in skills:
        return tuple(1.0 if s == "planning" else 0.0 for s in skills)
    return uniform_vector(len(skills))


async def plan_fanout(
    task: TaskDescription,
    fabric: Fabric,
    m: int,
    events: EventLog,
    settings: CoordinatorSettings = CoordinatorSettings(),
    skills: Sequence[str] = DEFAULT_TAXONOMY,
) -> list[ChainOfThought]:
    """Pick the top ``m`` planners by beacon score and have each plan one chain."""
    if m < 1:
        raise ValueError("m must be >= 1")
    if not fabric.available("planner"):
        raise NoPlanners("no available planners in the ledger")
    slot = (task.task_id, 0, PLANNING_SLOT)
    try:
        bids = await collect_bids(fabric, slot, planning_requirement(skills), task.user_input,
                                  "planner", settings.beacon_timeout_s, events)
    except NoResponders as exc:
        raise NoPlanners(str(exc)) from exc
    ranked = rank_responses((b.agent_id, b.body) for b in bids)[:m]
    for i, (agent, body) in enumerate(ranked):
        events.record("executor_selected", task.task_id, chain_id=i, subtask_index=PLANNING_SLOT,
                      agent=agent, score=body.score, role="planner")

    async def one(i: int, agent: str, score: float) -> ChainOfThought | None:
        body = TaskBody(task.user_input, "", (), (), (score,))
        slot_i = (task.task_id, i, PLANNING_SLOT)
        events.record("task_sent", task.task_id, chain_id=i, subtask_index=PLANNING_SLOT, agent=agent)
        try:
            result = await fabric.dispatch(slot_i, agent, body, settings.step_timeout_s)
        except DispatchTimeout:
            events.record("result_recv", task.task_id, chain_id=i, subtask_index=PLANNING_SLOT,
                          agent=agent, engine_ms=0, error="timeout")
            log.warning("planner %s timed out on chain %d", agent[:12], i)
            return None
        events.record("result_recv", task.task_id, chain_id=i, subtask_index=PLANNING_SLOT,
                      agent=agent, engine_ms=result.engine_ms, error=result.error)
        if result.error:
            log.warning("planner %s failed chain %d: %s", agent[:12], i, result.error)
            return None
        try:
            return decode_plan(result.final_answer, i, agent, settings.max_subtasks)
        except (ValueError, KeyError, TypeError) as exc:
            log.warning("planner %s returned an invalid plan: %s", agent[:12], exc)
            return None

    results = await asyncio.gather(*(one(i, a, b.score) for i, (a, b) in enumerate(ranked)))
    chains = [c for c in results if c is not None]
    if not chains:
        raise PlanningFailed(task.task_id, "every chain failed")
    return chains
