"""Chain execution: beacon rounds, context chaining, boxed answers, recovery."""

from __future__ import annotations

import logging
import math
import re
from dataclasses import dataclass, field
from decimal import Decimal, InvalidOperation
from typing import Sequence

from .engine import EngineError, EngineRequest
from .events import EventLog
from .fabric import Bid, CoordinatorSettings, DispatchTimeout, Fabric, Selector, Slot, collect_bids
from .matching import resolve_requirement
from .planning import ChainOfThought, PromptTemplates, default_templates
from .protocol import TaskBody, TaskResultBody

log = logging.getLogger(__name__)

ERR_NO_BOX = "no_boxed_answer"
ERR_ENGINE = "engine_unavailable"


class ExecutionError(Exception):
    pass


class NoBoxedAnswer(ExecutionError, ValueError):
    pass


class SubtaskFailed(ExecutionError):
    pass


class ChainFailed(ExecutionError):
    def __init__(self, chain_id: int, reason: str):
        super().__init__(f"chain {chain_id} failed: {reason}")
        self.chain_id = chain_id
        self.reason = reason


# ------------------------------------------------------------------ answers

_BOXED = "\\boxed{"
_NUMERIC = re.compile(r"^[+-]?(\d+(\.\d*)?|\.\d+)([eE][+-]?\d+)?$")


def extract_boxed(raw: str) -> str:
    """Contents of the last balanced ``\\boxed{...}`` group, whitespace-trimmed."""
    found = None
    start = raw.find(_BOXED)
    while start >= 0:
        i = start + len(_BOXED)
        depth = 1
        j = i
        while j < len(raw) and depth:
            if raw[j] == "{":
                depth += 1
            elif raw[j] == "}":
                depth -= 1
            j += 1
        if depth == 0:
            found = raw[i : j - 1]
        start = raw.find(_BOXED, start + 1)
    if found is None:
        raise NoBoxedAnswer("no balanced \\boxed{...} group in engine output")
    return found.strip()


def normalize_answer(answer: str) -> str:
    """Equality key for answers: trimmed, single-spaced, case-folded, no trailing
    periods; numeric strings are rendered as canonical decimals."""
    text = " ".join(answer.split()).casefold().rstrip(".").strip()
    if _NUMERIC.match(text):
        try:
            d = Decimal(text)
        except InvalidOperation:
            return text
        if d.is_finite():
            if d == 0:
                return "0"
            d = d.normalize()
            text = format(d, "f")
    return text


# ------------------------------------------------------------------ context


def format_step(n: int, question: str, answer: str) -> str:
    return f"Q{n}: {question} Answer: $\\boxed{{{answer}}}$"


def build_context(background: str, completed: Sequence[tuple[str, str]]) -> str:
    """Background followed by each completed (question, answer) pair in order."""
    parts = [background]
    parts.extend(format_step(n, q, a) for n, (q, a) in enumerate(completed, 1))
    return " ".join(p for p in parts if p)


def instruction_for(k: int, subtask_text: str) -> str:
    return f"Q{k}: {subtask_text}"


@dataclass
class ChainState:
    chain: ChainOfThought
    completed: list[tuple[str, str, float]] = field(default_factory=list)
    deadline: float | None = None

    @property
    def cursor(self) -> int:
        return len(self.completed)

    @property
    def scores(self) -> list[float]:
        return [s for _, _, s in self.completed]

    def context(self) -> str:
        return build_context(self.chain.background, [(q, a) for q, a, _ in self.completed])


@dataclass(frozen=True)
class ChainResult:
    chain_id: int
    final_answer: str
    confidence: float
    per_step_scores: tuple[float, ...]
    raw_answer: str = ""
    executors: tuple[str, ...] = ()

    def __post_init__(self):
        if not self.final_answer:
            raise ValueError("final_answer is empty")
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError("confidence outside [0, 1]")


def mean_score(scores: Sequence[float]) -> float:
    return math.fsum(scores) / len(scores)


# ------------------------------------------------------------ executor side


async def perform_subtask(engine, body: TaskBody, templates: PromptTemplates | None = None,
                          settings: CoordinatorSettings = CoordinatorSettings()) -> TaskResultBody:
    """What an executor does with a Task: prompt, generate, extract, reprompt once."""
    templates = templates or default_templates()
    k = len(body.prior_results) + 1
    prompt = templates.render_execution(
        build_context(body.background, body.prior_results), instruction_for(k, body.subtask_text)
    )
    confidence = min(1.0, mean_score(body.accumulated_scores))
    spent = 0.0
    error = ""
    for _ in range(settings.retries + 1):
        try:
            reply = await engine.generate(EngineRequest(prompt=prompt, **settings.sampling("execution")))
        except EngineError as exc:
            error = f"{ERR_ENGINE}: {exc}"
            continue
        spent += reply.latency_ms
        try:
            answer = extract_boxed(reply.text)
        except NoBoxedAnswer:
            error = f"{ERR_NO_BOX}: {reply.text[:120]!r}"
            continue
        if answer:
            return TaskResultBody(answer, confidence, int(round(spent)))
        error = f"{ERR_NO_BOX}: empty box"
    return TaskResultBody("", confidence, int(round(spent)), error)


# --------------------------------------------------------- coordinator side


def argmax_selector(slot: Slot, bids: list[Bid]) -> Bid:
    from .matching import rank_responses

    by_id = {b.agent_id: b for b in bids}
    best, _ = rank_responses((b.agent_id, b.body) for b in bids)[0]
    return by_id[best]


async def beacon_round(
    fabric: Fabric,
    slot: Slot,
    subtask_text: str,
    requirement: Sequence[float],
    events: EventLog,
    timeout: float = 2.0,
    exclude: frozenset[str] = frozenset(),
    selector: Selector = argmax_selector,
) -> tuple[str, float]:
    bids = await collect_bids(fabric, slot, requirement, subtask_text, "executor", timeout, events, exclude)
    chosen = selector(slot, bids)
    task_id, chain_id, k = slot
    events.record("executor_selected", task_id, chain_id=chain_id, subtask_index=k,
                  agent=chosen.agent_id, score=chosen.body.score, role="executor")
    return chosen.agent_id, chosen.body.score


async def execute_subtask(fabric: Fabric, slot: Slot, executor: str, body: TaskBody,
                          events: EventLog, timeout: float) -> TaskResultBody:
    task_id, chain_id, k = slot
    events.record("task_sent", task_id, chain_id=chain_id, subtask_index=k, agent=executor)
    try:
        result = await fabric.dispatch(slot, executor, body, timeout)
    except DispatchTimeout:
        events.record("result_recv", task_id, chain_id=chain_id, subtask_index=k,
                      agent=executor, engine_ms=0, error="timeout")
        raise
    events.record("result_recv", task_id, chain_id=chain_id, subtask_index=k,
                  agent=executor, engine_ms=result.engine_ms, error=result.error)
    return result


async def run_chain(
    chain: ChainOfThought,
    fabric: Fabric,
    task_id: str,
    events: EventLog,
    tagger,
    settings: CoordinatorSettings = CoordinatorSettings(),
    selector: Selector = argmax_selector,
) -> ChainResult:
    """Drive one chain to completion, strictly one sub-task at a time."""
    state = ChainState(chain)
    executors: list[str] = []
    events.record("chain_start", task_id, chain_id=chain.chain_id, steps=len(chain.subtasks))
    try:
        for k, text in enumerate(chain.subtasks, 1):
            slot = (task_id, chain.chain_id, k)
            requirement = await resolve_requirement(text, tagger)
            excluded: frozenset[str] = frozenset()
            result = None
            score = 0.0
            for attempt in range(settings.retries + 1):
                try:
                    executor, score = await beacon_round(
                        fabric, slot, text, requirement, events, settings.beacon_timeout_s, excluded, selector
                    )
                except Exception as exc:
                    raise ChainFailed(chain.chain_id, f"step {k}: {exc}") from exc
                body = TaskBody(
                    text,
                    chain.background,
                    tuple((q, a) for q, a, _ in state.completed),
                    chain.subtasks[k:],
                    tuple(state.scores) + (score,),
                )
                try:
                    result = await execute_subtask(fabric, slot, executor, body, events, settings.step_timeout_s)
                except DispatchTimeout:
                    log.warning("executor %s timed out on %s; reassigning", executor[:12], slot)
                    excluded = excluded | {executor}
                    result = None
                    continue
                if result.error and result.error.startswith(ERR_ENGINE):
                    excluded = excluded | {executor}
                    result = None
                    continue
                break
            if result is None:
                raise ChainFailed(chain.chain_id, f"step {k}: no executor completed the sub-task")
            if result.error:
                raise ChainFailed(chain.chain_id, f"step {k}: {SubtaskFailed(result.error)}")
            state.completed.append((text, result.final_answer, score))
            executors.append(executor)
            events.record("ledger_begin", task_id, chain_id=chain.chain_id, subtask_index=k)
            fabric.record_contribution(executor)
            events.record("ledger_end", task_id, chain_id=chain.chain_id, subtask_index=k)
    except ChainFailed as exc:
        events.record("chain_done", task_id, chain_id=chain.chain_id, status="failed", reason=exc.reason)
        raise
    raw = state.completed[-1][1]
    normalized = normalize_answer(raw) or raw
    res = ChainResult(chain.chain_id, normalized, mean_score(state.scores), tuple(state.scores),
                      raw, tuple(executors))
    events.record("chain_done", task_id, chain_id=chain.chain_id, status="ok",
                  answer=res.final_answer, confidence=res.confidence)
    return res
