"""Synthetic ablation bench: score vs random selection, one vs three chains.

A corpus directory holds ``agents.json`` (synthetic agent profiles) and
``tasks.jsonl`` (tasks with ready-made chains whose sub-tasks carry truth
markers). Runs go through the real coordinator code (beacon rounds,
dispatch, chain state, voting) over :class:`LocalFabric`, which calls the
agents directly instead of signing and framing envelopes.
"""

from __future__ import annotations

import asyncio
import hashlib
import json
import random
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

from .engine import SyntheticAgentProfile, SyntheticEngine, truth_marker
from .events import EventLog, monotonic_ms
from .execution import ChainFailed, argmax_selector, normalize_answer, perform_subtask, run_chain
from .fabric import Bid, CoordinatorSettings, DispatchTimeout, Selector, Slot
from .matching import DEFAULT_TAXONOMY, KeywordTagger, match_score
from .planning import PLANNING_SLOT, ChainOfThought, PromptTemplates, default_templates, perform_planning
from .protocol import BeaconResponseBody, TaskResultBody
from .voting import NoSurvivingChains, vote

# one question shape per skill; each tags exactly that skill
QUESTION_SHAPES = {
    "arithmetic": "What is the sum of item {x} and item {y} {m}?",
    "algebra": "Which root satisfies the equation for case {x} {m}?",
    "logic": "Is condition {x} necessary for outcome {y} {m}?",
    "reading-comprehension": "According to the passage, what is entry {x} {m}?",
    "planning": "Which step should the plan take after stage {x} {m}?",
    "world-knowledge": "What is the typical result in scenario {x} {m}?",
    "formatting": "How should entry {x} be formatted {m}?",
    "code": "What does the function return for input {x} {m}?",
}

MODES = ("score", "random")


class BenchError(Exception):
    pass


@dataclass(frozen=True)
class LocalAgent:
    agent_id: str
    capability: tuple[float, ...]
    roles: frozenset[str]
    engine: object


class LocalFabric:
    """Coordinator fabric that calls agents in-process, no transport."""

    def __init__(self, agents: Sequence[LocalAgent], templates: PromptTemplates | None = None,
                 settings: CoordinatorSettings = CoordinatorSettings()):
        self.agents = {a.agent_id: a for a in agents}
        self.templates = templates or default_templates()
        self.settings = settings
        self.contributions: dict[str, int] = {a: 0 for a in self.agents}
        self.dead: set[str] = set()

    def available(self, role: str) -> list[str]:
        return sorted(a for a, ag in self.agents.items() if role in ag.roles and a not in self.dead)

    def now_ms(self) -> int:
        return int(monotonic_ms())

    async def beacon(self, slot: Slot, body, targets, timeout: float) -> list[Bid]:
        bids = []
        for aid in sorted(targets):
            if aid in self.dead:
                continue
            score = match_score(self.agents[aid].capability, body.requirement_vector)
            # equal timestamps and loads leave ties to the agent id
            bids.append(Bid(aid, BeaconResponseBody(score, 0, 0), monotonic_ms()))
        return bids

    async def dispatch(self, slot: Slot, agent_id: str, body, timeout: float) -> TaskResultBody:
        engine = self.agents[agent_id].engine
        task_id, chain_id, k = slot
        if k == PLANNING_SLOT:
            work = perform_planning(engine, task_id, body, chain_id, agent_id, self.templates, self.settings)
        else:
            work = perform_subtask(engine, body, self.templates, self.settings)
        try:
            return await asyncio.wait_for(work, timeout)
        except asyncio.TimeoutError:
            raise DispatchTimeout(f"{agent_id[:12]} gave no result for {slot} within {timeout}s") from None

    def record_contribution(self, agent_id: str) -> None:
        self.contributions[agent_id] += 1


def random_selector(seed: int) -> Selector:
    """Uniform choice among bidders, keyed on the slot so interleaving does not matter."""

    def pick(slot: Slot, bids: list[Bid]) -> Bid:
        rng = random.Random(f"{seed}:{slot[0]}:{slot[1]}:{slot[2]}")
        return rng.choice(sorted(bids, key=lambda b: b.agent_id))

    return pick


# ------------------------------------------------------------------ corpus


def _agent_id(name: str) -> str:
    return hashlib.sha256(name.encode("utf-8")).hexdigest()


def make_agents(n: int, rng: random.Random, skills: Sequence[str] = DEFAULT_TAXONOMY) -> list[dict]:
    """Heterogeneous specialists: a strong primary skill, a middling secondary, weak elsewhere."""
    agents = []
    for i in range(n):
        primary = skills[i % len(skills)]
        secondary = skills[(i + 1 + rng.randrange(len(skills) - 1)) % len(skills)]
        vec = []
        for s in skills:
            if s == primary:
                vec.append(round(rng.uniform(0.75, 1.0), 3))
            elif s == secondary:
                vec.append(round(rng.uniform(0.3, 0.6), 3))
            else:
                vec.append(round(rng.uniform(0.0, 0.2), 3))
        agents.append({"name": f"agent-{i}", "capability_vector": vec, "a": 4.0, "b": -1.0})
    return agents


def _subtask(skill: str, truth: str, rng: random.Random) -> str:
    wrong = sorted({str(rng.randrange(100)) for _ in range(6)} - {truth})[:3]
    shape = QUESTION_SHAPES[skill]
    return shape.format(x=rng.randrange(1000), y=rng.randrange(1000), m=truth_marker(truth, wrong))


def make_task(i: int, rng: random.Random, skills: Sequence[str] = DEFAULT_TAXONOMY,
              n_chains: int = 3) -> dict:
    answer = str(rng.randrange(100))
    chains = []
    for _ in range(n_chains):
        k = rng.randint(2, 4)
        subtasks = []
        for step in range(k):
            truth = answer if step == k - 1 else str(rng.randrange(100))
            subtasks.append(_subtask(rng.choice(skills), truth, rng))
        chains.append({"background": f"Synthetic task {i}.", "subtasks": subtasks})
    return {"task_id": f"t{i:05d}", "text": f"Synthetic task {i}?", "answer": answer, "chains": chains}


def generate_corpus(out_dir: str | Path, n_tasks: int = 500, n_agents: int = 8, seed: int = 0) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = random.Random(seed)
    (out / "agents.json").write_text(json.dumps(make_agents(n_agents, rng), indent=1), "utf-8")
    with (out / "tasks.jsonl").open("w", encoding="utf-8") as fh:
        for i in range(n_tasks):
            fh.write(json.dumps(make_task(i, rng), sort_keys=True) + "\n")
    return out


def load_corpus(corpus_dir: str | Path) -> tuple[list[dict], list[dict]]:
    root = Path(corpus_dir)
    try:
        agents = json.loads((root / "agents.json").read_text("utf-8"))
        tasks = [json.loads(line) for line in (root / "tasks.jsonl").read_text("utf-8").splitlines() if line.strip()]
    except FileNotFoundError as exc:
        raise BenchError(f"corpus is missing {Path(exc.filename).name}") from None
    except json.JSONDecodeError as exc:
        raise BenchError(f"corpus file is not valid JSON: {exc}") from None
    if not agents or not tasks:
        raise BenchError("corpus has no agents or no tasks")
    return agents, tasks


# --------------------------------------------------------------------- run


@dataclass(frozen=True)
class BenchResult:
    mode: str
    chains: int
    seed: int
    tasks: int
    correct: int
    failed: int
    elapsed_s: float

    @property
    def accuracy(self) -> float:
        return self.correct / self.tasks if self.tasks else 0.0

    def to_json(self) -> dict:
        return {
            "mode": self.mode, "chains": self.chains, "seed": self.seed, "tasks": self.tasks,
            "correct": self.correct, "failed": self.failed, "accuracy": self.accuracy,
            "elapsed_s": self.elapsed_s,
        }


def build_fabric(agent_docs: list[dict], seed: int, tagger: KeywordTagger) -> LocalFabric:
    agents = []
    for i, doc in enumerate(agent_docs):
        cap = tuple(doc["capability_vector"])
        profile = SyntheticAgentProfile(cap, a=float(doc.get("a", 4.0)), b=float(doc.get("b", -1.0)),
                                        seed=seed * 1000 + i)
        agents.append(LocalAgent(_agent_id(doc["name"]), cap, frozenset(doc.get("roles", ["executor"])),
                                 SyntheticEngine(profile, tagger=tagger, engine_id=doc["name"])))
    return LocalFabric(agents)


async def _solve(task: dict, fabric: LocalFabric, n_chains: int, selector: Selector,
                 tagger: KeywordTagger, events: EventLog) -> str | None:
    chains = [
        ChainOfThought(i + 1, c["background"], tuple(c["subtasks"]), "bench")
        for i, c in enumerate(task["chains"][:n_chains])
    ]
    outs = await asyncio.gather(
        *(run_chain(c, fabric, task["task_id"], events, tagger, fabric.settings, selector) for c in chains),
        return_exceptions=True,
    )
    survivors = []
    for out in outs:
        if isinstance(out, ChainFailed):
            continue
        if isinstance(out, BaseException):
            raise out
        survivors.append(out)
    try:
        return vote(survivors).answer
    except NoSurvivingChains:
        return None


async def run_bench_async(corpus_dir: str | Path, mode: str = "score", chains: int = 3, seed: int = 0,
                          limit: int | None = None) -> BenchResult:
    if mode not in MODES:
        raise BenchError(f"mode must be one of {MODES}")
    if chains < 1:
        raise BenchError("chains must be positive")
    agent_docs, tasks = load_corpus(corpus_dir)
    tasks = tasks[:limit] if limit else tasks
    tagger = KeywordTagger.load()
    fabric = build_fabric(agent_docs, seed, tagger)
    selector = argmax_selector if mode == "score" else random_selector(seed)
    events = EventLog()
    start = time.perf_counter()
    correct = failed = 0
    for task in tasks:
        answer = await _solve(task, fabric, chains, selector, tagger, events)
        if answer is None:
            failed += 1
        elif answer == normalize_answer(task["answer"]):
            correct += 1
    return BenchResult(mode, chains, seed, len(tasks), correct, failed, time.perf_counter() - start)


def run_bench(corpus_dir: str | Path, mode: str = "score", chains: int = 3, seed: int = 0,
              limit: int | None = None) -> BenchResult:
    return asyncio.run(run_bench_async(corpus_dir, mode, chains, seed, limit))
