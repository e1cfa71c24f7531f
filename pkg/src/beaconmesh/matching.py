"""Capability match scoring and executor selection."""

from __future__ import annotations

import inspect
import json
import logging
import math
import re
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Iterable, Protocol, Sequence

from .protocol import BeaconResponseBody

log = logging.getLogger(__name__)

DEFAULT_TAXONOMY: tuple[str, ...] = (
    "arithmetic",
    "algebra",
    "logic",
    "reading-comprehension",
    "planning",
    "world-knowledge",
    "formatting",
    "code",
)


class MatchingError(Exception):
    pass


class ValidationError(MatchingError, ValueError):
    pass


class DegenerateVector(MatchingError, ValueError):
    pass


class NoResponders(MatchingError):
    pass


def validate_vector(components: Sequence[float], dim: int | None = None, name: str = "vector") -> tuple[float, ...]:
    """Check a capability/requirement vector and return it as a float tuple.

    Components must be finite, lie in [0, 1] and at least one must be
    positive. ``dim`` pins the length when given.
    """
    vec = tuple(float(x) for x in components)
    if dim is not None and len(vec) != dim:
        raise ValidationError(f"{name} has dimension {len(vec)}, expected {dim}")
    if not vec:
        raise ValidationError(f"{name} is empty")
    for x in vec:
        if not math.isfinite(x) or not 0.0 <= x <= 1.0:
            raise ValidationError(f"{name} component {x!r} outside [0, 1]")
    if not any(x > 0.0 for x in vec):
        raise DegenerateVector(f"{name} has zero norm")
    return vec


def match_score(capability: Sequence[float], requirement: Sequence[float]) -> float:
    """Cosine similarity between two nonnegative vectors, clamped to [0, 1]."""
    if len(capability) != len(requirement):
        raise ValidationError(
            f"dimension mismatch: capability {len(capability)} vs requirement {len(requirement)}"
        )
    nc = math.hypot(*capability)
    nr = math.hypot(*requirement)
    if nc == 0.0 or nr == 0.0 or not (math.isfinite(nc) and math.isfinite(nr)):
        raise DegenerateVector("match_score needs two vectors with finite, nonzero norm")
    dot = math.fsum(c * r for c, r in zip(capability, requirement))
    return min(1.0, max(0.0, dot / nc / nr))


def _selection_key(item: tuple[str, BeaconResponseBody]):
    agent_id, body = item
    return (-body.score, body.responded_at, body.responder_load, agent_id)


def rank_responses(
    responses: Iterable[tuple[str, BeaconResponseBody]],
) -> list[tuple[str, BeaconResponseBody]]:
    """Order responses best-first: score desc, then earlier, less loaded, smaller id."""
    return sorted(responses, key=_selection_key)


def select_executor(responses: Iterable[tuple[str, BeaconResponseBody]]) -> str:
    ranked = rank_responses(responses)
    if not ranked:
        raise NoResponders("no beacon responses to select from")
    return ranked[0][0]


# -------------------------------------------------------------- requirements


class RequirementTagger(Protocol):
    skills: tuple[str, ...]

    def tag(self, text: str) -> Sequence[float]: ...


@dataclass(frozen=True)
class KeywordTagger:
    """Maps each taxonomy skill to 1.0 when any of its keywords occurs in the text."""

    skills: tuple[str, ...]
    keywords: tuple[tuple[str, ...], ...]

    @classmethod
    def from_mapping(cls, table: dict[str, list[str]]) -> "KeywordTagger":
        skills = tuple(table)
        return cls(skills, tuple(tuple(k.lower() for k in table[s]) for s in skills))

    @classmethod
    def load(cls, path: str | Path | None = None) -> "KeywordTagger":
        if path is None:
            text = resources.files("beaconmesh.data").joinpath("taxonomy.json").read_text("utf-8")
        else:
            text = Path(path).read_text("utf-8")
        table = json.loads(text)
        if not isinstance(table, dict) or not all(
            isinstance(v, list) and all(isinstance(k, str) for k in v) for v in table.values()
        ):
            raise ValidationError("taxonomy file must map skill names to keyword lists")
        return cls.from_mapping(table)

    def tag(self, text: str) -> list[float]:
        lowered = text.lower()
        out = []
        for words in self.keywords:
            hit = any(_word_pattern(w).search(lowered) for w in words)
            out.append(1.0 if hit else 0.0)
        return out


_PATTERNS: dict[str, re.Pattern] = {}


def _word_pattern(word: str) -> re.Pattern:
    pat = _PATTERNS.get(word)
    if pat is None:
        pat = re.compile(r"(?<![\w-])" + re.escape(word) + r"(?![\w-])")
        _PATTERNS[word] = pat
    return pat


def uniform_vector(dim: int) -> tuple[float, ...]:
    return tuple(1.0 / math.sqrt(dim) for _ in range(dim))


def _finish_requirement(raw: Sequence[float], dim: int, text: str) -> tuple[float, ...]:
    vec = tuple(min(1.0, max(0.0, float(x))) for x in raw)
    if len(vec) != dim:
        raise ValidationError(f"tagger produced dimension {len(vec)}, expected {dim}")
    if not any(x > 0.0 for x in vec):
        log.warning("no skill tags for sub-task %r; using uniform requirement", text[:80])
        return uniform_vector(dim)
    return vec


def requirement_of(subtask_text: str, tagger: RequirementTagger) -> tuple[float, ...]:
    if not subtask_text.strip():
        raise ValidationError("sub-task text is empty")
    return _finish_requirement(tagger.tag(subtask_text), len(tagger.skills), subtask_text)


async def resolve_requirement(subtask_text: str, tagger) -> tuple[float, ...]:
    """Like :func:`requirement_of` but also accepts taggers whose ``tag`` is async."""
    if not subtask_text.strip():
        raise ValidationError("sub-task text is empty")
    raw = tagger.tag(subtask_text)
    if inspect.isawaitable(raw):
        raw = await raw
    return _finish_requirement(raw, len(tagger.skills), subtask_text)


def one_hot(skill: str, skills: Sequence[str] = DEFAULT_TAXONOMY) -> tuple[float, ...]:
    if skill not in skills:
        raise ValidationError(f"unknown skill {skill!r}")
    return tuple(1.0 if s == skill else 0.0 for s in skills)


class EngineTagger:
    """Asks a text engine which taxonomy skills a sub-task needs.

    The engine is expected to answer with a comma-separated list of skill
    names; unknown names are ignored. Falls back to the keyword table when
    the engine fails or names nothing.
    """

    PROMPT = (
        "Which of these skills does the following sub-task require? "
        "Skills: {skills}.\nAnswer with a comma-separated list of skill names only.\n"
        "Sub-task: {text}\nSkills:"
    )

    def __init__(self, engine, skills: Sequence[str] = DEFAULT_TAXONOMY, fallback: KeywordTagger | None = None):
        self.engine = engine
        self.skills = tuple(skills)
        self.fallback = fallback

    async def tag(self, text: str) -> list[float]:
        from .engine import EngineError, EngineRequest

        prompt = self.PROMPT.format(skills=", ".join(self.skills), text=text)
        try:
            reply = await self.engine.generate(EngineRequest(prompt=prompt, max_tokens=64))
        except EngineError as exc:
            log.warning("engine tagger failed (%s); falling back to keywords", exc)
            reply = None
        named = set()
        if reply is not None:
            named = {p.strip().lower() for p in re.split(r"[,\n]", reply.text)}
        vec = [1.0 if s in named else 0.0 for s in self.skills]
        if not any(vec) and self.fallback is not None:
            return list(self.fallback.tag(text))
        return vec
