"""Text-generation engines.

All engines expose ``async generate(EngineRequest) -> EngineReply``:

* :class:`ScriptedEngine` - canned replies chosen by prompt substring, with
  injected latency and scheduled failures. Bit-deterministic.
* :class:`SyntheticEngine` - seeded stochastic agent whose chance of a
  correct boxed answer is ``sigmoid(a * match_score + b)``.
* :class:`RemoteEngine` - OpenAI-compatible chat-completions client.
"""

from __future__ import annotations

import asyncio
import hashlib
import json
import math
import os
import random
import re
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Protocol, Sequence

import httpx

from .matching import DEFAULT_TAXONOMY, KeywordTagger, match_score, requirement_of, validate_vector

DEFAULT_MAX_TOKENS = 512
DEFAULT_TEMPERATURE = 0.5
DEFAULT_TOP_P = 0.9


class EngineError(Exception):
    pass


class EngineUnavailable(EngineError):
    def __init__(self, message: str, status: int | None = None):
        super().__init__(message)
        self.status = status


@dataclass(frozen=True)
class EngineRequest:
    prompt: str
    max_tokens: int = DEFAULT_MAX_TOKENS
    temperature: float = DEFAULT_TEMPERATURE
    top_p: float = DEFAULT_TOP_P
    seed: int | None = None
    # forwarded untouched to remote backends
    extra: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if self.max_tokens < 1:
            raise ValueError("max_tokens must be >= 1")
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")
        if not 0 < self.top_p <= 1:
            raise ValueError("top_p must lie in (0, 1]")


@dataclass(frozen=True)
class EngineReply:
    text: str
    latency_ms: float
    engine_id: str


class Engine(Protocol):
    engine_id: str

    async def generate(self, request: EngineRequest) -> EngineReply: ...

    async def probe(self) -> None: ...


def measure_latency(reply: EngineReply) -> float:
    """Engine-attributed latency in milliseconds, as recorded at the call boundary."""
    return reply.latency_ms


def _elapsed_ms(start: float) -> float:
    return (time.perf_counter() - start) * 1000.0


# ----------------------------------------------------------------- scripted


@dataclass(frozen=True)
class ScriptedBehavior:
    rules: tuple[tuple[str, str], ...] = ()
    default: str = ""
    latency_ms: float = 0.0
    failure_schedule: frozenset[int] = frozenset()

    @classmethod
    def from_json(cls, doc: dict) -> "ScriptedBehavior":
        return cls(
            rules=tuple((r["match"], r["reply"]) for r in doc.get("rules", [])),
            default=doc.get("default", ""),
            latency_ms=float(doc.get("latency_ms", 0.0)),
            failure_schedule=frozenset(doc.get("failure_schedule", [])),
        )

    @classmethod
    def load(cls, path: str | Path) -> "ScriptedBehavior":
        return cls.from_json(json.loads(Path(path).read_text("utf-8")))

    def reply_for(self, prompt: str) -> str:
        for pattern, reply in self.rules:
            if pattern in prompt:
                return reply
        return self.default


class ScriptedEngine:
    def __init__(self, behavior: ScriptedBehavior, engine_id: str = "scripted"):
        self.behavior = behavior
        self.engine_id = engine_id
        self._calls = 0
        self._lock = threading.Lock()

    @property
    def calls(self) -> int:
        return self._calls

    async def generate(self, request: EngineRequest) -> EngineReply:
        start = time.perf_counter()
        with self._lock:
            index = self._calls
            self._calls += 1
        if index in self.behavior.failure_schedule:
            raise EngineUnavailable(f"{self.engine_id}: scheduled failure on call {index}")
        if self.behavior.latency_ms > 0:
            await asyncio.sleep(self.behavior.latency_ms / 1000.0)
        text = self.behavior.reply_for(request.prompt)
        return EngineReply(text=text, latency_ms=_elapsed_ms(start), engine_id=self.engine_id)

    async def probe(self) -> None:
        return None


# ---------------------------------------------------------------- synthetic

# Synthetic sub-tasks carry their ground truth inline so an engine can grade
# itself: ``[[truth=<answer>;wrong=<a>|<b>|...]]``.
TRUTH_MARKER = re.compile(r"\[\[truth=([^;\]]*);wrong=([^\]]*)\]\]")
_CONTEXT_PAIR = re.compile(
    r"Q\d+: [^\[]*\[\[truth=([^;\]]*);wrong=[^\]]*\]\][^$]*?Answer: \$\\boxed\{([^}]*)\}\$"
)


def truth_marker(truth: str, wrong: Sequence[str]) -> str:
    return f"[[truth={truth};wrong={'|'.join(wrong)}]]"


def sigmoid(x: float) -> float:
    if x >= 0:
        return 1.0 / (1.0 + math.exp(-x))
    z = math.exp(x)
    return z / (1.0 + z)


@dataclass(frozen=True)
class SyntheticAgentProfile:
    true_skill: tuple[float, ...]
    a: float = 4.0
    b: float = -1.0
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "true_skill", validate_vector(self.true_skill, name="true_skill"))

    def p_correct(self, score: float) -> float:
        return sigmoid(self.a * score + self.b)


class SyntheticEngine:
    """Seeded stochastic executor for directional ablations.

    Each draw is keyed on (seed, prompt, repeat count) rather than on a
    shared call counter, so results do not depend on how concurrent
    chains interleave.
    """

    def __init__(self, profile: SyntheticAgentProfile, tagger: KeywordTagger | None = None,
                 engine_id: str = "synthetic", latency_ms: float = 0.0):
        self.profile = profile
        self.tagger = tagger or KeywordTagger.load()
        self.engine_id = engine_id
        self.latency_ms = latency_ms
        self._seen: dict[str, int] = {}
        self._lock = threading.Lock()

    def _rng(self, prompt: str) -> random.Random:
        digest = hashlib.sha256(prompt.encode("utf-8")).hexdigest()
        with self._lock:
            n = self._seen.get(digest, 0)
            self._seen[digest] = n + 1
        return random.Random(f"{self.profile.seed}:{digest}:{n}")

    def answer(self, prompt: str) -> str:
        markers = list(TRUTH_MARKER.finditer(prompt))
        if not markers:
            return "$\\boxed{unknown}$"
        current = markers[-1]
        truth, wrong = current.group(1), current.group(2).split("|")
        head = prompt[: current.start()]
        lead = 'solve the sub-task: "'
        q = head.rfind(lead)
        instruction = head[q + len(lead):] if q >= 0 else head[-400:]
        prior_ok = all(t == a.strip() for t, a in _CONTEXT_PAIR.findall(head))
        score = match_score(self.profile.true_skill, requirement_of(instruction, self.tagger))
        rng = self._rng(prompt)
        correct = rng.random() < self.profile.p_correct(score)
        if correct and prior_ok:
            return f"$\\boxed{{{truth}}}$"
        choices = [w for w in wrong if w and w != truth] or [f"not {truth}"]
        return f"$\\boxed{{{rng.choice(choices)}}}$"

    async def generate(self, request: EngineRequest) -> EngineReply:
        start = time.perf_counter()
        if self.latency_ms > 0:
            await asyncio.sleep(self.latency_ms / 1000.0)
        text = self.answer(request.prompt)
        return EngineReply(text=text, latency_ms=_elapsed_ms(start), engine_id=self.engine_id)

    async def probe(self) -> None:
        return None


# ------------------------------------------------------------------- remote


class RemoteEngine:
    """Client for an OpenAI-compatible ``/chat/completions`` endpoint."""

    def __init__(
        self,
        base_url: str,
        model: str,
        api_key_env: str | None = "OPENAI_API_KEY",
        timeout_s: float = 60.0,
        max_in_flight: int = 4,
        extra_params: dict[str, Any] | None = None,
        engine_id: str | None = None,
        transport: httpx.AsyncBaseTransport | None = None,
    ):
        self.base_url = base_url.rstrip("/")
        self.model = model
        self.api_key_env = api_key_env
        self.timeout_s = timeout_s
        self.extra_params = dict(extra_params or {})
        self.engine_id = engine_id or f"remote:{model}"
        self._limit = asyncio.Semaphore(max_in_flight)
        self._transport = transport

    def _headers(self) -> dict[str, str]:
        headers = {"Content-Type": "application/json"}
        token = os.environ.get(self.api_key_env, "") if self.api_key_env else ""
        if token:
            headers["Authorization"] = f"Bearer {token}"
        return headers

    def _client(self) -> httpx.AsyncClient:
        return httpx.AsyncClient(timeout=self.timeout_s, transport=self._transport)

    def payload(self, request: EngineRequest) -> dict:
        body = {
            "model": self.model,
            "messages": [{"role": "user", "content": request.prompt}],
            "max_tokens": request.max_tokens,
            "temperature": request.temperature,
            "top_p": request.top_p,
        }
        if request.seed is not None:
            body["seed"] = request.seed
        body.update(self.extra_params)
        body.update(request.extra)
        return body

    async def generate(self, request: EngineRequest) -> EngineReply:
        async with self._limit:
            start = time.perf_counter()
            try:
                async with self._client() as client:
                    resp = await asyncio.wait_for(
                        client.post(
                            f"{self.base_url}/chat/completions",
                            json=self.payload(request),
                            headers=self._headers(),
                        ),
                        timeout=self.timeout_s,
                    )
            except (httpx.HTTPError, asyncio.TimeoutError, OSError) as exc:
                raise EngineUnavailable(f"{self.engine_id}: {type(exc).__name__}: {exc}") from exc
            latency = _elapsed_ms(start)
        if not 200 <= resp.status_code < 300:
            raise EngineUnavailable(
                f"{self.engine_id}: HTTP {resp.status_code}: {resp.text[:200]}", resp.status_code
            )
        try:
            choice = resp.json()["choices"][0]
            text = choice["message"]["content"] if "message" in choice else choice["text"]
        except (ValueError, KeyError, IndexError, TypeError) as exc:
            raise EngineUnavailable(f"{self.engine_id}: malformed completion body") from exc
        return EngineReply(text=text or "", latency_ms=latency, engine_id=self.engine_id)

    async def probe(self) -> None:
        try:
            async with self._client() as client:
                resp = await client.get(f"{self.base_url}/models", headers=self._headers())
        except (httpx.HTTPError, OSError) as exc:
            raise EngineUnavailable(f"probe of {self.base_url} failed: {exc}") from exc
        if resp.status_code >= 500:
            raise EngineUnavailable(f"probe of {self.base_url}: HTTP {resp.status_code}", resp.status_code)


def engine_from_config(cfg: dict, base_dir: Path | None = None, engine_id: str | None = None):
    """Build an engine from a ``{"kind": ...}`` mapping (see NodeConfig)."""
    kind = cfg.get("kind")
    base_dir = base_dir or Path(".")
    if kind == "scripted":
        if "path" in cfg:
            behavior = ScriptedBehavior.load(base_dir / cfg["path"])
        else:
            behavior = ScriptedBehavior.from_json(cfg)
        if "latency_ms" in cfg and "path" in cfg:
            behavior = ScriptedBehavior(behavior.rules, behavior.default, float(cfg["latency_ms"]),
                                        behavior.failure_schedule)
        return ScriptedEngine(behavior, engine_id=engine_id or "scripted")
    if kind == "synthetic":
        profile = SyntheticAgentProfile(
            true_skill=tuple(cfg["true_skill"]),
            a=float(cfg.get("a", 4.0)),
            b=float(cfg.get("b", -1.0)),
            seed=int(cfg.get("seed", 0)),
        )
        return SyntheticEngine(profile, engine_id=engine_id or "synthetic",
                               latency_ms=float(cfg.get("latency_ms", 0.0)))
    if kind == "remote":
        return RemoteEngine(
            base_url=cfg["base_url"],
            model=cfg["model"],
            api_key_env=cfg.get("api_key_env", "OPENAI_API_KEY"),
            timeout_s=float(cfg.get("timeout_s", 60.0)),
            max_in_flight=int(cfg.get("max_in_flight", 4)),
            extra_params=cfg.get("params"),
            engine_id=engine_id,
        )
    raise ValueError(f"unknown engine kind {kind!r}")


__all__ = [
    "DEFAULT_TAXONOMY",
    "Engine",
    "EngineError",
    "EngineReply",
    "EngineRequest",
    "EngineUnavailable",
    "RemoteEngine",
    "ScriptedBehavior",
    "ScriptedEngine",
    "SyntheticAgentProfile",
    "SyntheticEngine",
    "engine_from_config",
    "measure_latency",
    "sigmoid",
    "truth_marker",
]
