"""The seam between chain coordination and message delivery.

A :class:`Fabric` broadcasts beacons, dispatches tasks and records ledger
contributions. ``runtime.node`` implements it with signed envelopes over a
transport; ``bench`` implements it with direct in-process calls.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Protocol, Sequence

from .events import EventLog
from .matching import NoResponders
from .protocol import BeaconBody, BeaconResponseBody, TaskBody, TaskResultBody

Slot = tuple[str, int, int]


class DispatchTimeout(Exception):
    """The chosen agent did not return a TaskResult in time."""


@dataclass(frozen=True)
class Bid:
    agent_id: str
    body: BeaconResponseBody
    received_at: float


@dataclass(frozen=True)
class CoordinatorSettings:
    beacon_timeout_s: float = 2.0
    step_timeout_s: float = 30.0
    task_deadline_s: float = 120.0
    max_subtasks: int = 8
    retries: int = 1
    max_tokens: int = 512
    temperature: float = 0.5
    top_p: float = 0.9
    # per-stage overrides, e.g. {"planning": {"temperature": 0.7}}
    stage_overrides: dict = field(default_factory=dict, compare=False)

    def sampling(self, stage: str) -> dict:
        params = {"max_tokens": self.max_tokens, "temperature": self.temperature, "top_p": self.top_p}
        params.update(self.stage_overrides.get(stage, {}))
        return params


class Fabric(Protocol):
    dim: int

    def available(self, role: str) -> list[str]: ...

    def now_ms(self) -> int: ...

    async def beacon(self, slot: Slot, body: BeaconBody, targets: Sequence[str], timeout: float) -> list[Bid]: ...

    async def dispatch(self, slot: Slot, agent_id: str, body: TaskBody, timeout: float) -> TaskResultBody: ...

    def record_contribution(self, agent_id: str) -> None: ...


Selector = Callable[[Slot, list[Bid]], Bid]


async def collect_bids(
    fabric: Fabric,
    slot: Slot,
    requirement: Sequence[float],
    subtask_text: str,
    role: str,
    timeout: float,
    events: EventLog,
    exclude: frozenset[str] = frozenset(),
) -> list[Bid]:
    """Broadcast a beacon to available agents of ``role``; one rebroadcast at 2x timeout."""
    task_id, chain_id, k = slot
    for attempt, wait in enumerate((timeout, 2 * timeout)):
        targets = [a for a in fabric.available(role) if a not in exclude]
        body = BeaconBody(tuple(requirement), subtask_text, fabric.now_ms() + int(wait * 1000))
        events.record("beacon_sent", task_id, chain_id=chain_id, subtask_index=k,
                      targets=len(targets), attempt=attempt)
        bids = await fabric.beacon(slot, body, targets, wait) if targets else []
        for bid in bids:
            events.record("response_recv", task_id, ts=bid.received_at, chain_id=chain_id,
                          subtask_index=k, responder=bid.agent_id, score=bid.body.score)
        if bids:
            return bids
    raise NoResponders(f"no {role} answered the beacon for slot {slot}")
