"""A peer node: gateway, message dispatch, ledger upkeep and chain coordination."""

from __future__ import annotations

import asyncio
import logging
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Awaitable, Callable

from ..engine import EngineError, engine_from_config
from ..events import EventLog, monotonic_ms
from ..execution import ChainFailed, ChainResult, argmax_selector, perform_subtask, run_chain
from ..fabric import Bid, DispatchTimeout, Selector, Slot
from ..ledger import AgentRecord, Ledger, LedgerSnapshot, make_record, now_ms
from ..matching import KeywordTagger, match_score
from ..planning import PLANNING_SLOT, PromptTemplates, TaskDescription, perform_planning, plan_fanout
from ..protocol import (
    BeaconResponseBody,
    DecodeError,
    Envelope,
    KeyPair,
    MsgType,
    TaskResultBody,
    decode,
    encode,
    frame,
    sign,
    verify,
)
from ..voting import Verdict, vote
from .config import NodeConfig
from .transport import Address, StartupError, Transport

log = logging.getLogger(__name__)

DEDUP_WINDOW = 100_000


class TaskDeadlineExceeded(Exception):
    pass


@dataclass
class SubmitOutcome:
    task_id: str
    verdict: Verdict
    chains: list[ChainResult]
    failures: dict[int, str]
    events: list[dict] = field(repr=False, default_factory=list)


class _BidCollector:
    def __init__(self, targets: set[str]):
        self.targets = targets
        self.bids: dict[str, Bid] = {}
        self.done = asyncio.Event()

    def add(self, bid: Bid) -> None:
        if bid.agent_id in self.targets and bid.agent_id not in self.bids:
            self.bids[bid.agent_id] = bid
            if len(self.bids) == len(self.targets):
                self.done.set()


class Node:
    """One peer. Implements the coordinator :class:`~beaconmesh.fabric.Fabric`."""

    def __init__(self, config: NodeConfig, transport: Transport, engine=None, keys: KeyPair | None = None,
                 events: EventLog | None = None, base_dir: Path | None = None,
                 clock: Callable[[], int] = now_ms):
        self.config = config
        self.transport = transport
        base_dir = base_dir or Path(".")
        if keys is None:
            keys = KeyPair.from_seed(bytes.fromhex(config.key_seed_hex)) if config.key_seed_hex else KeyPair.generate()
        self.keys = keys
        self.agent_id = keys.agent_id
        self.dim = config.dim
        self.clock = clock
        if config.ledger_log:
            self.ledger = Ledger.replay(config.ledger_log, dim=config.dim, ttl_ms=config.ttl_ms, clock=clock)
        else:
            self.ledger = Ledger(dim=config.dim, ttl_ms=config.ttl_ms, clock=clock)
        self.engine = engine if engine is not None else engine_from_config(config.engine, base_dir, engine_id=config.name)
        self.tagger = KeywordTagger.load(config.taxonomy_path)
        if len(self.tagger.skills) != config.dim:
            raise StartupError(f"taxonomy has {len(self.tagger.skills)} skills but dim is {config.dim}")
        self.templates = PromptTemplates.load(config.prompts.decomposition, config.prompts.execution,
                                              config.prompts.background)
        self.settings = config.coordinator_settings()
        self.events = events if events is not None else EventLog(config.event_log)
        self.audit: list[dict] = []
        self.handlers: dict[MsgType, Callable[[Envelope], Awaitable[None]]] = {
            MsgType.BEACON: self._on_beacon,
            MsgType.BEACON_RESPONSE: self._on_beacon_response,
            MsgType.TASK: self._on_task,
            MsgType.TASK_RESULT: self._on_task_result,
        }
        self._seen: OrderedDict[tuple, None] = OrderedDict()
        self._collectors: dict[Slot, _BidCollector] = {}
        self._waiting: dict[Slot, tuple[str, asyncio.Future]] = {}
        self._load = 0
        self._background: set[asyncio.Task] = set()
        self._loops: list[asyncio.Task] = []
        self.running = False
        self.handled: dict[MsgType, int] = {t: 0 for t in MsgType}

    # ------------------------------------------------------------ lifecycle

    @property
    def address(self) -> Address:
        return (self.config.host, self.config.port)

    def own_record(self) -> AgentRecord:
        return make_record(
            self.keys, self.config.host, self.config.port, self.config.capability_vector, self.config.roles,
            last_seen=self.clock(), metadata=self.config.metadata, gateway_url=self.config.gateway_url,
        )

    async def start(self, background_loops: bool = True) -> "Node":
        if self.config.probe_engine:
            try:
                await self.engine.probe()
            except EngineError as exc:
                raise StartupError(f"engine probe failed: {exc}") from exc
        await self.transport.listen(self)
        self.ledger.register(self.own_record())
        self.running = True
        await self.sync_once()
        if background_loops:
            self._loops = [
                asyncio.create_task(self._every(self.config.heartbeat_interval_s, self.beat)),
                asyncio.create_task(self._every(self.config.sync_interval_s, self.sync_once)),
            ]
        return self

    async def shutdown(self) -> None:
        self.running = False
        for t in self._loops + list(self._background):
            t.cancel()
        await asyncio.gather(*self._loops, *self._background, return_exceptions=True)
        self._loops.clear()
        for _, fut in self._waiting.values():
            if not fut.done():
                fut.cancel()
        await self.transport.close()

    async def _every(self, seconds: float, fn) -> None:
        while True:
            await asyncio.sleep(seconds)
            try:
                result = fn()
                if asyncio.iscoroutine(result):
                    await result
            except asyncio.CancelledError:
                raise
            except Exception:
                log.exception("%s: periodic task failed", self.config.name)

    def beat(self) -> None:
        self.ledger.heartbeat(self.agent_id, self.clock())

    def _peers(self) -> list[str]:
        peers = set(self.config.seeds)
        mine = self.transport.peer_key(self.config.host, self.config.port, self.config.gateway_url)
        for rec in self.ledger.snapshot().records.values():
            if rec.agent_id != self.agent_id:
                key = self.transport.peer_key(rec.host, rec.port, rec.gateway_url)
                if key:
                    peers.add(key)
        peers.discard(mine)
        return sorted(peers)

    async def sync_once(self) -> None:
        """Push-pull anti-entropy with every known peer."""
        if not self.running:
            return
        for peer in self._peers():
            reply = await self.transport.exchange_snapshot(peer, self.ledger.snapshot().to_json())
            if reply is not None:
                self._merge_json(reply)

    def accept_sync(self, snapshot: dict) -> dict:
        self._merge_json(snapshot)
        return self.ledger.snapshot().to_json()

    def _merge_json(self, doc: dict) -> None:
        try:
            remote = LedgerSnapshot.from_json(doc)
        except Exception as exc:
            self.audit_entry("bad_snapshot", detail=str(exc))
            return
        self.ledger.merge(remote)

    def status(self) -> dict:
        snap = self.ledger.snapshot()
        return {
            "agent_id": self.agent_id,
            "name": self.config.name,
            "address": f"{self.config.host}:{self.config.port}",
            "roles": sorted(self.config.roles),
            "running": self.running,
            "ledger_version": snap.version,
            "ledger_size": len(snap),
            "load": self._load,
            "audit_entries": len(self.audit),
        }

    def audit_entry(self, reason: str, **fields) -> None:
        entry = {"reason": reason, "at": self.clock(), **fields}
        self.audit.append(entry)
        log.info("%s audit: %s %s", self.config.name, reason, fields)

    # ---------------------------------------------------------- messaging

    async def _send(self, agent_id: str, msg_type: MsgType, slot: Slot, payload) -> None:
        rec = self.ledger.get(agent_id)
        if rec is None:
            log.warning("%s: cannot send to unknown agent %s", self.config.name, agent_id[:12])
            return
        task_id, chain_id, k = slot
        env = sign(Envelope(msg_type, self.agent_id, task_id, chain_id, k, payload, self.clock()),
                   self.keys.private_key)
        await self.transport.send((rec.host, rec.port), frame(encode(env)))

    async def receive(self, data: bytes) -> None:
        """Entry point for one unframed envelope from the transport."""
        if not self.running:
            return
        try:
            env = decode(data, self.dim)
        except DecodeError as exc:
            self.audit_entry("decode_error", detail=str(exc))
            return
        rec = self.ledger.get(env.sender)
        if rec is None:
            self.audit_entry("unknown_sender", sender=env.sender, msg_type=env.msg_type.value)
            return
        if not verify(env, rec.public_key):
            self.audit_entry("bad_signature", sender=env.sender, msg_type=env.msg_type.value)
            return
        key = (env.task_id, env.chain_id, env.subtask_index, env.msg_type, env.sender, env.sent_at)
        if key in self._seen:
            self.audit_entry("duplicate", sender=env.sender, msg_type=env.msg_type.value)
            return
        self._seen[key] = None
        if len(self._seen) > DEDUP_WINDOW:
            self._seen.popitem(last=False)
        self.handled[env.msg_type] += 1
        await self.handlers[env.msg_type](env)

    async def _on_beacon(self, env: Envelope) -> None:
        role = "planner" if env.subtask_index == PLANNING_SLOT else "executor"
        if role not in self.config.roles:
            return
        score = match_score(self.config.capability_vector, env.payload.requirement_vector)
        body = BeaconResponseBody(score, self._load, self.clock())
        await self._send(env.sender, MsgType.BEACON_RESPONSE, env.slot, body)

    async def _on_beacon_response(self, env: Envelope) -> None:
        collector = self._collectors.get(env.slot)
        if collector is not None:
            collector.add(Bid(env.sender, env.payload, monotonic_ms()))

    async def _on_task(self, env: Envelope) -> None:
        task = asyncio.create_task(self._work(env))
        self._background.add(task)
        task.add_done_callback(self._background.discard)

    async def _work(self, env: Envelope) -> None:
        body = env.payload
        self._load += 1
        try:
            if env.subtask_index == PLANNING_SLOT:
                result = await self._plan(env)
            else:
                result = await perform_subtask(self.engine, body, self.templates, self.settings)
        finally:
            self._load -= 1
        if self.running:
            await self._send(env.sender, MsgType.TASK_RESULT, env.slot, result)

    async def _plan(self, env: Envelope) -> TaskResultBody:
        return await perform_planning(self.engine, env.task_id, env.payload, env.chain_id, self.agent_id,
                                      self.templates, self.settings)

    async def _on_task_result(self, env: Envelope) -> None:
        waiting = self._waiting.get(env.slot)
        if waiting is None:
            return
        agent, fut = waiting
        if agent != env.sender or fut.done():
            return
        del self._waiting[env.slot]
        fut.set_result(env.payload)

    # --------------------------------------------------------- fabric side

    def available(self, role: str) -> list[str]:
        return [r.agent_id for r in self.ledger.available_agents(role)]

    def now_ms(self) -> int:
        return self.clock()

    async def beacon(self, slot: Slot, body, targets, timeout: float) -> list[Bid]:
        collector = _BidCollector(set(targets))
        self._collectors[slot] = collector
        try:
            await asyncio.gather(*(self._send(t, MsgType.BEACON, slot, body) for t in targets))
            try:
                await asyncio.wait_for(collector.done.wait(), timeout)
            except asyncio.TimeoutError:
                pass
        finally:
            if self._collectors.get(slot) is collector:
                del self._collectors[slot]
        return sorted(collector.bids.values(), key=lambda b: b.agent_id)

    async def dispatch(self, slot: Slot, agent_id: str, body, timeout: float) -> TaskResultBody:
        fut = asyncio.get_running_loop().create_future()
        self._waiting[slot] = (agent_id, fut)
        try:
            await self._send(agent_id, MsgType.TASK, slot, body)
            return await asyncio.wait_for(fut, timeout)
        except asyncio.TimeoutError:
            raise DispatchTimeout(f"{agent_id[:12]} gave no result for {slot} within {timeout}s") from None
        finally:
            if self._waiting.get(slot, (None, None))[1] is fut:
                del self._waiting[slot]

    def record_contribution(self, agent_id: str) -> None:
        self.ledger.record_contribution(agent_id)

    # -------------------------------------------------------------- submit

    async def submit(self, task: TaskDescription, m: int = 3, selector: Selector = argmax_selector,
                     weighted: bool = True) -> SubmitOutcome:
        """Plan with up to ``m`` planners, run every chain concurrently, vote."""
        self.events.record("task_start", task.task_id, chains=m)
        status = "failed"
        try:
            outcome = await asyncio.wait_for(self._run(task, m, selector, weighted),
                                             self.settings.task_deadline_s)
            status = "ok"
        except asyncio.TimeoutError:
            raise TaskDeadlineExceeded(
                f"task {task.task_id} exceeded {self.settings.task_deadline_s}s"
            ) from None
        finally:
            self.events.record("task_done", task.task_id, status=status)
        outcome.events = self.events.events(task.task_id)
        return outcome

    async def _run(self, task: TaskDescription, m: int, selector: Selector, weighted: bool) -> SubmitOutcome:
        chains = await plan_fanout(task, self, m, self.events, self.settings, self.tagger.skills)
        outcomes = await asyncio.gather(
            *(run_chain(c, self, task.task_id, self.events, self.tagger, self.settings, selector) for c in chains),
            return_exceptions=True,
        )
        results, failures = [], {}
        for chain, out in zip(chains, outcomes):
            if isinstance(out, ChainFailed):
                failures[chain.chain_id] = out.reason
            elif isinstance(out, BaseException):
                raise out
            else:
                results.append(out)
        self.events.record("vote_start", task.task_id, candidates=len(results))
        try:
            verdict = vote(results, weighted=weighted)
        finally:
            self.events.record("vote_done", task.task_id)
        return SubmitOutcome(task.task_id, verdict, results, failures, self.events.events(task.task_id))


async def start_node(config: NodeConfig, transport: Transport | None = None, engine=None,
                     keys: KeyPair | None = None, background_loops: bool = True,
                     base_dir: Path | None = None) -> Node:
    """Bind, self-register, and begin heartbeats and anti-entropy."""
    if transport is None:
        from .transport import TcpTransport

        listen = [(config.host, config.port)]
        for extra in config.extra_listen:
            host, _, port = extra.rpartition(":")
            listen.append((host, int(port)))
        transport = TcpTransport(listen)
    node = Node(config, transport, engine=engine, keys=keys, base_dir=base_dir)
    await node.start(background_loops=background_loops)
    return node
