"""Replicated agent registry.

Each node keeps a :class:`Ledger`; ledgers converge by exchanging full
snapshots and merging them. Per record the merge keeps the copy with the
largest ``(last_seen, registration bytes, proof)`` key and the largest
contribution count, which makes it a join-semilattice: commutative,
associative and idempotent.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from types import MappingProxyType
from typing import Callable, Iterable, Mapping

from .matching import ValidationError, validate_vector
from .protocol import (
    DEFAULT_DIM,
    KeyPair,
    agent_id_of,
    canonical_json,
    is_agent_id,
    sign_bytes,
    verify_bytes,
)

log = logging.getLogger(__name__)

ROLES = frozenset({"planner", "executor"})
DEFAULT_TTL_MS = 10_000


class LedgerError(Exception):
    pass


class AuthError(LedgerError):
    pass


class NotRegistered(LedgerError, KeyError):
    pass


def now_ms() -> int:
    return time.time_ns() // 1_000_000


@dataclass(frozen=True)
class AgentRecord:
    agent_id: str
    public_key: bytes
    host: str
    port: int
    capability_vector: tuple[float, ...]
    roles: frozenset[str]
    last_seen: int = 0
    contributions: int = 0
    # opaque deployment details (model path, GPU allocation); never interpreted
    metadata: str = ""
    gateway_url: str = ""
    proof: bytes = field(default=b"", repr=False)

    def __post_init__(self):
        object.__setattr__(self, "capability_vector", validate_vector(self.capability_vector, name="capability_vector"))
        object.__setattr__(self, "roles", frozenset(self.roles))
        if not is_agent_id(self.agent_id):
            raise ValidationError(f"bad agent id {self.agent_id!r}")
        if not self.roles or not self.roles <= ROLES:
            raise ValidationError(f"roles must be a nonempty subset of {sorted(ROLES)}")
        if not 0 <= self.port <= 65535:
            raise ValidationError(f"port {self.port} out of range")
        if self.last_seen < 0 or self.contributions < 0:
            raise ValidationError("last_seen and contributions must be nonnegative")

    def registration_json(self) -> dict:
        """The fields covered by the registration proof."""
        return {
            "agent_id": self.agent_id,
            "public_key": self.public_key.hex(),
            "host": self.host,
            "port": self.port,
            "capability_vector": list(self.capability_vector),
            "roles": sorted(self.roles),
            "metadata": self.metadata,
            "gateway_url": self.gateway_url,
        }

    def registration_bytes(self) -> bytes:
        return canonical_json(self.registration_json())

    def signed(self, private_key: bytes) -> "AgentRecord":
        return replace(self, proof=sign_bytes(self.registration_bytes(), private_key))

    def proof_valid(self) -> bool:
        try:
            if agent_id_of(self.public_key) != self.agent_id:
                return False
            return verify_bytes(self.registration_bytes(), self.proof, self.public_key)
        except KeyError:
            return False

    def status(self, now: int, ttl_ms: int = DEFAULT_TTL_MS) -> str:
        return liveness(self.last_seen, now, ttl_ms)

    def merge_key(self) -> tuple:
        return (self.last_seen, self.registration_bytes(), self.proof)

    def to_json(self) -> dict:
        doc = self.registration_json()
        doc.update(last_seen=self.last_seen, contributions=self.contributions, proof=self.proof.hex())
        return doc

    @classmethod
    def from_json(cls, doc: Mapping) -> "AgentRecord":
        try:
            return cls(
                agent_id=doc["agent_id"],
                public_key=bytes.fromhex(doc["public_key"]),
                host=doc["host"],
                port=int(doc["port"]),
                capability_vector=tuple(doc["capability_vector"]),
                roles=frozenset(doc["roles"]),
                last_seen=int(doc.get("last_seen", 0)),
                contributions=int(doc.get("contributions", 0)),
                metadata=doc.get("metadata", ""),
                gateway_url=doc.get("gateway_url", ""),
                proof=bytes.fromhex(doc.get("proof", "")),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ValidationError(f"malformed agent record: {exc}") from None


def make_record(keys: KeyPair, host: str, port: int, capability: Iterable[float], roles: Iterable[str],
                last_seen: int | None = None, metadata: str = "", gateway_url: str = "") -> AgentRecord:
    rec = AgentRecord(
        agent_id=keys.agent_id,
        public_key=keys.public_key,
        host=host,
        port=port,
        capability_vector=tuple(capability),
        roles=frozenset(roles),
        last_seen=now_ms() if last_seen is None else last_seen,
        metadata=metadata,
        gateway_url=gateway_url,
    )
    return rec.signed(keys.private_key)


def liveness(last_seen: int, now: int, ttl_ms: int = DEFAULT_TTL_MS) -> str:
    return "offline" if now - last_seen > ttl_ms else "available"


def merge_records(a: AgentRecord, b: AgentRecord) -> AgentRecord:
    if a.agent_id != b.agent_id:
        raise ValueError("cannot merge records of different agents")
    winner = a if a.merge_key() >= b.merge_key() else b
    top = max(a.contributions, b.contributions)
    return winner if winner.contributions == top else replace(winner, contributions=top)


@dataclass(frozen=True)
class LedgerSnapshot:
    records: Mapping[str, AgentRecord]
    version: int = field(default=0, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "records", MappingProxyType(dict(sorted(self.records.items()))))

    def __eq__(self, other):
        if not isinstance(other, LedgerSnapshot):
            return NotImplemented
        return dict(self.records) == dict(other.records)

    def __hash__(self):
        return hash(tuple(self.records.items()))

    def __len__(self) -> int:
        return len(self.records)

    def to_json(self) -> dict:
        return {"version": self.version, "records": [r.to_json() for r in self.records.values()]}

    @classmethod
    def from_json(cls, doc: Mapping) -> "LedgerSnapshot":
        recs = [AgentRecord.from_json(r) for r in doc.get("records", [])]
        return cls({r.agent_id: r for r in recs}, int(doc.get("version", 0)))


def merge_snapshots(a: LedgerSnapshot, b: LedgerSnapshot) -> LedgerSnapshot:
    """Pure join of two snapshots (no proof checks; see :meth:`Ledger.merge`)."""
    out = dict(a.records)
    for aid, rec in b.records.items():
        out[aid] = merge_records(out[aid], rec) if aid in out else rec
    return LedgerSnapshot(out, max(a.version, b.version))


class Ledger:
    """A node's copy of the registry. All mutations go through these methods."""

    def __init__(self, dim: int = DEFAULT_DIM, ttl_ms: int = DEFAULT_TTL_MS,
                 clock: Callable[[], int] = now_ms, log_path: str | Path | None = None):
        self.dim = dim
        self.ttl_ms = ttl_ms
        self.clock = clock
        self._records: dict[str, AgentRecord] = {}
        self._version = 0
        self._snapshot: LedgerSnapshot | None = None
        self._verified: set[tuple[bytes, bytes]] = set()
        self._log_path = Path(log_path) if log_path else None
        self.rejected: list[str] = []

    # -- reads

    def snapshot(self) -> LedgerSnapshot:
        if self._snapshot is None:
            self._snapshot = LedgerSnapshot(self._records, self._version)
        return self._snapshot

    @property
    def version(self) -> int:
        return self._version

    def get(self, agent_id: str) -> AgentRecord | None:
        return self._records.get(agent_id)

    def status(self, agent_id: str, now: int | None = None) -> str:
        rec = self._records.get(agent_id)
        if rec is None:
            raise NotRegistered(agent_id)
        return rec.status(self.clock() if now is None else now, self.ttl_ms)

    def available_agents(self, role: str, now: int | None = None) -> list[AgentRecord]:
        now = self.clock() if now is None else now
        return [
            r for aid, r in sorted(self._records.items())
            if role in r.roles and r.status(now, self.ttl_ms) == "available"
        ]

    # -- mutations

    def _commit(self, op: dict | None = None) -> None:
        self._version += 1
        self._snapshot = None
        if op is not None and self._log_path is not None:
            with self._log_path.open("ab") as fh:
                fh.write(canonical_json(op) + b"\n")

    def _check(self, record: AgentRecord) -> None:
        if len(record.capability_vector) != self.dim:
            raise ValidationError(
                f"capability vector has dimension {len(record.capability_vector)}, expected {self.dim}"
            )
        key = (record.registration_bytes(), record.proof)
        if key in self._verified:
            return
        if not record.proof_valid():
            raise AuthError(f"registration proof for {record.agent_id[:12]} does not verify")
        self._verified.add(key)

    def register(self, record: AgentRecord, proof: bytes | None = None) -> LedgerSnapshot:
        if proof is not None:
            record = replace(record, proof=proof)
        self._check(record)
        old = self._records.get(record.agent_id)
        if old is not None:
            # a re-registration must win later merges against copies of the old record
            record = replace(
                record,
                last_seen=max(record.last_seen, old.last_seen + 1),
                contributions=max(record.contributions, old.contributions),
            )
        self._records[record.agent_id] = record
        self._commit({"op": "register", "record": record.to_json()})
        return self.snapshot()

    def heartbeat(self, agent_id: str, sent_at: int) -> None:
        rec = self._records.get(agent_id)
        if rec is None:
            raise NotRegistered(agent_id)
        if sent_at > rec.last_seen:
            self._records[agent_id] = replace(rec, last_seen=sent_at)
            self._commit({"op": "heartbeat", "agent_id": agent_id, "sent_at": sent_at})

    def record_contribution(self, agent_id: str) -> None:
        rec = self._records.get(agent_id)
        if rec is None:
            raise NotRegistered(agent_id)
        self._records[agent_id] = replace(rec, contributions=rec.contributions + 1)
        self._commit({"op": "contribution", "agent_id": agent_id})

    def merge(self, remote: LedgerSnapshot) -> LedgerSnapshot:
        changed = []
        for aid, rec in remote.records.items():
            try:
                if aid != rec.agent_id:
                    raise AuthError("record filed under a foreign id")
                self._check(rec)
            except (AuthError, ValidationError) as exc:
                log.warning("skipping remote record %s: %s", aid[:12], exc)
                self.rejected.append(aid)
                continue
            old = self._records.get(aid)
            new = rec if old is None else merge_records(old, rec)
            if new != old:
                self._records[aid] = new
                changed.append(new)
        if changed:
            self._commit({"op": "merge", "records": [r.to_json() for r in changed]})
        return self.snapshot()

    # -- persistence

    @classmethod
    def replay(cls, path: str | Path, **kwargs) -> "Ledger":
        """Rebuild a ledger from its append-only event file; keeps appending to it."""
        ledger = cls(**kwargs)
        path = Path(path)
        if path.exists():
            for line in path.read_text("utf-8").splitlines():
                if not line.strip():
                    continue
                op = json.loads(line)
                kind = op["op"]
                if kind == "register":
                    rec = AgentRecord.from_json(op["record"])
                    ledger._check(rec)
                    ledger._records[rec.agent_id] = rec
                elif kind == "heartbeat":
                    rec = ledger._records[op["agent_id"]]
                    ledger._records[rec.agent_id] = replace(rec, last_seen=max(rec.last_seen, op["sent_at"]))
                elif kind == "contribution":
                    rec = ledger._records[op["agent_id"]]
                    ledger._records[rec.agent_id] = replace(rec, contributions=rec.contributions + 1)
                elif kind == "merge":
                    for doc in op["records"]:
                        rec = AgentRecord.from_json(doc)
                        ledger._check(rec)
                        old = ledger._records.get(rec.agent_id)
                        ledger._records[rec.agent_id] = rec if old is None else merge_records(old, rec)
                else:
                    raise LedgerError(f"unknown ledger log op {kind!r}")
                ledger._version += 1
        ledger._snapshot = None
        ledger._log_path = path
        return ledger
