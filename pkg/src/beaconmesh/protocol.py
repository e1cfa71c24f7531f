"""Wire-level message types, canonical encoding, framing and signatures.

Every peer message is an :class:`Envelope` carrying exactly one of four
payload bodies. Envelopes serialize to canonical JSON (sorted keys, no
insignificant whitespace, UTF-8) and travel inside a 4-byte big-endian
length prefix. The signature is Ed25519 over the canonical encoding of
the envelope with the ``signature`` field removed.
"""

from __future__ import annotations

import enum
import functools
import hashlib
import json
import math
import struct
from dataclasses import dataclass, field, replace
from typing import Any, Union

from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives.asymmetric.ed25519 import (
    Ed25519PrivateKey,
    Ed25519PublicKey,
)
from cryptography.hazmat.primitives.serialization import (
    Encoding,
    NoEncryption,
    PrivateFormat,
    PublicFormat,
)

WIRE_VERSION = 1
DEFAULT_DIM = 8
MAX_FRAME = 16 * 1024 * 1024
U64_MAX = 2**64 - 1

_HEX = frozenset("0123456789abcdef")


class ProtocolError(Exception):
    """Base class for wire-level failures."""


class EncodingError(ProtocolError):
    pass


class DecodeError(ProtocolError):
    def __init__(self, message: str, position: int = 0):
        super().__init__(f"{message} (at byte {position})")
        self.position = position


class UnknownMessageType(DecodeError):
    def __init__(self, msg_type: str, position: int = 0):
        super().__init__(f"unknown msg_type {msg_type!r}", position)
        self.msg_type = msg_type


class KeyMaterialError(KeyError):
    """Raised for keys of the wrong length or encoding."""


class MsgType(str, enum.Enum):
    BEACON = "Beacon"
    BEACON_RESPONSE = "BeaconResponse"
    TASK = "Task"
    TASK_RESULT = "TaskResult"


# ---------------------------------------------------------------- identity


def agent_id_of(public_key: bytes) -> str:
    """AgentId: lowercase hex SHA-256 of the raw 32-byte public key."""
    if len(public_key) != 32:
        raise KeyMaterialError(f"public key must be 32 bytes, got {len(public_key)}")
    return hashlib.sha256(public_key).hexdigest()


def is_agent_id(value: Any) -> bool:
    return isinstance(value, str) and len(value) == 64 and set(value) <= _HEX


@dataclass(frozen=True)
class KeyPair:
    private_key: bytes
    public_key: bytes

    @classmethod
    def generate(cls) -> "KeyPair":
        return cls.from_seed(
            Ed25519PrivateKey.generate().private_bytes(
                Encoding.Raw, PrivateFormat.Raw, NoEncryption()
            )
        )

    @classmethod
    def from_seed(cls, seed: bytes) -> "KeyPair":
        if len(seed) != 32:
            raise KeyMaterialError(f"private key seed must be 32 bytes, got {len(seed)}")
        sk = Ed25519PrivateKey.from_private_bytes(seed)
        pk = sk.public_key().public_bytes(Encoding.Raw, PublicFormat.Raw)
        return cls(private_key=seed, public_key=pk)

    @property
    def agent_id(self) -> str:
        return agent_id_of(self.public_key)


# key objects are costly to rebuild from raw bytes; peers reuse a handful
_private_key = functools.lru_cache(maxsize=256)(Ed25519PrivateKey.from_private_bytes)
_public_key = functools.lru_cache(maxsize=4096)(Ed25519PublicKey.from_public_bytes)


def sign_bytes(message: bytes, private_key: bytes) -> bytes:
    if len(private_key) != 32:
        raise KeyMaterialError(f"private key must be 32 bytes, got {len(private_key)}")
    return _private_key(bytes(private_key)).sign(message)


def verify_bytes(message: bytes, signature: bytes, public_key: bytes) -> bool:
    if len(public_key) != 32:
        raise KeyMaterialError(f"public key must be 32 bytes, got {len(public_key)}")
    if len(signature) != 64:
        return False
    try:
        _public_key(bytes(public_key)).verify(signature, message)
    except InvalidSignature:
        return False
    return True


# ----------------------------------------------------------- canonical JSON


def canonical_json(obj: Any) -> bytes:
    """Sorted keys, compact separators, UTF-8, shortest float repr."""
    try:
        text = json.dumps(
            obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False, allow_nan=False
        )
        return text.encode("utf-8")
    except (ValueError, TypeError) as exc:  # UnicodeEncodeError is a ValueError
        raise EncodingError(str(exc)) from exc


def _is_unit(x: Any) -> bool:
    return isinstance(x, float) and math.isfinite(x) and 0.0 <= x <= 1.0


def _check_u64(name: str, value: Any) -> None:
    if isinstance(value, bool) or not isinstance(value, int) or not 0 <= value <= U64_MAX:
        raise ValueError(f"{name} must be an unsigned 64-bit integer, got {value!r}")


def _as_float_tuple(values: Any) -> tuple[float, ...]:
    out = []
    for v in values:
        if isinstance(v, bool) or not isinstance(v, (int, float)):
            raise ValueError(f"expected a real, got {v!r}")
        out.append(float(v))
    return tuple(out)


# ------------------------------------------------------------------ bodies


@dataclass(frozen=True)
class BeaconBody:
    requirement_vector: tuple[float, ...]
    subtask_text: str
    respond_by: int

    def __post_init__(self):
        object.__setattr__(self, "requirement_vector", _as_float_tuple(self.requirement_vector))
        if not all(math.isfinite(x) for x in self.requirement_vector):
            raise EncodingError("requirement_vector contains a non-finite value")
        if not all(0.0 <= x <= 1.0 for x in self.requirement_vector):
            raise ValueError("requirement_vector components must lie in [0, 1]")
        if not any(x > 0 for x in self.requirement_vector):
            raise ValueError("requirement_vector must have a positive component")
        _check_u64("respond_by", self.respond_by)

    def to_json(self) -> dict:
        return {
            "requirement_vector": list(self.requirement_vector),
            "subtask_text": self.subtask_text,
            "respond_by": self.respond_by,
        }


@dataclass(frozen=True)
class BeaconResponseBody:
    score: float
    responder_load: int
    responded_at: int

    def __post_init__(self):
        if isinstance(self.score, bool) or not isinstance(self.score, (int, float)):
            raise ValueError(f"score must be a real, got {self.score!r}")
        object.__setattr__(self, "score", float(self.score))
        if not math.isfinite(self.score):
            raise EncodingError("score is not finite")
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score {self.score} outside [0, 1]")
        _check_u64("responder_load", self.responder_load)
        _check_u64("responded_at", self.responded_at)

    def to_json(self) -> dict:
        return {
            "score": self.score,
            "responder_load": self.responder_load,
            "responded_at": self.responded_at,
        }


@dataclass(frozen=True)
class TaskBody:
    subtask_text: str
    background: str
    prior_results: tuple[tuple[str, str], ...] = ()
    remaining_chain: tuple[str, ...] = ()
    accumulated_scores: tuple[float, ...] = ()

    def __post_init__(self):
        object.__setattr__(
            self, "prior_results", tuple((str(q), str(a)) for q, a in self.prior_results)
        )
        object.__setattr__(self, "remaining_chain", tuple(self.remaining_chain))
        object.__setattr__(self, "accumulated_scores", _as_float_tuple(self.accumulated_scores))
        if not all(math.isfinite(x) for x in self.accumulated_scores):
            raise EncodingError("accumulated_scores contains a non-finite value")
        if not all(0.0 <= x <= 1.0 for x in self.accumulated_scores):
            raise ValueError("accumulated_scores must lie in [0, 1]")
        if len(self.accumulated_scores) != len(self.prior_results) + 1:
            raise ValueError("accumulated_scores must hold one entry per completed step plus one")

    def to_json(self) -> dict:
        return {
            "subtask_text": self.subtask_text,
            "background": self.background,
            "prior_results": [list(p) for p in self.prior_results],
            "remaining_chain": list(self.remaining_chain),
            "accumulated_scores": list(self.accumulated_scores),
        }


@dataclass(frozen=True)
class TaskResultBody:
    final_answer: str
    confidence: float
    engine_ms: int = 0
    error: str | None = None

    def __post_init__(self):
        if isinstance(self.confidence, bool) or not isinstance(self.confidence, (int, float)):
            raise ValueError(f"confidence must be a real, got {self.confidence!r}")
        object.__setattr__(self, "confidence", float(self.confidence))
        if not math.isfinite(self.confidence):
            raise EncodingError("confidence is not finite")
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError(f"confidence {self.confidence} outside [0, 1]")
        _check_u64("engine_ms", self.engine_ms)

    def to_json(self) -> dict:
        return {
            "final_answer": self.final_answer,
            "confidence": self.confidence,
            "engine_ms": self.engine_ms,
            "error": self.error,
        }


Payload = Union[BeaconBody, BeaconResponseBody, TaskBody, TaskResultBody]

PAYLOAD_TYPES: dict[MsgType, type] = {
    MsgType.BEACON: BeaconBody,
    MsgType.BEACON_RESPONSE: BeaconResponseBody,
    MsgType.TASK: TaskBody,
    MsgType.TASK_RESULT: TaskResultBody,
}


# ---------------------------------------------------------------- envelope


@dataclass(frozen=True)
class Envelope:
    msg_type: MsgType
    sender: str
    task_id: str
    chain_id: int
    subtask_index: int
    payload: Payload
    sent_at: int
    signature: bytes = field(default=b"", repr=False)

    def __post_init__(self):
        object.__setattr__(self, "msg_type", MsgType(self.msg_type))
        if not is_agent_id(self.sender):
            raise ValueError(f"sender {self.sender!r} is not a 64-char lowercase hex id")
        if not isinstance(self.task_id, str):
            raise ValueError("task_id must be a string")
        _check_u64("chain_id", self.chain_id)
        _check_u64("subtask_index", self.subtask_index)
        _check_u64("sent_at", self.sent_at)
        expected = PAYLOAD_TYPES[self.msg_type]
        if not isinstance(self.payload, expected):
            raise ValueError(
                f"{self.msg_type.value} envelope needs {expected.__name__}, "
                f"got {type(self.payload).__name__}"
            )

    @property
    def slot(self) -> tuple[str, int, int]:
        return (self.task_id, self.chain_id, self.subtask_index)

    def unsigned_json(self) -> dict:
        return {
            "v": WIRE_VERSION,
            "msg_type": self.msg_type.value,
            "sender": self.sender,
            "task_id": self.task_id,
            "chain_id": self.chain_id,
            "subtask_index": self.subtask_index,
            "payload": self.payload.to_json(),
            "sent_at": self.sent_at,
        }

    def signing_bytes(self) -> bytes:
        return canonical_json(self.unsigned_json())


def encode(envelope: Envelope) -> bytes:
    doc = envelope.unsigned_json()
    doc["signature"] = envelope.signature.hex()
    return canonical_json(doc)


def sign(envelope: Envelope, private_key: bytes) -> Envelope:
    """Return a copy of ``envelope`` carrying a fresh detached signature."""
    return replace(envelope, signature=sign_bytes(envelope.signing_bytes(), private_key))


def verify(envelope: Envelope, public_key: bytes) -> bool:
    if agent_id_of(public_key) != envelope.sender:
        return False
    return verify_bytes(envelope.signing_bytes(), envelope.signature, public_key)


# ------------------------------------------------------------------ decode

_ENVELOPE_KEYS = {
    "v", "msg_type", "sender", "task_id", "chain_id", "subtask_index",
    "payload", "sent_at", "signature",
}
_BODY_KEYS = {
    MsgType.BEACON: {"requirement_vector", "subtask_text", "respond_by"},
    MsgType.BEACON_RESPONSE: {"score", "responder_load", "responded_at"},
    MsgType.TASK: {
        "subtask_text", "background", "prior_results", "remaining_chain", "accumulated_scores",
    },
    MsgType.TASK_RESULT: {"final_answer", "confidence", "engine_ms", "error"},
}


def _no_duplicates(pairs):
    out = {}
    for k, v in pairs:
        if k in out:
            raise ValueError(f"duplicate key {k!r}")
        out[k] = v
    return out


def _require(cond: bool, message: str) -> None:
    if not cond:
        raise ValueError(message)


def _strs(values: Any, name: str) -> list[str]:
    _require(isinstance(values, list), f"{name} must be a list")
    _require(all(isinstance(v, str) for v in values), f"{name} must hold strings")
    return values


def _payload_from_json(msg_type: MsgType, doc: Any, dim: int) -> Payload:
    _require(isinstance(doc, dict), "payload must be an object")
    _require(set(doc) == _BODY_KEYS[msg_type], f"payload keys {sorted(doc)} do not match {msg_type.value}")
    if msg_type is MsgType.BEACON:
        vec = doc["requirement_vector"]
        _require(isinstance(vec, list), "requirement_vector must be a list")
        _require(len(vec) == dim, f"requirement_vector has dimension {len(vec)}, expected {dim}")
        _require(isinstance(doc["subtask_text"], str), "subtask_text must be a string")
        return BeaconBody(tuple(vec), doc["subtask_text"], doc["respond_by"])
    if msg_type is MsgType.BEACON_RESPONSE:
        return BeaconResponseBody(doc["score"], doc["responder_load"], doc["responded_at"])
    if msg_type is MsgType.TASK:
        pairs = doc["prior_results"]
        _require(isinstance(pairs, list), "prior_results must be a list")
        for p in pairs:
            _require(isinstance(p, list) and len(p) == 2, "prior_results entries must be pairs")
            _strs(p, "prior_results entry")
        _require(isinstance(doc["subtask_text"], str), "subtask_text must be a string")
        _require(isinstance(doc["background"], str), "background must be a string")
        scores = doc["accumulated_scores"]
        _require(isinstance(scores, list), "accumulated_scores must be a list")
        return TaskBody(
            doc["subtask_text"],
            doc["background"],
            tuple(tuple(p) for p in pairs),
            tuple(_strs(doc["remaining_chain"], "remaining_chain")),
            tuple(scores),
        )
    _require(isinstance(doc["final_answer"], str), "final_answer must be a string")
    _require(doc["error"] is None or isinstance(doc["error"], str), "error must be a string or null")
    return TaskResultBody(doc["final_answer"], doc["confidence"], doc["engine_ms"], doc["error"])


def decode(data: bytes, dim: int = DEFAULT_DIM) -> Envelope:
    """Parse canonical envelope bytes; anything non-canonical is rejected."""
    try:
        text = bytes(data).decode("utf-8")
    except UnicodeDecodeError as exc:
        raise DecodeError(f"invalid UTF-8: {exc.reason}", exc.start) from None
    try:
        doc = json.loads(text, object_pairs_hook=_no_duplicates)
    except json.JSONDecodeError as exc:
        raise DecodeError(exc.msg, len(text[: exc.pos].encode("utf-8"))) from None
    except ValueError as exc:
        raise DecodeError(str(exc), 0) from None
    if not isinstance(doc, dict):
        raise DecodeError("envelope must be a JSON object", 0)
    raw_type = doc.get("msg_type")
    if not isinstance(raw_type, str):
        raise DecodeError("msg_type missing or not a string", 0)
    try:
        msg_type = MsgType(raw_type)
    except ValueError:
        raise UnknownMessageType(raw_type, bytes(data).find(b'"msg_type"')) from None
    try:
        _require(set(doc) == _ENVELOPE_KEYS, f"envelope keys {sorted(doc)} are not the envelope schema")
        _require(doc["v"] == WIRE_VERSION and type(doc["v"]) is int, f"unsupported wire version {doc['v']!r}")
        sig = doc["signature"]
        _require(isinstance(sig, str) and set(sig) <= _HEX and len(sig) % 2 == 0, "signature must be lowercase hex")
        env = Envelope(
            msg_type=msg_type,
            sender=doc["sender"],
            task_id=doc["task_id"],
            chain_id=doc["chain_id"],
            subtask_index=doc["subtask_index"],
            payload=_payload_from_json(msg_type, doc["payload"], dim),
            sent_at=doc["sent_at"],
            signature=bytes.fromhex(sig),
        )
    except (ValueError, TypeError, ProtocolError) as exc:
        raise DecodeError(str(exc), 0) from None
    again = encode(env)
    if again != bytes(data):
        pos = next((i for i, (a, b) in enumerate(zip(again, data)) if a != b), min(len(again), len(data)))
        raise DecodeError("non-canonical encoding", pos)
    return env


# ----------------------------------------------------------------- framing


def frame(payload: bytes) -> bytes:
    if len(payload) > MAX_FRAME:
        raise EncodingError(f"frame of {len(payload)} bytes exceeds {MAX_FRAME}")
    return struct.pack(">I", len(payload)) + payload


def unframe(data: bytes) -> bytes:
    """Strip the length prefix of exactly one complete frame."""
    if len(data) < 4:
        raise DecodeError("truncated length prefix", len(data))
    (n,) = struct.unpack(">I", data[:4])
    if n > MAX_FRAME:
        raise DecodeError(f"declared frame length {n} exceeds {MAX_FRAME}", 0)
    if len(data) != 4 + n:
        raise DecodeError(f"frame declares {n} bytes but carries {len(data) - 4}", min(len(data), 4 + n))
    return data[4:]


async def read_frame(reader) -> bytes:
    """Read one frame body from an asyncio StreamReader."""
    header = await reader.readexactly(4)
    (n,) = struct.unpack(">I", header)
    if n > MAX_FRAME:
        raise DecodeError(f"declared frame length {n} exceeds {MAX_FRAME}", 0)
    return await reader.readexactly(n)
