"""Request and response bodies for the node gateway."""

from __future__ import annotations

from typing import Any, Optional

from pydantic import BaseModel, Field


class RecordModel(BaseModel):
    agent_id: str
    public_key: str
    host: str
    port: int
    capability_vector: list[float]
    roles: list[str]
    metadata: str = ""
    gateway_url: str = ""
    last_seen: int = 0
    contributions: int = 0
    proof: str = ""


class RegisterRequest(BaseModel):
    record: RecordModel


class HeartbeatRequest(BaseModel):
    agent_id: str
    sent_at: int
    # hex signature over canonical {"agent_id", "sent_at"}
    signature: str


class SyncRequest(BaseModel):
    snapshot: dict[str, Any]


class SyncResponse(BaseModel):
    snapshot: dict[str, Any]


class StatusResponse(BaseModel):
    agent_id: str
    name: str
    address: str
    roles: list[str]
    running: bool
    ledger_version: int
    ledger_size: int
    load: int
    audit_entries: int


class LedgerEntry(BaseModel):
    agent_id: str
    host: str
    port: int
    roles: list[str]
    capability_vector: list[float]
    status: str
    last_seen: int
    contributions: int
    gateway_url: str = ""


class LedgerResponse(BaseModel):
    version: int
    agents: list[LedgerEntry]


class SubmitRequest(BaseModel):
    text: str = Field(min_length=1)
    chains: int = Field(default=3, ge=1, le=16)
    options: Optional[list[str]] = None
    task_id: Optional[str] = None


class ChainSummary(BaseModel):
    chain_id: int
    final_answer: str
    confidence: float
    per_step_scores: list[float]


class SubmitResponse(BaseModel):
    task_id: str
    answer: str
    total_weight: float
    per_answer_weights: dict[str, float]
    contributing_chains: list[int]
    chains: list[ChainSummary]
    failures: dict[str, str]


class ErrorResponse(BaseModel):
    error: str
    detail: str
