"""HTTP gateway embedded in every node: registration, status, sync, submit."""

from __future__ import annotations

import uuid

from fastapi import FastAPI, HTTPException
from fastapi.responses import JSONResponse

from ..ledger import AgentRecord, AuthError, NotRegistered
from ..matching import MatchingError, ValidationError
from ..planning import PlanningError, TaskDescription
from ..protocol import canonical_json, verify_bytes
from ..runtime.node import Node, TaskDeadlineExceeded
from ..voting import NoSurvivingChains
from .models import (
    ChainSummary,
    ErrorResponse,
    HeartbeatRequest,
    LedgerEntry,
    LedgerResponse,
    RegisterRequest,
    StatusResponse,
    SubmitRequest,
    SubmitResponse,
    SyncRequest,
    SyncResponse,
)

# typed task failures and the status code each maps to
_FAILURES = (
    (TaskDeadlineExceeded, 504),
    (NoSurvivingChains, 502),
    (PlanningError, 503),
    (MatchingError, 503),
)


def heartbeat_bytes(agent_id: str, sent_at: int) -> bytes:
    return canonical_json({"agent_id": agent_id, "sent_at": sent_at})


def create_app(node: Node) -> FastAPI:
    app = FastAPI(title="beaconmesh node gateway")

    @app.get("/status", response_model=StatusResponse)
    async def status():
        return node.status()

    @app.get("/ledger", response_model=LedgerResponse)
    async def ledger():
        snap = node.ledger.snapshot()
        now = node.ledger.clock()
        agents = [
            LedgerEntry(
                agent_id=r.agent_id, host=r.host, port=r.port, roles=sorted(r.roles),
                capability_vector=list(r.capability_vector), status=r.status(now, node.ledger.ttl_ms),
                last_seen=r.last_seen, contributions=r.contributions, gateway_url=r.gateway_url,
            )
            for r in snap.records.values()
        ]
        return LedgerResponse(version=snap.version, agents=agents)

    @app.post("/ledger/register", response_model=LedgerResponse,
              responses={403: {"model": ErrorResponse}, 422: {"model": ErrorResponse}})
    async def register(req: RegisterRequest):
        try:
            record = AgentRecord.from_json(req.record.model_dump())
            node.ledger.register(record)
        except AuthError as exc:
            raise HTTPException(403, str(exc)) from None
        except ValidationError as exc:
            raise HTTPException(422, str(exc)) from None
        return await ledger()

    @app.post("/ledger/heartbeat", status_code=204,
              responses={403: {"model": ErrorResponse}, 404: {"model": ErrorResponse}})
    async def heartbeat(req: HeartbeatRequest):
        rec = node.ledger.get(req.agent_id)
        if rec is None:
            raise HTTPException(404, f"agent {req.agent_id[:12]} is not registered")
        try:
            sig = bytes.fromhex(req.signature)
        except ValueError:
            raise HTTPException(403, "signature is not hex") from None
        if not verify_bytes(heartbeat_bytes(req.agent_id, req.sent_at), sig, rec.public_key):
            raise HTTPException(403, "heartbeat signature does not verify")
        try:
            node.ledger.heartbeat(req.agent_id, req.sent_at)
        except NotRegistered:
            raise HTTPException(404, "not registered") from None

    @app.post("/ledger/sync", response_model=SyncResponse)
    async def sync(req: SyncRequest):
        return SyncResponse(snapshot=node.accept_sync(req.snapshot))

    @app.post("/tasks", response_model=SubmitResponse,
              responses={code: {"model": ErrorResponse} for _, code in _FAILURES})
    async def submit(req: SubmitRequest):
        task_id = req.task_id or uuid.uuid4().hex
        try:
            task = TaskDescription(task_id, req.text, tuple(req.options) if req.options else None)
        except ValueError as exc:
            raise HTTPException(422, str(exc)) from None
        try:
            out = await node.submit(task, m=req.chains)
        except Exception as exc:
            for kind, code in _FAILURES:
                if isinstance(exc, kind):
                    body = ErrorResponse(error=type(exc).__name__, detail=str(exc))
                    return JSONResponse(body.model_dump(), status_code=code)
            raise
        v = out.verdict
        return SubmitResponse(
            task_id=task_id,
            answer=v.answer,
            total_weight=v.total_weight,
            per_answer_weights=v.per_answer_weights,
            contributing_chains=list(v.contributing_chains),
            chains=[ChainSummary(chain_id=c.chain_id, final_answer=c.final_answer, confidence=c.confidence,
                                 per_step_scores=list(c.per_step_scores)) for c in out.chains],
            failures={str(k): r for k, r in out.failures.items()},
        )

    return app
