"""Structured per-task event log (one canonical-JSON line per event)."""

from __future__ import annotations

import threading
import time
from pathlib import Path
from typing import Iterable, Iterator

from .protocol import canonical_json

EVENT_KINDS = frozenset({
    "task_start", "task_done",
    "beacon_sent", "response_recv", "executor_selected",
    "task_sent", "result_recv",
    "chain_start", "chain_done",
    "ledger_begin", "ledger_end",
    "vote_start", "vote_done",
})


def monotonic_ms() -> float:
    return time.monotonic_ns() / 1e6


class EventLog:
    def __init__(self, path: str | Path | None = None):
        self._events: list[dict] = []
        self._lock = threading.Lock()
        self._path = Path(path) if path else None

    def record(self, kind: str, task_id: str, ts: float | None = None, **fields) -> dict:
        if kind not in EVENT_KINDS:
            raise ValueError(f"unknown event kind {kind!r}")
        event = {"event": kind, "task_id": task_id, "ts": monotonic_ms() if ts is None else ts}
        event.update(fields)
        with self._lock:
            self._events.append(event)
            if self._path is not None:
                with self._path.open("ab") as fh:
                    fh.write(canonical_json(event) + b"\n")
        return event

    def events(self, task_id: str | None = None) -> list[dict]:
        with self._lock:
            if task_id is None:
                return list(self._events)
            return [e for e in self._events if e["task_id"] == task_id]

    def __iter__(self) -> Iterator[dict]:
        return iter(self.events())

    def __len__(self) -> int:
        return len(self._events)


def load_events(path: str | Path) -> list[dict]:
    import json

    out = []
    for line in Path(path).read_text("utf-8").splitlines():
        if line.strip():
            out.append(json.loads(line))
    return out


def dump_events(events: Iterable[dict], path: str | Path) -> None:
    with Path(path).open("wb") as fh:
        for e in events:
            fh.write(canonical_json(e) + b"\n")
