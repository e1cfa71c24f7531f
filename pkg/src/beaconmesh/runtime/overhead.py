"""Orchestration overhead from a coordinator's event log.

The task's wall-clock span is split into labelled segments. Engine time is
the union of engine-busy intervals (each ``result_recv`` carries the
engine milliseconds spent on that reply, placed just before its arrival);
every other instant is charged to exactly one orchestration phase, so the
phases always add up to ``total - engine``.
"""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass, field
from typing import Iterable

PHASES = ("beacon", "registration", "voting", "dispatch")
_PRIORITY = ("engine", "beacon", "registration", "voting")


class ReportError(Exception):
    def __init__(self, missing: list[str]):
        super().__init__("incomplete event log: " + "; ".join(missing))
        self.missing = missing


@dataclass(frozen=True)
class OverheadBreakdown:
    task_id: str
    total_ms: float
    engine_ms: float
    orchestration_ms: float
    ratio: float
    phases: dict[str, float] = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "task_id": self.task_id,
            "total_ms": self.total_ms,
            "engine_ms": self.engine_ms,
            "orchestration_ms": self.orchestration_ms,
            "ratio": self.ratio,
            "phases": dict(self.phases),
        }


def _check_complete(task_id: str, events: list[dict]) -> list[str]:
    kinds = [e["event"] for e in events]
    missing = []
    if "task_start" not in kinds:
        missing.append(f"{task_id}: task_start")
    if "task_done" not in kinds:
        missing.append(f"{task_id}: task_done")
    started = {e["chain_id"] for e in events if e["event"] == "chain_start"}
    done = {e["chain_id"] for e in events if e["event"] == "chain_done"}
    missing.extend(f"{task_id}: chain_done for chain {c}" for c in sorted(started - done))
    return missing


def _slot_key(e: dict):
    k = e.get("subtask_index")
    return ("plan",) if k == 0 else (e.get("chain_id"), k)


def labelled_intervals(events: list[dict]) -> dict[str, list[tuple[float, float]]]:
    """Intervals per label (engine, beacon, registration, voting) from one task's events."""
    events = sorted(events, key=lambda e: e["ts"])
    t0 = next(e["ts"] for e in events if e["event"] == "task_start")
    out: dict[str, list[tuple[float, float]]] = defaultdict(list)
    for e in events:
        if e["event"] == "result_recv" and e.get("engine_ms"):
            out["engine"].append((max(t0, e["ts"] - e["engine_ms"]), e["ts"]))
    for i, e in enumerate(events):
        if e["event"] != "beacon_sent":
            continue
        key = _slot_key(e)
        end = None
        for f in events[i + 1:]:
            if f["event"] == "task_done" or (
                f["event"] in ("executor_selected", "beacon_sent", "chain_done") and _slot_key(f) == key
            ):
                end = f["ts"]
                break
        if end is not None:
            out["beacon"].append((e["ts"], end))
    opened: dict[tuple, float] = {}
    for e in events:
        if e["event"] == "ledger_begin":
            opened[(e.get("chain_id"), e.get("subtask_index"))] = e["ts"]
        elif e["event"] == "ledger_end":
            start = opened.pop((e.get("chain_id"), e.get("subtask_index")), None)
            if start is not None:
                out["registration"].append((start, e["ts"]))
        elif e["event"] == "vote_start":
            opened[("vote",)] = e["ts"]
        elif e["event"] == "vote_done":
            start = opened.pop(("vote",), None)
            if start is not None:
                out["voting"].append((start, e["ts"]))
    return dict(out)


def _breakdown(task_id: str, events: list[dict]) -> OverheadBreakdown:
    t0 = next(e["ts"] for e in events if e["event"] == "task_start")
    t1 = max(e["ts"] for e in events if e["event"] == "task_done")
    intervals = labelled_intervals(events)
    cuts = {t0, t1}
    for spans in intervals.values():
        for a, b in spans:
            cuts.update(x for x in (a, b) if t0 <= x <= t1)
    cuts = sorted(cuts)
    totals = {label: 0.0 for label in ("engine",) + PHASES}
    for a, b in zip(cuts, cuts[1:]):
        mid = (a + b) / 2
        label = "dispatch"
        for name in _PRIORITY:
            if any(s <= mid <= e for s, e in intervals.get(name, ())):
                label = name
                break
        totals[label] += b - a
    total = t1 - t0
    engine = totals.pop("engine")
    orchestration = total - engine
    ratio = orchestration / total if total > 0 else 1.0
    return OverheadBreakdown(task_id, total, engine, orchestration, ratio, totals)


def overhead_report(events: Iterable[dict]) -> list[OverheadBreakdown]:
    by_task: dict[str, list[dict]] = defaultdict(list)
    for e in events:
        by_task[e["task_id"]].append(e)
    if not by_task:
        raise ReportError(["no events"])
    missing = []
    for task_id, evs in by_task.items():
        missing.extend(_check_complete(task_id, evs))
    if missing:
        raise ReportError(missing)
    return [_breakdown(t, evs) for t, evs in by_task.items()]
