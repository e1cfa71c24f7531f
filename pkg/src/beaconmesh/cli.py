"""Command-line client. Exit codes: 0 success, 2 invalid input, 3 runtime failure."""

from __future__ import annotations

import argparse
import asyncio
import json
import os
import sys
from pathlib import Path

import httpx
from pydantic import ValidationError as ConfigError

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 2, 3
DEFAULT_GATEWAY = "http://127.0.0.1:8700"


class CliFailure(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


def _print(doc) -> None:
    print(json.dumps(doc, indent=2, sort_keys=True))


def _gateway(args) -> str:
    return (args.gateway or os.environ.get("BEACONMESH_GATEWAY") or DEFAULT_GATEWAY).rstrip("/")


def _http(method: str, url: str, timeout: float, **kw) -> dict:
    try:
        resp = httpx.request(method, url, timeout=timeout, **kw)
    except httpx.HTTPError as exc:
        raise CliFailure(f"cannot reach gateway {url}: {exc}", EXIT_RUNTIME) from None
    try:
        body = resp.json()
    except ValueError:
        body = {"detail": resp.text}
    if resp.status_code == 422:
        raise CliFailure(json.dumps(body), EXIT_INVALID)
    if resp.status_code >= 400:
        raise CliFailure(json.dumps(body), EXIT_RUNTIME)
    return body


# ------------------------------------------------------------- handlers


def cmd_node_start(args) -> int:
    from .runtime.config import NodeConfig
    from .runtime.transport import StartupError
    from .service.daemon import serve

    path = Path(args.config)
    try:
        config = NodeConfig.load(path)
    except FileNotFoundError:
        raise CliFailure(f"config file {path} not found", EXIT_INVALID) from None
    except ConfigError as exc:
        raise CliFailure(f"invalid config: {exc}", EXIT_INVALID) from None
    try:
        asyncio.run(serve(config, base_dir=path.parent))
    except StartupError as exc:
        raise CliFailure(f"startup failed: {exc}", EXIT_RUNTIME) from None
    except KeyboardInterrupt:
        pass
    return EXIT_OK


def cmd_task_submit(args) -> int:
    if args.chains < 1:
        raise CliFailure("--chains must be at least 1", EXIT_INVALID)
    body = {"text": args.text, "chains": args.chains}
    if args.option:
        body["options"] = args.option
    _print(_http("POST", f"{_gateway(args)}/tasks", args.timeout, json=body))
    return EXIT_OK


def cmd_ledger_show(args) -> int:
    if args.ledger_log:
        from .ledger import Ledger, LedgerError
        from .matching import ValidationError

        path = Path(args.ledger_log)
        if not path.exists():
            raise CliFailure(f"ledger log {path} not found", EXIT_INVALID)
        try:
            ledger = Ledger.replay(path, dim=args.dim)
        except (LedgerError, ValidationError, ValueError, KeyError) as exc:
            raise CliFailure(f"cannot replay ledger log: {exc}", EXIT_INVALID) from None
        ledger._log_path = None  # read-only view
        now = ledger.clock()
        _print({
            "version": ledger.version,
            "agents": [
                {"agent_id": r.agent_id, "host": r.host, "port": r.port, "roles": sorted(r.roles),
                 "capability_vector": list(r.capability_vector), "status": r.status(now, ledger.ttl_ms),
                 "last_seen": r.last_seen, "contributions": r.contributions}
                for r in ledger.snapshot().records.values()
            ],
        })
        return EXIT_OK
    _print(_http("GET", f"{_gateway(args)}/ledger", args.timeout))
    return EXIT_OK


def cmd_report_overhead(args) -> int:
    from .events import load_events
    from .runtime.overhead import ReportError, overhead_report

    path = Path(args.log)
    try:
        events = load_events(path)
    except FileNotFoundError:
        raise CliFailure(f"event log {path} not found", EXIT_INVALID) from None
    except ValueError as exc:
        raise CliFailure(f"event log is not JSON lines: {exc}", EXIT_INVALID) from None
    try:
        report = overhead_report(events)
    except ReportError as exc:
        raise CliFailure(str(exc), EXIT_INVALID) from None
    ratios = [b.ratio for b in report]
    _print({
        "tasks": [b.to_json() for b in report],
        "max_ratio": max(ratios),
        "mean_ratio": sum(ratios) / len(ratios),
    })
    return EXIT_OK


def cmd_bench_run(args) -> int:
    from .bench import BenchError, run_bench

    try:
        result = run_bench(args.corpus, args.mode, args.chains, args.seed, args.limit)
    except BenchError as exc:
        raise CliFailure(str(exc), EXIT_INVALID) from None
    _print(result.to_json())
    return EXIT_OK


def cmd_bench_generate(args) -> int:
    from .bench import generate_corpus

    out = generate_corpus(args.out, args.tasks, args.agents, args.seed)
    _print({"corpus": str(out), "tasks": args.tasks, "agents": args.agents, "seed": args.seed})
    return EXIT_OK


# --------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="beaconmesh", description="Peer-to-peer multi-agent task runtime.")
    p.add_argument("-v", "--verbose", action="store_true")
    top = p.add_subparsers(dest="group", required=True)

    node = top.add_parser("node").add_subparsers(dest="action", required=True)
    s = node.add_parser("start", help="run a node daemon")
    s.add_argument("--config", required=True)
    s.set_defaults(func=cmd_node_start)

    task = top.add_parser("task").add_subparsers(dest="action", required=True)
    s = task.add_parser("submit", help="submit a task through a node gateway")
    s.add_argument("--text", required=True)
    s.add_argument("--chains", type=int, default=3)
    s.add_argument("--option", action="append", help="answer option (repeatable)")
    s.add_argument("--gateway")
    s.add_argument("--timeout", type=float, default=150.0)
    s.set_defaults(func=cmd_task_submit)

    ledger = top.add_parser("ledger").add_subparsers(dest="action", required=True)
    s = ledger.add_parser("show", help="print the ledger of a node")
    s.add_argument("--gateway")
    s.add_argument("--ledger-log", help="replay a ledger log file instead of asking a gateway")
    s.add_argument("--dim", type=int, default=8)
    s.add_argument("--timeout", type=float, default=10.0)
    s.set_defaults(func=cmd_ledger_show)

    report = top.add_parser("report").add_subparsers(dest="action", required=True)
    s = report.add_parser("overhead", help="orchestration overhead from an event log")
    s.add_argument("--log", required=True)
    s.set_defaults(func=cmd_report_overhead)

    bench = top.add_parser("bench").add_subparsers(dest="action", required=True)
    s = bench.add_parser("run", help="run a synthetic ablation")
    s.add_argument("--corpus", required=True)
    s.add_argument("--mode", choices=["score", "random"], default="score")
    s.add_argument("--chains", type=int, choices=[1, 3], default=3)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--limit", type=int)
    s.set_defaults(func=cmd_bench_run)
    s = bench.add_parser("generate", help="write a synthetic corpus")
    s.add_argument("--out", required=True)
    s.add_argument("--tasks", type=int, default=500)
    s.add_argument("--agents", type=int, default=8)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_bench_generate)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.verbose:
        import logging

        logging.basicConfig(level=logging.INFO)
    try:
        return args.func(args)
    except CliFailure as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except Exception as exc:  # anything unexpected is a runtime failure
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
