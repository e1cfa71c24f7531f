"""In-process cluster over the in-memory transport, for tests and simulation."""

from __future__ import annotations

import hashlib
from pathlib import Path
from typing import Callable, Iterable

from ..events import EventLog
from ..ledger import now_ms
from ..protocol import KeyPair
from .config import NodeConfig
from .node import Node
from .transport import InMemoryNetwork


def seeded_keys(name: str) -> KeyPair:
    return KeyPair.from_seed(hashlib.sha256(name.encode("utf-8")).digest())


class InProcessCluster:
    """N nodes in one event loop exchanging real frame bytes.

    Background heartbeat and sync loops are off by default; tests drive
    anti-entropy explicitly through :meth:`converge` so that one call
    equals one sync interval.
    """

    def __init__(self, configs: Iterable[NodeConfig], engines: dict[str, object] | None = None,
                 latency_ms: float = 0.0, base_dir: Path | None = None, background_loops: bool = False,
                 clock: Callable[[], int] = now_ms):
        configs = list(configs)
        if configs:
            # seedless nodes bootstrap off the first node
            boot = f"{configs[0].host}:{configs[0].port}"
            configs = [c if c.seeds else c.model_copy(update={"seeds": [boot]}) for c in configs]
        self.configs = configs
        self.engines = engines or {}
        self.network = InMemoryNetwork(latency_ms)
        self.base_dir = base_dir
        self.background_loops = background_loops
        self.clock = clock
        self.nodes: dict[str, Node] = {}

    async def start(self) -> "InProcessCluster":
        for cfg in self.configs:
            node = Node(cfg, self.network.transport((cfg.host, cfg.port)), engine=self.engines.get(cfg.name),
                        keys=seeded_keys(cfg.name), events=EventLog(cfg.event_log), base_dir=self.base_dir, clock=self.clock)
            await node.start(background_loops=self.background_loops)
            self.nodes[cfg.name] = node
        await self.converge(len(self.nodes))
        return self

    async def converge(self, rounds: int = 1) -> None:
        for _ in range(rounds):
            for node in list(self.nodes.values()):
                if self.network.alive(node.address):
                    await node.sync_once()

    def converged(self) -> bool:
        snaps = [n.ledger.snapshot() for n in self.live_nodes()]
        return all(s == snaps[0] for s in snaps[1:])

    def live_nodes(self) -> list[Node]:
        return [n for n in self.nodes.values() if self.network.alive(n.address)]

    def kill(self, name: str) -> None:
        """Cut a node off the network without telling anyone (a crash)."""
        self.network.kill(self.nodes[name].address)

    def __getitem__(self, name: str) -> Node:
        return self.nodes[name]

    async def shutdown(self) -> None:
        for node in self.nodes.values():
            await node.shutdown()
        self.nodes.clear()

    async def __aenter__(self) -> "InProcessCluster":
        return await self.start()

    async def __aexit__(self, *exc) -> None:
        await self.shutdown()
