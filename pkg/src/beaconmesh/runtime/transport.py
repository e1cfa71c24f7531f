"""Peer transports: in-memory (tests, simulation) and TCP.

Both carry the same length-prefixed frames. Ledger anti-entropy uses a
snapshot exchange: in memory it is a direct call, over the network it is
a POST to the peer gateway's ``/ledger/sync``.
"""

from __future__ import annotations

import asyncio
import logging
from typing import TYPE_CHECKING, Protocol

import httpx

from ..protocol import DecodeError, read_frame, unframe

if TYPE_CHECKING:
    from .node import Node

log = logging.getLogger(__name__)

Address = tuple[str, int]


class StartupError(Exception):
    pass


class Transport(Protocol):
    async def listen(self, node: "Node") -> None: ...

    async def send(self, address: Address, data: bytes) -> None: ...

    def peer_key(self, host: str, port: int, gateway_url: str) -> str | None: ...

    async def exchange_snapshot(self, peer: str, snapshot: dict) -> dict | None: ...

    async def close(self) -> None: ...


class InMemoryNetwork:
    """A set of nodes in one process exchanging real frame bytes."""

    def __init__(self, latency_ms: float = 0.0):
        self.nodes: dict[Address, "Node"] = {}
        self.dead: set[Address] = set()
        self.latency_ms = latency_ms
        self.frames_sent = 0
        self._pending: set[asyncio.Task] = set()

    def transport(self, address: Address) -> "InMemoryTransport":
        return InMemoryTransport(self, address)

    def kill(self, address: Address) -> None:
        self.dead.add(address)

    def revive(self, address: Address) -> None:
        self.dead.discard(address)

    def alive(self, address: Address) -> bool:
        return address in self.nodes and address not in self.dead

    async def deliver(self, src: Address, dst: Address, data: bytes) -> None:
        if not (self.alive(src) and self.alive(dst)):
            return
        self.frames_sent += 1
        body = unframe(data)
        node = self.nodes[dst]

        async def arrive():
            if self.latency_ms:
                await asyncio.sleep(self.latency_ms / 1000.0)
            if self.alive(dst):
                await node.receive(body)

        task = asyncio.get_running_loop().create_task(arrive())
        self._pending.add(task)
        task.add_done_callback(self._pending.discard)


class InMemoryTransport:
    def __init__(self, network: InMemoryNetwork, address: Address):
        self.network = network
        self.address = address

    async def listen(self, node: "Node") -> None:
        if self.address in self.network.nodes and self.network.alive(self.address):
            raise StartupError(f"address {self.address} already in use")
        self.network.nodes[self.address] = node
        self.network.dead.discard(self.address)

    async def send(self, address: Address, data: bytes) -> None:
        await self.network.deliver(self.address, address, data)

    def peer_key(self, host: str, port: int, gateway_url: str) -> str | None:
        return f"{host}:{port}"

    async def exchange_snapshot(self, peer: str, snapshot: dict) -> dict | None:
        host, _, port = peer.rpartition(":")
        dst = (host, int(port))
        if not (self.network.alive(self.address) and self.network.alive(dst)):
            return None
        return self.network.nodes[dst].accept_sync(snapshot)

    async def close(self) -> None:
        if self.network.nodes.get(self.address) is not None:
            del self.network.nodes[self.address]


class TcpTransport:
    """Persistent TCP connections carrying framed envelopes."""

    def __init__(self, listen: list[Address], connect_timeout: float = 3.0, http_timeout: float = 5.0):
        self.listen_addresses = listen
        self.connect_timeout = connect_timeout
        self.http_timeout = http_timeout
        self._servers: list[asyncio.base_events.Server] = []
        self._conns: dict[Address, asyncio.StreamWriter] = {}
        self._locks: dict[Address, asyncio.Lock] = {}
        self._readers: set[asyncio.Task] = set()
        self._http: httpx.AsyncClient | None = None

    async def listen(self, node: "Node") -> None:
        async def handle(reader: asyncio.StreamReader, writer: asyncio.StreamWriter):
            task = asyncio.current_task()
            if task is not None:
                self._readers.add(task)
            try:
                while True:
                    body = await read_frame(reader)
                    await node.receive(body)
            except (asyncio.IncompleteReadError, ConnectionError):
                pass
            except DecodeError as exc:
                node.audit_entry("bad_frame", detail=str(exc))
            finally:
                writer.close()
                if task is not None:
                    self._readers.discard(task)

        for host, port in self.listen_addresses:
            try:
                server = await asyncio.start_server(handle, host, port)
            except OSError as exc:
                await self.close()
                raise StartupError(f"cannot bind {host}:{port}: {exc}") from exc
            self._servers.append(server)
        self._http = httpx.AsyncClient(timeout=self.http_timeout)

    async def _writer(self, address: Address) -> asyncio.StreamWriter:
        w = self._conns.get(address)
        if w is not None and not w.is_closing():
            return w
        _, w = await asyncio.wait_for(asyncio.open_connection(*address), self.connect_timeout)
        self._conns[address] = w
        return w

    async def send(self, address: Address, data: bytes) -> None:
        lock = self._locks.setdefault(address, asyncio.Lock())
        async with lock:
            for attempt in range(2):
                try:
                    w = await self._writer(address)
                    w.write(data)
                    await w.drain()
                    return
                except (OSError, asyncio.TimeoutError) as exc:
                    self._conns.pop(address, None)
                    if attempt:
                        log.warning("dropping frame to %s:%s: %s", *address, exc)

    def peer_key(self, host: str, port: int, gateway_url: str) -> str | None:
        return gateway_url or None

    async def exchange_snapshot(self, peer: str, snapshot: dict) -> dict | None:
        if self._http is None:
            return None
        try:
            resp = await self._http.post(f"{peer.rstrip('/')}/ledger/sync", json={"snapshot": snapshot})
            resp.raise_for_status()
            return resp.json()["snapshot"]
        except (httpx.HTTPError, KeyError, ValueError) as exc:
            log.debug("sync with %s failed: %s", peer, exc)
            return None

    async def close(self) -> None:
        for server in self._servers:
            server.close()
        for server in self._servers:
            await server.wait_closed()
        self._servers.clear()
        for w in self._conns.values():
            w.close()
        self._conns.clear()
        for t in list(self._readers):
            t.cancel()
        if self._http is not None:
            await self._http.aclose()
            self._http = None
