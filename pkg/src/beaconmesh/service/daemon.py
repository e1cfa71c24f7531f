"""Run a node and its HTTP gateway in one event loop until interrupted."""

from __future__ import annotations

import asyncio
import logging
import signal
from pathlib import Path

import uvicorn

from ..runtime.config import NodeConfig
from ..runtime.node import start_node
from .app import create_app

log = logging.getLogger(__name__)


async def serve(config: NodeConfig, base_dir: Path | None = None) -> None:
    node = await start_node(config, base_dir=base_dir)
    stop = asyncio.Event()
    loop = asyncio.get_running_loop()
    for sig in (signal.SIGINT, signal.SIGTERM):
        try:
            loop.add_signal_handler(sig, stop.set)
        except (NotImplementedError, RuntimeError):
            pass
    server = None
    tasks = [asyncio.create_task(stop.wait())]
    if config.gateway_port:
        server = uvicorn.Server(uvicorn.Config(create_app(node), host=config.host, port=config.gateway_port,
                                               log_level="warning", lifespan="off"))
        # the node owns signal handling
        server.install_signal_handlers = lambda: None
        tasks.append(asyncio.create_task(server.serve()))
    log.info("node %s (%s) listening on %s:%s", config.name, node.agent_id[:12], config.host, config.port)
    try:
        await asyncio.wait(tasks, return_when=asyncio.FIRST_COMPLETED)
    finally:
        if server is not None:
            server.should_exit = True
        await asyncio.gather(*tasks[1:], return_exceptions=True)
        for t in tasks:
            t.cancel()
        await node.shutdown()
