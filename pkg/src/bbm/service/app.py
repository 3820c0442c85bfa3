"""HTTP front end for the gateway engine.

The engine is single-threaded: request handlers and the tick loop all run on
the server's event loop, so cache, registry and job-table mutations are
serialized without locks being contended.
"""
from __future__ import annotations

import asyncio
import contextlib
import json
import logging
import time
from typing import AsyncIterator, Callable, Optional

from fastapi import FastAPI, HTTPException, Request
from fastapi.responses import PlainTextResponse, StreamingResponse
from pydantic import ValidationError

from ..clock import VirtualClock
from ..orchestrator import Manager, ProfileUnknown
from ..origin import HttpTransport, OriginTransport
from ..protocol import (PlayCommand, ProtocolError, StatsCommand, STATUS_BAD_REQUEST,
                        parse_client_request)
from ..registry import NodeRegistry, ProbeTimeout, StaleMessage, TelemetryMsg, UnknownNode
from ..streamer import ClientDisconnected
from .config import ServiceConfig
from .schemas import (CacheEntryOut, MetricsOut, NodeOut, PlayRequest, TelemetryIn,
                      TelemetryResult)

log = logging.getLogger(__name__)


def wall_ms() -> int:
    return int(time.time() * 1000)


class QueueSink:
    """Client sink feeding an asyncio queue drained by a streaming response."""

    def __init__(self) -> None:
        self.queue: asyncio.Queue[Optional[bytes]] = asyncio.Queue()
        self.closed = False

    def write(self, data: bytes) -> None:
        if self.closed:
            raise ClientDisconnected("client went away")
        self.queue.put_nowait(data)

    def close(self) -> None:
        if not self.closed:
            self.closed = True
            self.queue.put_nowait(None)

    async def drain(self) -> AsyncIterator[bytes]:
        try:
            while True:
                chunk = await self.queue.get()
                if chunk is None:
                    return
                yield chunk
        finally:
            self.closed = True


class Gateway:
    def __init__(self, config: ServiceConfig, transport: Optional[OriginTransport] = None,
                 clock: Optional[VirtualClock] = None, now_ms: Callable[[], int] = wall_ms):
        self.config = config
        self.clock = clock or VirtualClock(config.tick_ms)
        self.transport = transport or HttpTransport(self.clock, timeout_s=config.fetch_timeout_s)
        prober = getattr(self.transport, "probe", None)
        self.registry = NodeRegistry(int(config.telemetry_staleness_s * 1000), clock=now_ms,
                                     **({"prober": prober} if prober else {}))
        for node in config.nodes():
            record = node.record()
            record.last_telemetry = now_ms()
            try:
                self.registry.register(record)
            except ProbeTimeout:
                log.warning("node %s did not answer its route probe", record.node_id)
        self.manager = Manager(config.manager_config(), self.registry, self.transport,
                               clock=self.clock, profiles=config.profiles())
        self._task: Optional[asyncio.Task] = None

    async def run_ticker(self) -> None:
        loop = asyncio.get_running_loop()
        tick_s = self.clock.tick_ms / 1000
        start, base = loop.time(), self.clock.now()
        while True:
            await asyncio.sleep(tick_s)
            target = base + int((loop.time() - start) / tick_s)
            for _ in range(min(100, target - self.clock.now())):
                self.manager.step()

    async def start(self) -> None:
        self._task = asyncio.create_task(self.run_ticker())

    async def stop(self) -> None:
        if self._task is not None:
            self._task.cancel()
            with contextlib.suppress(asyncio.CancelledError):
                await self._task
        close = getattr(self.transport, "close", None)
        if close is not None:
            close()

    def play(self, video_id: str, profile_id: str, link_kbps: Optional[float] = None) -> QueueSink:
        sink = QueueSink()
        self.manager.submit(video_id, profile_id, sink, link_kbps=link_kbps)
        return sink


def create_app(config: Optional[ServiceConfig] = None,
               transport: Optional[OriginTransport] = None, **gateway_kwargs) -> FastAPI:
    config = config or ServiceConfig()

    @contextlib.asynccontextmanager
    async def lifespan(app: FastAPI):
        gateway = Gateway(config, transport, **gateway_kwargs)
        app.state.gateway = gateway
        await gateway.start()
        try:
            yield
        finally:
            await gateway.stop()

    app = FastAPI(title="Billboard Manager", lifespan=lifespan)

    def gw(request: Request) -> Gateway:
        return request.app.state.gateway

    def stream(sink: QueueSink) -> StreamingResponse:
        return StreamingResponse(sink.drain(), media_type="application/octet-stream")

    @app.get("/health")
    @app.head("/health")
    def health():
        return {"ok": True}

    @app.post("/play")
    async def play(body: PlayRequest, request: Request):
        try:
            sink = gw(request).play(body.video_id, body.profile_id, body.link_kbps)
        except ProfileUnknown:
            raise HTTPException(400, f"unknown profile {body.profile_id!r}") from None
        return stream(sink)

    @app.post("/command")
    async def command(request: Request):
        line = (await request.body()).decode("utf-8", "replace")
        try:
            cmd = parse_client_request(line)
        except ProtocolError:
            return PlainTextResponse(STATUS_BAD_REQUEST + "\n", status_code=400)
        if isinstance(cmd, StatsCommand):
            return stats(request)
        assert isinstance(cmd, PlayCommand)
        try:
            sink = gw(request).play(cmd.video_id, cmd.profile_id)
        except ProfileUnknown:
            return PlainTextResponse(STATUS_BAD_REQUEST + "\n", status_code=400)
        return stream(sink)

    @app.get("/stats", response_model=MetricsOut)
    def stats(request: Request):
        return MetricsOut.model_validate(gw(request).manager.snapshot_metrics().to_dict())

    @app.get("/cache", response_model=list[CacheEntryOut])
    def cache(request: Request):
        return gw(request).manager.cache_dump()

    @app.get("/nodes", response_model=list[NodeOut])
    def nodes(request: Request):
        return gw(request).registry.snapshot()

    @app.post("/telemetry", response_model=TelemetryResult)
    async def telemetry(request: Request):
        """Accepts one JSON object, a JSON array, or newline-delimited JSON."""
        raw = (await request.body()).decode("utf-8")
        registry = gw(request).registry
        text = raw.strip()
        try:
            if text.startswith("["):
                items = [TelemetryIn.model_validate(o) for o in json.loads(text)]
            else:
                items = [TelemetryIn.model_validate_json(line)
                         for line in text.splitlines() if line.strip()]
        except ValidationError as exc:
            raise HTTPException(422, exc.errors(include_url=False)) from None
        except ValueError as exc:
            raise HTTPException(422, f"bad telemetry body: {exc}") from None
        result = TelemetryResult(applied=0, stale=0)
        for item in items:
            msg = TelemetryMsg(item.node_id, item.ts, item.capacity_kbps, item.storage_bytes,
                               tuple(item.add_videos), tuple(item.remove_videos))
            try:
                registry.apply_telemetry(msg)
                result.applied += 1
            except StaleMessage:
                result.stale += 1
            except UnknownNode:
                result.unknown.append(item.node_id)
        return result

    return app
