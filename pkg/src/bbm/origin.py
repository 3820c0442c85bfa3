"""Origin retrieval: one range request per segment, written through to the cache.

Fetch jobs are polled once per clock tick by the engine. Concurrent misses
for the same video join the running job instead of starting a second
origin transfer.
"""
from __future__ import annotations

import enum
import logging
import random
import time
from concurrent.futures import Future, ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional, Protocol, Sequence, Union

from .cache import AlreadyComplete, CacheEntry, CacheStore, FillHandle, InsufficientBudget
from .clock import VirtualClock
from .media import ContainerError, FormatVariantKey, decode_header, HEADER_SIZE
from .protocol import OriginResponse, RangeRequest, SizeRequest
from .registry import NodeRecord, ProbeTimeout, select_best_node

log = logging.getLogger(__name__)

DEFAULT_FETCH_TIMEOUT_S = 5.0

OriginRequest = Union[RangeRequest, SizeRequest]
Listener = Callable[..., None]


class FetchError(Exception):
    pass


class NodeTimeout(FetchError):
    pass


class RangeRejected(FetchError):
    pass


class ShortRead(FetchError):
    pass


class PendingResponse(Protocol):
    issued_at: int

    def done(self) -> bool: ...

    def response(self) -> OriginResponse: ...


class OriginTransport(Protocol):
    def send(self, node: NodeRecord, request: OriginRequest) -> PendingResponse: ...


class JobState(enum.Enum):
    RUNNING = "running"
    DONE = "done"
    FAILED = "failed"


def segment_ranges(video_id: str, total_bytes: int, segment_size: int) -> list[RangeRequest]:
    return [RangeRequest(video_id, start, min(start + segment_size, total_bytes) - 1)
            for start in range(0, total_bytes, segment_size)]


@dataclass
class FetchJob:
    """Retrieves one video from the best candidate node into a cache store.

    Phases: SIZE probe, first segment (its header names the cache variant),
    then the remaining absent segments in ascending order. A node failure
    moves the job to the next-best remaining candidate up to ``max_retries``
    times, re-requesting only segments still missing.
    """

    video_id: str
    node: NodeRecord
    candidates: list[NodeRecord]
    store: CacheStore
    transport: OriginTransport
    clock: VirtualClock
    rng: random.Random
    timeout_ticks: int
    pipeline_depth: int = 1
    max_retries: int = 1
    shared: bool = True
    listener: Listener = lambda kind, **fields: None

    state: JobState = JobState.RUNNING
    error: Optional[FetchError] = None
    total_bytes: Optional[int] = None
    variant: Optional[FormatVariantKey] = None
    handle: Optional[FillHandle] = None
    next_segment: int = 0
    waiter_count: int = 1
    origin_bytes: int = 0
    ranges: list[tuple[int, int]] = field(default_factory=list)
    tried: list[str] = field(default_factory=list)
    _pending: list[tuple[OriginRequest, PendingResponse]] = field(default_factory=list)
    _header_segment: Optional[bytes] = None
    _existing: Optional[CacheEntry] = None

    @property
    def entry(self) -> Optional[CacheEntry]:
        if self.handle is not None:
            return self.handle.entry
        return self._existing

    @property
    def running(self) -> bool:
        return self.state is JobState.RUNNING

    def poll(self) -> None:
        if not self.running:
            return
        try:
            self._collect()
            if self.running:
                self._issue()
        except FetchError as exc:
            self._fail_over(exc)

    # request issue / response handling

    def _issue(self) -> None:
        while len(self._pending) < self.pipeline_depth:
            request = self._next_request()
            if request is None:
                return
            self._send(request)

    def _next_request(self) -> Optional[OriginRequest]:
        in_flight = {r.byte_start for r, _ in self._pending if isinstance(r, RangeRequest)}
        if self.total_bytes is None:
            return None if self._pending else SizeRequest(self.video_id)
        if self.handle is None:
            if self._pending:
                return None
            return RangeRequest(self.video_id, 0, min(self.store.segment_size, self.total_bytes) - 1)
        entry = self.handle.entry
        for index in range(self.next_segment, entry.total_segments):
            start = index * entry.segment_size
            if not entry.present[index] and start not in in_flight:
                return RangeRequest(self.video_id, start, start + entry.segment_length(index) - 1)
        return None

    def _send(self, request: OriginRequest) -> None:
        if isinstance(request, RangeRequest):
            self.ranges.append((request.byte_start, request.byte_end_inclusive))
            self.listener("range_request", video_id=self.video_id, node=self.node.node_id,
                          start=request.byte_start, end=request.byte_end_inclusive)
        else:
            self.listener("size_request", video_id=self.video_id, node=self.node.node_id)
        self._pending.append((request, self.transport.send(self.node, request)))

    def _collect(self) -> None:
        while self._pending:
            request, pending = self._pending[0]
            if not pending.done():
                if self.clock.now() - pending.issued_at >= self.timeout_ticks:
                    raise NodeTimeout(f"{self.node.node_id} gave no response to {request.to_line()!r}")
                return
            self._pending.pop(0)
            self._handle(request, pending.response())
            if not self.running:
                return

    def _handle(self, request: OriginRequest, resp: OriginResponse) -> None:
        if isinstance(request, SizeRequest):
            if resp.status != 200 or resp.total_bytes is None:
                raise RangeRejected(f"{self.node.node_id} SIZE {self.video_id} -> {resp.status}")
            self.total_bytes = resp.total_bytes
            if self.total_bytes < HEADER_SIZE:
                raise ShortRead(f"{self.video_id} is only {self.total_bytes} bytes")
            self._resume_partial()
            return
        if resp.status != 206:
            raise RangeRejected(f"{self.node.node_id} {request.to_line()} -> {resp.status}")
        if len(resp.body) != request.length:
            raise ShortRead(f"{request.to_line()} returned {len(resp.body)} of {request.length} bytes")
        self.origin_bytes += len(resp.body)
        self.listener("range_response", video_id=self.video_id, node=self.node.node_id,
                      start=request.byte_start, bytes=len(resp.body))
        index = request.byte_start // self.store.segment_size
        if self.handle is None:
            self._open_fill(resp.body)
            if self.handle is None:
                return
        self.store.write_segment(self.handle, index, resp.body)
        entry = self.handle.entry
        while self.next_segment < entry.total_segments and entry.present[self.next_segment]:
            self.next_segment += 1
        self.listener("segment_cached", video_id=self.video_id, index=index)
        if entry.complete:
            self._finish()

    def _resume_partial(self) -> None:
        # a failed earlier fill of the same object leaves a restartable entry
        for entry in self.store.variants(self.video_id):
            if not entry.complete and not entry.filler_active and entry.total_bytes == self.total_bytes:
                self.variant = entry.variant
                self.handle = self.store.begin_fill(self.video_id, entry.variant, self.total_bytes)
                self.next_segment = entry.contiguous_prefix()
                self.listener("fill_resumed", video_id=self.video_id,
                              segments_present=entry.segments_present)
                return

    def _open_fill(self, first_segment: bytes) -> None:
        try:
            self.variant, _ = decode_header(first_segment)
        except ContainerError as exc:
            raise ShortRead(f"{self.video_id}: bad container header ({exc})") from exc
        try:
            self.handle = self.store.begin_fill(self.video_id, self.variant, self.total_bytes)
        except AlreadyComplete:
            # the lookup could not use this copy for its profile, but it is whole; reuse it
            self._existing = self.store.peek(self.video_id, self.variant)
            self.state = JobState.DONE
            self.listener("fetch_done", video_id=self.video_id, node=self.node.node_id,
                          origin_bytes=self.origin_bytes, reused=True)
        except InsufficientBudget as exc:
            # serve pass-through from a private store rather than refusing the client
            self.listener("cache_bypass", video_id=self.video_id, reason=str(exc))
            self.store = CacheStore(None, self.store.segment_size, clock=self.store.clock)
            self.shared = False
            self.handle = self.store.begin_fill(self.video_id, self.variant, self.total_bytes)

    def _finish(self) -> None:
        self.store.finish_fill(self.handle)
        self.state = JobState.DONE
        self.listener("fetch_done", video_id=self.video_id, node=self.node.node_id,
                      origin_bytes=self.origin_bytes)

    def _fail_over(self, exc: FetchError) -> None:
        self.tried.append(self.node.node_id)
        self._pending.clear()
        remaining = [n for n in self.candidates if n.node_id not in self.tried]
        if len(self.tried) <= self.max_retries and remaining:
            previous = self.node
            self.node = select_best_node(remaining, self.rng)
            self.listener("failover", video_id=self.video_id, from_node=previous.node_id,
                          to_node=self.node.node_id, reason=type(exc).__name__)
            self._issue()
            return
        self.state = JobState.FAILED
        self.error = exc
        if self.handle is not None:
            self.store.abort_fill(self.handle)
        self.listener("fetch_failed", video_id=self.video_id, node=self.node.node_id,
                      reason=type(exc).__name__)


class JobTable:
    """Per-video single-flight table of running fetch jobs."""

    def __init__(self, make_job: Callable[[str, NodeRecord, list[NodeRecord]], FetchJob]):
        self.make_job = make_job
        self.running: dict[str, FetchJob] = {}
        self.started = 0
        self.joined = 0

    def fetch_or_join(self, video_id: str, candidates: Sequence[NodeRecord],
                      rng: random.Random, coalesce: bool = True) -> tuple[FetchJob, bool]:
        """Return ``(job, joined)``; ``joined`` is True when an existing transfer was reused."""
        if not candidates:
            raise ValueError("fetch_or_join needs at least one candidate node")
        job = self.running.get(video_id) if coalesce else None
        if job is not None and job.running:
            job.waiter_count += 1
            self.joined += 1
            return job, True
        node = select_best_node(candidates, rng)
        job = self.make_job(video_id, node, list(candidates))
        self.started += 1
        # uncoalesced jobs get a private slot so they are still polled
        self.running[video_id if coalesce else f"{video_id}#{self.started}"] = job
        return job, False

    def poll(self) -> list[FetchJob]:
        """Advance every job; returns jobs that finished this round."""
        finished = []
        for slot, job in list(self.running.items()):
            job.poll()
            if not job.running:
                del self.running[slot]
                finished.append(job)
        return finished


# simulated origin nodes

@dataclass
class SimPending:
    issued_at: int
    ready_at: Optional[int]
    reply: OriginResponse
    clock: VirtualClock

    def done(self) -> bool:
        return self.ready_at is not None and self.clock.now() >= self.ready_at

    def response(self) -> OriginResponse:
        return self.reply


@dataclass
class SimNode:
    """Origin node model: fixed one-way latency, FIFO service at a per-tick byte budget."""

    node_id: str
    latency_ticks: int
    bytes_per_tick: int
    objects: dict[str, bytes] = field(default_factory=dict)
    fail_after_segments: Optional[int] = None
    busy_until: int = 0
    segments_served: int = 0
    bytes_served: int = 0


class SimNetwork:
    """In-process transport to simulated nodes speaking the origin line protocol."""

    def __init__(self, clock: VirtualClock):
        self.clock = clock
        self.nodes: dict[str, SimNode] = {}
        self.requests: list[tuple[int, str, str]] = []

    def add(self, node: SimNode) -> SimNode:
        self.nodes[node.node_id] = node
        return node

    def send(self, record: NodeRecord, request: OriginRequest) -> SimPending:
        from .protocol import serve_origin_request

        now = self.clock.now()
        node = self.nodes[record.node_id]
        line = request.to_line()
        self.requests.append((now, node.node_id, line))
        reply = OriginResponse.decode(serve_origin_request(line, node.objects).encode())
        if isinstance(request, RangeRequest) and reply.status == 206:
            if node.fail_after_segments is not None and node.segments_served >= node.fail_after_segments:
                return SimPending(now, None, reply, self.clock)
            node.segments_served += 1
            node.bytes_served += len(reply.body)
        arrive = now + node.latency_ticks
        start = max(arrive, node.busy_until)
        finish = start + -(-len(reply.body) // node.bytes_per_tick)
        node.busy_until = finish
        ready = max(finish + node.latency_ticks, now + 1)
        return SimPending(now, ready, reply, self.clock)


# live HTTP origins

@dataclass
class FuturePending:
    issued_at: int
    future: Future

    def done(self) -> bool:
        return self.future.done()

    def response(self) -> OriginResponse:
        try:
            return self.future.result()
        except Exception as exc:  # transport error behaves like a dead node
            raise NodeTimeout(str(exc)) from exc


class HttpTransport:
    """Maps origin requests 1:1 onto HTTP: Range GET for segments, HEAD for size.

    ``client_for`` returns an ``httpx.Client`` for a node; it defaults to one
    shared client addressing ``node.address`` as the base URL.
    """

    def __init__(self, clock: VirtualClock, client_for=None, timeout_s: float = DEFAULT_FETCH_TIMEOUT_S,
                 workers: int = 8):
        import httpx

        self.clock = clock
        self._default = httpx.Client(timeout=timeout_s)
        self.client_for = client_for or (lambda node: self._default)
        self.pool = ThreadPoolExecutor(max_workers=workers, thread_name_prefix="origin")

    def _url(self, node: NodeRecord, video_id: str) -> str:
        return f"{node.address.rstrip('/')}/videos/{video_id}"

    def _do(self, node: NodeRecord, request: OriginRequest) -> OriginResponse:
        client = self.client_for(node)
        url = self._url(node, request.video_id)
        if isinstance(request, SizeRequest):
            r = client.head(url)
            if r.status_code != 200:
                return OriginResponse(r.status_code)
            return OriginResponse(200, total_bytes=int(r.headers["content-length"]))
        r = client.get(url, headers={"Range": request.http_header()})
        if r.status_code == 206:
            return OriginResponse(206, r.content)
        return OriginResponse(r.status_code)

    def send(self, node: NodeRecord, request: OriginRequest) -> FuturePending:
        return FuturePending(self.clock.now(), self.pool.submit(self._do, node, request))

    def probe(self, node: NodeRecord) -> int:
        """Round-trip time in ms of a HEAD to the node's health endpoint."""
        start = time.perf_counter()
        try:
            r = self.client_for(node).head(f"{node.address.rstrip('/')}/health")
            r.raise_for_status()
        except Exception as exc:
            raise ProbeTimeout(f"{node.node_id}: {exc}") from exc
        return max(0, round((time.perf_counter() - start) * 1000))

    def close(self) -> None:
        self.pool.shutdown(wait=False)
        self._default.close()
