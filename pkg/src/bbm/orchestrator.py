"""The gateway's per-request state machine and the engine that drives it.

Every client request becomes a :class:`Session` that walks a fixed state
graph: index lookup, then either the cached copy or host lookup, node
selection and fetch, then one shared tail of format check, optional
transcode and paced streaming. The engine is advanced one tick at a time by
:meth:`Manager.step`, from the simulator or from the live service's ticker.
"""
from __future__ import annotations

import enum
import itertools
import logging
import random
import statistics
from dataclasses import asdict, dataclass, field
from typing import Optional

from .cache import (AlreadyComplete, CacheEntry, CacheStore, DEFAULT_SEGMENT_SIZE,
                    FillInProgress, InsufficientBudget)
from .clock import DEFAULT_TICK_MS, VirtualClock
from .events import EventLog, NullLog
from .media import (PRESETS, DeviceProfile, UpscaleRequested, can_transcode, decode_header,
                    transcode_container, variant_matches)
from .origin import FetchJob, JobState, JobTable, OriginTransport
from .protocol import STATUS_FETCH_FAILED, STATUS_FORMAT_UNSUPPORTED, STATUS_NOT_AVAILABLE
from .registry import NodeRecord, NodeRegistry
from .streamer import (ClientDisconnected, ClientSink, SourceFailed, StreamConfig, StreamRunner,
                       plan_stream)

log = logging.getLogger(__name__)


class State(enum.Enum):
    RECEIVED = "Received"
    INDEX_LOOKUP = "IndexLookup"
    CACHE_HIT = "CacheHit"
    CACHE_MISS = "CacheMiss"
    HOST_LOOKUP = "HostLookup"
    NOT_FOUND = "NotFound"
    NODE_SELECTED = "NodeSelected"
    FETCHING = "Fetching"
    FORMAT_CHECK = "FormatCheck"
    TRANSCODING = "Transcoding"
    READY = "Ready"
    STREAMING = "Streaming"
    DONE = "Done"
    FAILED = "Failed"


S = State
TRANSITIONS: dict[State, frozenset[State]] = {
    S.RECEIVED: frozenset({S.INDEX_LOOKUP}),
    S.INDEX_LOOKUP: frozenset({S.CACHE_HIT, S.CACHE_MISS}),
    S.CACHE_HIT: frozenset({S.FORMAT_CHECK}),
    S.CACHE_MISS: frozenset({S.HOST_LOOKUP}),
    S.HOST_LOOKUP: frozenset({S.NOT_FOUND, S.NODE_SELECTED}),
    S.NODE_SELECTED: frozenset({S.FETCHING}),
    S.FETCHING: frozenset({S.FORMAT_CHECK, S.FAILED}),
    S.FORMAT_CHECK: frozenset({S.TRANSCODING, S.READY}),
    S.TRANSCODING: frozenset({S.READY, S.FAILED}),
    S.READY: frozenset({S.STREAMING}),
    S.STREAMING: frozenset({S.DONE, S.FAILED}),
}
TERMINAL = frozenset({S.DONE, S.FAILED, S.NOT_FOUND})


def is_valid_path(states: list[State]) -> bool:
    """True when ``states`` starts at Received, follows the graph and ends terminal."""
    if not states or states[0] is not S.RECEIVED or states[-1] not in TERMINAL:
        return False
    return all(b in TRANSITIONS.get(a, ()) for a, b in zip(states, states[1:]))


class ProfileUnknown(KeyError):
    pass


class InvalidTransition(RuntimeError):
    pass


@dataclass
class ManagerConfig:
    cache_budget_bytes: Optional[int] = None
    segment_size_bytes: int = DEFAULT_SEGMENT_SIZE
    prefetch_seconds: float = 2.0
    telemetry_staleness_s: float = 15.0
    fetch_timeout_s: float = 5.0
    rng_seed: int = 0
    tick_ms: int = DEFAULT_TICK_MS
    cache_enabled: bool = True
    pace_cap_kbps: Optional[float] = None
    burst: bool = False
    pipeline_depth: int = 1
    max_retries: int = 1
    client_link_kbps: float = 50_000
    cache_dir: Optional[str] = None


def _summary(values: list[int]) -> dict:
    if not values:
        return {"count": 0, "mean": None, "median": None, "max": None}
    return {"count": len(values), "mean": statistics.fmean(values),
            "median": statistics.median(values), "max": max(values)}


@dataclass
class Metrics:
    requests: int = 0
    cache_hits: int = 0
    cache_misses: int = 0
    not_found: int = 0
    completed: int = 0
    failed: int = 0
    origin_bytes: int = 0
    client_bytes: int = 0
    transcode_count: int = 0
    coalesced_joins: int = 0
    cache_bypasses: int = 0
    bandwidth_below_playback: int = 0
    startup_delay: list[int] = field(default_factory=list)
    startup_delay_hit: list[int] = field(default_factory=list)
    startup_delay_miss: list[int] = field(default_factory=list)
    stall_time: list[int] = field(default_factory=list)

    def copy(self) -> "Metrics":
        return Metrics(**{k: list(v) if isinstance(v, list) else v for k, v in asdict(self).items()})

    def to_dict(self) -> dict:
        out = {k: v for k, v in asdict(self).items() if not isinstance(v, list)}
        for name in ("startup_delay", "startup_delay_hit", "startup_delay_miss", "stall_time"):
            out[name] = _summary(getattr(self, name))
        return out


@dataclass
class Session:
    session_id: str
    video_id: str
    profile: DeviceProfile
    arrival: int
    sink: ClientSink
    link_kbps: float
    state: State = S.RECEIVED
    transitions: list[tuple[int, State]] = field(default_factory=list)
    hit: Optional[bool] = None
    hit_complete: Optional[bool] = None
    node_id: Optional[str] = None
    job: Optional[FetchJob] = None
    store: Optional[CacheStore] = None
    entry: Optional[CacheEntry] = None
    pinned: bool = False
    runner: Optional[StreamRunner] = None
    status: Optional[str] = None
    notifications: int = 0
    error: Optional[str] = None

    @property
    def terminal(self) -> bool:
        return self.state in TERMINAL

    @property
    def path(self) -> list[State]:
        return [s for _, s in self.transitions]

    @property
    def startup_delay(self) -> Optional[int]:
        if self.runner is None or self.runner.progress.first_byte_at is None:
            return None
        return self.runner.progress.first_byte_at - self.arrival

    @property
    def stall_ticks(self) -> int:
        return self.runner.progress.stall_ticks if self.runner is not None else 0


class Manager:
    """The gateway engine: cache, node registry, fetch jobs and sessions on one clock."""

    def __init__(self, config: ManagerConfig, registry: NodeRegistry, transport: OriginTransport,
                 clock: Optional[VirtualClock] = None,
                 profiles: Optional[dict[str, DeviceProfile]] = None,
                 events: Optional[EventLog] = None):
        self.config = config
        self.clock = clock or VirtualClock(config.tick_ms)
        self.registry = registry
        self.transport = transport
        self.profiles = dict(profiles) if profiles is not None else dict(PRESETS)
        self.events = events if events is not None else NullLog()
        self.rng = random.Random(config.rng_seed)
        self.cache = CacheStore(config.cache_budget_bytes, config.segment_size_bytes,
                                root=config.cache_dir, clock=self.clock.now)
        if config.cache_dir is not None:
            restored = self.cache.load_manifest()
            log.info("restored %d cached entries from %s", restored, config.cache_dir)
        self.jobs = JobTable(self._make_job)
        self.metrics = Metrics()
        self.sessions: list[Session] = []
        self.active: list[Session] = []
        self._ids = itertools.count(1)
        self._evictions_seen = len(self.cache.evictions)
        self.stream_config = StreamConfig(config.prefetch_seconds, config.pace_cap_kbps,
                                          config.burst, self.clock.tick_ms)

    # request entry point

    def submit(self, video_id: str, profile_id: str, sink: ClientSink,
               link_kbps: Optional[float] = None, session_id: Optional[str] = None) -> Session:
        try:
            profile = self.profiles[profile_id]
        except KeyError:
            raise ProfileUnknown(profile_id) from None
        session = Session(session_id or f"s{next(self._ids)}", video_id, profile, self.clock.now(),
                          sink, link_kbps if link_kbps is not None else self.config.client_link_kbps)
        session.transitions.append((session.arrival, S.RECEIVED))
        self.metrics.requests += 1
        self.events.emit("request", session=session.session_id, video_id=video_id,
                         profile=profile_id)
        self.sessions.append(session)
        self.active.append(session)
        self._advance(session)
        self._flush_evictions()
        return session

    handle_request = submit

    def step(self) -> None:
        """Advance the engine by one tick."""
        self.clock.advance()
        self.jobs.poll()
        for session in list(self.active):
            if session.state is S.STREAMING:
                self._stream(session)
            else:
                self._advance(session)
        self._flush_evictions()

    @property
    def idle(self) -> bool:
        return not self.active and not self.jobs.running

    def run_until_idle(self, max_ticks: int = 10_000_000) -> int:
        for n in range(max_ticks):
            if self.idle:
                return n
            self.step()
        raise RuntimeError(f"engine still busy after {max_ticks} ticks")

    def snapshot_metrics(self) -> Metrics:
        return self.metrics.copy()

    # state machine

    def _go(self, session: Session, state: State) -> None:
        if state not in TRANSITIONS.get(session.state, ()):
            raise InvalidTransition(f"{session.session_id}: {session.state.value} -> {state.value}")
        session.state = state
        session.transitions.append((self.clock.now(), state))
        self.events.emit("transition", session=session.session_id, state=state.value)

    def _advance(self, s: Session) -> None:
        while not s.terminal:
            st = s.state
            if st is S.RECEIVED:
                self._go(s, S.INDEX_LOOKUP)
            elif st is S.INDEX_LOOKUP:
                hit = self._index_lookup(s)
                s.hit = hit
                if hit:
                    self.metrics.cache_hits += 1
                    self._go(s, S.CACHE_HIT)
                else:
                    self.metrics.cache_misses += 1
                    self._go(s, S.CACHE_MISS)
            elif st is S.CACHE_HIT:
                self._go(s, S.FORMAT_CHECK)
            elif st is S.CACHE_MISS:
                self._go(s, S.HOST_LOOKUP)
            elif st is S.HOST_LOOKUP:
                hosts = self.registry.find_hosts(s.video_id)
                if not hosts:
                    self.metrics.not_found += 1
                    self._finish(s, S.NOT_FOUND, STATUS_NOT_AVAILABLE)
                    return
                job, joined = self.jobs.fetch_or_join(s.video_id, hosts, self.rng,
                                                      coalesce=self.config.cache_enabled)
                if joined:
                    self.metrics.coalesced_joins += 1
                else:
                    job.poll()
                s.job = job
                s.node_id = job.node.node_id
                self.events.emit("node_selected", session=s.session_id, node=s.node_id,
                                 joined=joined, candidates=sorted(n.node_id for n in hosts))
                self._go(s, S.NODE_SELECTED)
            elif st is S.NODE_SELECTED:
                self._go(s, S.FETCHING)
            elif st is S.FETCHING:
                job = s.job
                if job.state is JobState.FAILED:
                    s.error = str(job.error)
                    self._finish(s, S.FAILED, STATUS_FETCH_FAILED)
                    return
                if job.entry is None:
                    return
                s.node_id = job.node.node_id
                s.store = job.store
                s.entry = job.store.lookup(s.video_id, job.variant)
                s.pinned = True
                self._go(s, S.FORMAT_CHECK)
            elif st is S.FORMAT_CHECK:
                matched = variant_matches(s.entry.variant, s.profile)
                self._go(s, S.READY if matched else S.TRANSCODING)
            elif st is S.TRANSCODING:
                if not self._transcode(s):
                    return
            elif st is S.READY:
                self._start_stream(s)
                return
            elif st is S.STREAMING:
                return
            else:  # pragma: no cover
                raise InvalidTransition(f"no handler for {st}")

    def _index_lookup(self, s: Session) -> bool:
        """Device-matched variant first, then any cached copy we can transcode down."""
        if not self.config.cache_enabled:
            return False
        usable = [e for e in self.cache.variants(s.video_id) if e.complete or e.filler_active]
        matching = [e for e in usable if variant_matches(e.variant, s.profile)]
        if matching:
            chosen = max(matching, key=lambda e: (e.complete, e.variant.fps, e.variant))
        else:
            sources = [e for e in usable if can_transcode(e.variant, s.profile)]
            if not sources:
                return False
            chosen = max(sources, key=lambda e: (e.complete, e.variant.pixels, e.variant.fps, e.variant))
        s.store = self.cache
        s.entry = self.cache.lookup(s.video_id, chosen.variant)
        s.pinned = True
        s.hit_complete = chosen.complete
        self.events.emit("cache_hit", session=s.session_id, variant=str(chosen.variant),
                         complete=chosen.complete)
        return True

    def _transcode(self, s: Session) -> bool:
        """Returns False while waiting for the source entry to finish filling."""
        if not can_transcode(s.entry.variant, s.profile):
            s.error = f"{s.entry.variant} cannot be reduced to {s.profile.profile_id}"
            self._finish(s, S.FAILED, STATUS_FORMAT_UNSUPPORTED)
            return True
        if not s.entry.complete:
            job_failed = s.job is not None and s.job.state is JobState.FAILED
            if job_failed or not s.entry.filler_active:
                s.error = "source fill failed"
                self._finish(s, S.FAILED, STATUS_FETCH_FAILED)
                return True
            return False
        source_store, source = s.store, s.entry
        ready = None
        if self.config.cache_enabled:
            ready = next((e for e in self.cache.variants(s.video_id)
                          if e.complete and variant_matches(e.variant, s.profile)), None)
        if ready is not None:
            s.store, s.entry = self.cache, self.cache.lookup(s.video_id, ready.variant)
        else:
            try:
                data = transcode_container(source_store.read_all(source), s.profile, s.video_id)
            except UpscaleRequested as exc:
                s.error = str(exc)
                self._finish(s, S.FAILED, STATUS_FORMAT_UNSUPPORTED)
                return True
            variant, _ = decode_header(data)
            store = self.cache if self.config.cache_enabled else None
            if store is not None:
                try:
                    store.insert(s.video_id, variant, data)
                except (InsufficientBudget, AlreadyComplete, FillInProgress):
                    store = None
            if store is None:
                store = CacheStore(None, self.config.segment_size_bytes, clock=self.clock.now)
                store.insert(s.video_id, variant, data)
            self.metrics.transcode_count += 1
            self.events.emit("transcode", session=s.session_id, source=str(source.variant),
                             target=str(variant), bytes=len(data), cached=store is self.cache)
            s.store, s.entry = store, store.lookup(s.video_id, variant)
        source_store.release(source)
        self._go(s, S.READY)
        return True

    def _start_stream(self, s: Session) -> None:
        fill_kbps = None
        if s.job is not None and not s.entry.complete:
            fill_kbps = s.job.node.channel_capacity_kbps
        plan = plan_stream(s.store, s.entry, s.link_kbps, self.stream_config,
                           fill_kbps=fill_kbps, allow_below_playback=True)
        if "device_below_playback" in plan.warnings:
            self.metrics.bandwidth_below_playback += 1
        self.events.emit("stream_plan", session=s.session_id, variant=str(s.entry.variant),
                         segments=plan.segment_count, prefetch=plan.prefetch_threshold,
                         pace_bytes_per_tick=plan.pace_bytes_per_tick, warnings=plan.warnings)

        def on_segment(index: int, size: int, session=s) -> None:
            self.metrics.client_bytes += size
            self.events.emit("segment", session=session.session_id, index=index, bytes=size)

        alive = (lambda job=s.job, entry=s.entry: entry.filler_active
                 and (job is None or job.state is not JobState.FAILED))
        s.runner = StreamRunner(plan, s.sink, self.clock.now, source_alive=alive,
                                on_segment=on_segment)
        s.runner.progress.started_at = s.arrival
        self._go(s, S.STREAMING)

    def _stream(self, s: Session) -> None:
        try:
            finished = s.runner.step()
        except ClientDisconnected as exc:
            s.error = str(exc)
            self._finish(s, S.FAILED, None)
            return
        except SourceFailed as exc:
            s.error = str(exc)
            self._finish(s, S.FAILED, None if s.runner.started else STATUS_FETCH_FAILED)
            return
        progress = s.runner.progress
        if progress.first_byte_at == self.clock.now():
            self.events.emit("first_byte", session=s.session_id,
                             startup_delay=progress.first_byte_at - s.arrival)
        if progress.stall_events and progress.stall_events[-1].tick == self.clock.now() \
                and progress.stall_events[-1].duration == 1:
            self.events.emit("stall", session=s.session_id, segment=s.runner._next)
        if finished:
            self._finish(s, S.DONE, None)

    def _finish(self, s: Session, state: State, status: Optional[str]) -> None:
        self._go(s, state)
        if s.job is not None:
            s.node_id = s.job.node.node_id  # the job may have failed over mid-stream
        if s.pinned:
            s.store.release(s.entry)
            s.pinned = False
        delay = s.startup_delay
        if delay is not None:
            self.metrics.startup_delay.append(delay)
            (self.metrics.startup_delay_hit if s.hit else self.metrics.startup_delay_miss).append(delay)
        if s.runner is not None and s.runner.started:
            self.metrics.stall_time.append(s.stall_ticks)
        if state is S.DONE:
            self.metrics.completed += 1
        elif state is S.FAILED:
            self.metrics.failed += 1
        s.status = status or ("STREAM" if state is S.DONE else "CLOSED")
        self.notify_user(s, status)
        self.active.remove(s)
        self.events.emit("session_end", session=s.session_id, state=state.value,
                         status=s.status, startup_delay=delay, stall_ticks=s.stall_ticks,
                         hit=s.hit)

    def notify_user(self, s: Session, status: Optional[str]) -> None:
        """Write the terminal status line (if any) and close the client connection."""
        s.notifications += 1
        try:
            if status is not None and not s.sink.closed:
                s.sink.write(f"{status}\n".encode())
        except Exception:  # broken client connections are not our failure
            log.debug("could not notify %s", s.session_id, exc_info=True)
        finally:
            s.sink.close()

    def _make_job(self, video_id: str, node: NodeRecord, candidates: list[NodeRecord]) -> FetchJob:
        shared = self.config.cache_enabled
        store = self.cache if shared else CacheStore(None, self.config.segment_size_bytes,
                                                     clock=self.clock.now)
        self.events.emit("fetch_start", video_id=video_id, node=node.node_id)
        return FetchJob(video_id, node, candidates, store, self.transport, self.clock, self.rng,
                        timeout_ticks=self.clock.ticks_for_ms(self.config.fetch_timeout_s * 1000),
                        pipeline_depth=self.config.pipeline_depth,
                        max_retries=self.config.max_retries, shared=shared,
                        listener=self._job_event)

    def _job_event(self, kind: str, **fields) -> None:
        if kind == "range_response":
            self.metrics.origin_bytes += fields["bytes"]
        elif kind == "cache_bypass":
            self.metrics.cache_bypasses += 1
        self.events.emit(kind, **fields)

    def _flush_evictions(self) -> None:
        for video_id, variant in self.cache.evictions[self._evictions_seen:]:
            self.events.emit("evict", video_id=video_id, variant=str(variant))
        self._evictions_seen = len(self.cache.evictions)

    def cache_dump(self) -> list[dict]:
        return [{"video_id": e.video_id, "variant": str(e.variant), "state": e.state.value,
                 "total_bytes": e.total_bytes, "stored_bytes": e.stored_bytes,
                 "segments": f"{e.segments_present}/{e.total_segments}",
                 "last_access": e.last_access, "pins": e.pin_count} for e in self.cache]
