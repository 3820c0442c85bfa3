"""Paced, in-order segment delivery to a client, tolerant of entries still filling."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Protocol

from .cache import CacheEntry, CacheStore
from .media import HEADER_SIZE, frame_size
from .protocol import END_FRAME, encode_frame, stream_header

DEFAULT_PREFETCH_SECONDS = 2.0


class StreamError(Exception):
    pass


class BandwidthBelowPlayback(StreamError):
    def __init__(self, device_kbps: float, playback_kbps: float):
        super().__init__(f"device link {device_kbps} kbps is below playback {playback_kbps:.1f} kbps")
        self.device_kbps = device_kbps
        self.playback_kbps = playback_kbps


class ClientDisconnected(StreamError):
    pass


class SourceFailed(StreamError):
    pass


class ClientSink(Protocol):
    closed: bool

    def write(self, data: bytes) -> None: ...

    def close(self) -> None: ...


class BufferSink:
    """Collects everything written; ``keep=False`` only counts bytes."""

    def __init__(self, keep: bool = True, disconnect_after: Optional[int] = None):
        self.keep = keep
        self.chunks: list[bytes] = []
        self.bytes_written = 0
        self.frames = 0
        self.closed = False
        self.disconnect_after = disconnect_after

    def write(self, data: bytes) -> None:
        if self.closed:
            raise ClientDisconnected("sink closed")
        self.bytes_written += len(data)
        if self.keep:
            self.chunks.append(data)

    def frame_sent(self) -> None:
        self.frames += 1
        if self.disconnect_after is not None and self.frames >= self.disconnect_after:
            self.closed = True

    def close(self) -> None:
        self.closed = True

    def getvalue(self) -> bytes:
        return b"".join(self.chunks)


@dataclass
class StreamConfig:
    prefetch_seconds: float = DEFAULT_PREFETCH_SECONDS
    pace_cap_kbps: Optional[float] = None  # None paces at the playback bitrate
    burst: bool = False
    tick_ms: int = 10


def playback_bitrate_kbps(container_bytes: int, frame_count: int, fps: int) -> float:
    if frame_count <= 0:
        return 0.0
    duration_s = frame_count / fps
    return container_bytes * 8 / duration_s / 1000


def prefetch_segments(prefetch_seconds: float, bitrate_kbps: float, segment_size: int) -> int:
    return max(1, math.ceil(prefetch_seconds * bitrate_kbps * 1000 / (8 * segment_size)))


@dataclass
class StreamPlan:
    store: CacheStore
    entry: CacheEntry
    segment_count: int
    playback_bitrate_kbps: float
    prefetch_threshold: int
    pace_kbps: Optional[float]
    pace_bytes_per_tick: Optional[int]
    warnings: list[str] = field(default_factory=list)

    @property
    def segment_size(self) -> int:
        return self.entry.segment_size


def plan_stream(store: CacheStore, entry: CacheEntry, device_kbps: float, config: StreamConfig,
                fill_kbps: Optional[float] = None, allow_below_playback: bool = False) -> StreamPlan:
    variant = entry.variant
    frames = max(0, (entry.total_bytes - HEADER_SIZE) // frame_size(variant.width, variant.height))
    bitrate = playback_bitrate_kbps(entry.total_bytes, frames, variant.fps)
    warnings = []
    if device_kbps < bitrate:
        if not allow_below_playback:
            raise BandwidthBelowPlayback(device_kbps, bitrate)
        warnings.append("device_below_playback")
    if fill_kbps is not None and not entry.complete and fill_kbps < bitrate:
        warnings.append("fill_below_playback")
    threshold = min(prefetch_segments(config.prefetch_seconds, bitrate, entry.segment_size),
                    max(1, entry.total_segments))
    if config.burst:
        pace, per_tick = None, None
    else:
        cap = config.pace_cap_kbps if config.pace_cap_kbps is not None else bitrate
        pace = min(device_kbps, cap)
        if pace < bitrate <= device_kbps:
            pace = bitrate
        pace = max(pace, 1e-3)
        per_tick = max(1, math.ceil(pace * config.tick_ms / 8))
    return StreamPlan(store, entry, entry.total_segments, bitrate, threshold, pace, per_tick, warnings)


@dataclass
class StallEvent:
    tick: int
    duration: int


@dataclass
class StreamProgress:
    started_at: int
    segments_sent: int = 0
    bytes_sent: int = 0
    first_byte_at: Optional[int] = None
    finished_at: Optional[int] = None
    stall_events: list[StallEvent] = field(default_factory=list)

    @property
    def startup_delay(self) -> Optional[int]:
        if self.first_byte_at is None:
            return None
        return self.first_byte_at - self.started_at

    @property
    def stall_ticks(self) -> int:
        return sum(s.duration for s in self.stall_events)


class StreamRunner:
    """Delivers a plan to a sink, one :meth:`step` per clock tick.

    Delivery starts once ``prefetch_threshold`` leading segments are present.
    Afterwards a token bucket refilled at the pace rate releases whole
    segments; a tick where the bucket could pay for the next segment but the
    segment is not yet cached is recorded as a stall.
    """

    def __init__(self, plan: StreamPlan, sink: ClientSink, now: Callable[[], int],
                 source_alive: Optional[Callable[[], bool]] = None,
                 on_segment: Optional[Callable[[int, int], None]] = None):
        self.plan = plan
        self.sink = sink
        self.now = now
        self.source_alive = source_alive or (lambda: plan.entry.filler_active)
        self.on_segment = on_segment
        self.progress = StreamProgress(started_at=now())
        self.done = False
        self._next = 0
        self._credit = 0
        self._stall: Optional[StallEvent] = None

    @property
    def started(self) -> bool:
        return self.progress.first_byte_at is not None

    def _ready_to_start(self) -> bool:
        entry = self.plan.entry
        return entry.complete or entry.contiguous_prefix() >= self.plan.prefetch_threshold

    def step(self) -> bool:
        """Advance one tick. Returns True once the stream has finished."""
        if self.done:
            return True
        if self.sink.closed:
            raise ClientDisconnected(f"client left after {self.progress.segments_sent} segments")
        entry = self.plan.entry
        now = self.now()
        if not self.started:
            if not self._ready_to_start():
                if not entry.complete and not self.source_alive():
                    raise SourceFailed(f"{entry.video_id}: source fill failed before start")
                return False
            self.sink.write(stream_header(entry.video_id, str(entry.variant),
                                          entry.total_bytes, entry.segment_size))
            self.progress.first_byte_at = now
            self._credit = entry.segment_size
        elif self.plan.pace_bytes_per_tick is not None:
            cap = entry.segment_size + self.plan.pace_bytes_per_tick
            self._credit = min(cap, self._credit + self.plan.pace_bytes_per_tick)

        while self._next < self.plan.segment_count:
            length = entry.segment_length(self._next)
            paced = self.plan.pace_bytes_per_tick is not None
            if paced and self._credit < length:
                break
            if not entry.has(self._next):
                if not self.source_alive() and not entry.complete:
                    raise SourceFailed(f"{entry.video_id}: source fill failed at segment {self._next}")
                self._note_stall(now)
                return False
            data = self.plan.store.read_segment(entry, self._next)
            self.sink.write(encode_frame(data))
            if paced:
                self._credit -= length
            self._next += 1
            self.progress.segments_sent += 1
            self.progress.bytes_sent += len(data)
            if self.on_segment is not None:
                self.on_segment(self._next - 1, len(data))
            if hasattr(self.sink, "frame_sent"):
                self.sink.frame_sent()
            if self.sink.closed and self._next < self.plan.segment_count:
                raise ClientDisconnected(f"client left after {self.progress.segments_sent} segments")
        self._stall = None
        if self._next >= self.plan.segment_count:
            self.sink.write(END_FRAME)
            self.progress.finished_at = now
            self.done = True
        return self.done

    def _note_stall(self, now: int) -> None:
        if self._stall is not None and self._stall.tick + self._stall.duration == now:
            self._stall.duration += 1
        else:
            self._stall = StallEvent(now, 1)
            self.progress.stall_events.append(self._stall)


def run_stream(plan: StreamPlan, sink: ClientSink, clock,
               before_tick: Optional[Callable[[int], None]] = None,
               max_ticks: int = 10_000_000) -> StreamProgress:
    """Drive a runner to completion on ``clock``.

    ``before_tick`` runs after each clock advance and before delivery, which
    is where a producer fills segments.
    """
    runner = StreamRunner(plan, sink, clock.now)
    for _ in range(max_ticks):
        clock.advance()
        if before_tick is not None:
            before_tick(clock.now())
        if runner.step():
            return runner.progress
    raise StreamError(f"stream did not finish within {max_ticks} ticks")
