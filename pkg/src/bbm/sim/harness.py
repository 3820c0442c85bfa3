"""Deterministic discrete-time runs of the gateway against simulated origins."""
from __future__ import annotations

import json
import random
import statistics
from collections import Counter
from typing import IO, Optional

from pydantic import ValidationError

from ..clock import VirtualClock
from ..events import EventLog
from ..media import DeviceProfile, PRESETS, encode_container, synthetic_asset, CIF, QCIF
from ..orchestrator import Manager, ManagerConfig
from ..origin import SimNetwork, SimNode
from ..registry import NodeRecord, NodeRegistry, TelemetryMsg, rtt_from_latency
from ..streamer import BufferSink
from .config import DelaySummary, SimConfig, SimReport
from .workload import generate_workload


class ConfigInvalid(ValueError):
    def __init__(self, errors: list[str]):
        super().__init__("; ".join(errors))
        self.errors = errors


class MismatchedConfigs(ValueError):
    pass


def load_config(data: dict) -> SimConfig:
    try:
        return SimConfig.model_validate(data)
    except ValidationError as exc:
        raise ConfigInvalid([f"{'.'.join(str(p) for p in e['loc']) or '<root>'}: {e['msg']}"
                             for e in exc.errors()]) from None


def build_profiles(config: SimConfig) -> dict[str, DeviceProfile]:
    profiles = dict(PRESETS)
    for pid, fields in config.profiles.items():
        try:
            profiles[pid] = DeviceProfile(profile_id=pid, **fields)
        except (TypeError, ValueError) as exc:
            raise ConfigInvalid([f"profiles.{pid}: {exc}"]) from None
    return profiles


def build_containers(config: SimConfig) -> dict[str, bytes]:
    return {vid: encode_container(synthetic_asset(vid, v.width, v.height, v.fps, v.frame_count,
                                                  v.codec_id, config.seed))
            for vid, v in config.catalog.items()}


class Simulation:
    """Wires a Manager to simulated nodes and replays a workload over virtual ticks."""

    def __init__(self, config: SimConfig, log_stream: Optional[IO[str]] = None,
                 keep_events: bool = True, keep_client_bytes: bool = False,
                 containers: Optional[dict[str, bytes]] = None):
        self.config = config
        self.clock = VirtualClock(config.tick_ms)
        self.events = EventLog(self.clock.now, log_stream, keep=keep_events)
        self.profiles = build_profiles(config)
        self.keep_client_bytes = keep_client_bytes
        self.containers = containers if containers is not None else build_containers(config)
        self.network = SimNetwork(self.clock)
        self.registry = NodeRegistry(config.staleness_ms, clock=self.clock.now_ms,
                                     prober=rtt_from_latency)
        for spec in config.nodes:
            hosted = list(config.catalog) if spec.videos == "all" else list(spec.videos)
            self.network.add(SimNode(spec.id, self.clock.ticks_for_ms(spec.latency_ms),
                                     self.clock.bytes_per_tick(spec.capacity_kbps),
                                     {v: self.containers[v] for v in hosted},
                                     fail_after_segments=spec.fail_after_segments))
            self.registry.register(NodeRecord(spec.id, address=f"sim://{spec.id}",
                                              channel_capacity_kbps=spec.capacity_kbps,
                                              signal_strength_db=spec.signal_db,
                                              available_storage_bytes=spec.storage_bytes,
                                              latency_ms=spec.latency_ms))
        self.manager = Manager(
            ManagerConfig(
                cache_budget_bytes=config.cache_budget_bytes,
                segment_size_bytes=config.segment_size_bytes,
                prefetch_seconds=config.prefetch_seconds,
                telemetry_staleness_s=config.staleness_ms / 1000,
                fetch_timeout_s=config.fetch_timeout_s,
                rng_seed=config.seed,
                tick_ms=config.tick_ms,
                cache_enabled=config.cache_enabled,
                pace_cap_kbps=config.pace_cap_kbps,
                burst=config.burst,
                pipeline_depth=config.pipeline_depth,
                max_retries=config.max_retries,
                client_link_kbps=config.client_link_kbps,
                cache_dir=config.cache_dir,
            ),
            self.registry, self.network, clock=self.clock, profiles=self.profiles,
            events=self.events)
        self.trace = generate_workload(config.workload, config.seed, list(config.catalog))
        self.sinks: dict[str, BufferSink] = {}
        self._interval_ticks = self.clock.ticks_for_ms(config.telemetry_interval_s * 1000)
        self._first_telemetry = True

    def _telemetry(self) -> None:
        for spec in self.config.nodes:
            node = self.registry.get(spec.id)
            hosted = tuple(self.network.nodes[spec.id].objects)
            msg = TelemetryMsg(spec.id, self.clock.now_ms(), spec.capacity_kbps,
                               spec.storage_bytes,
                               add_videos=hosted if self._first_telemetry else ())
            self.registry.apply_telemetry(msg)
            self.events.emit("telemetry", node=spec.id, capacity_kbps=msg.capacity_kbps,
                             hosted=len(node.hosted_videos))
        self._first_telemetry = False

    def run(self) -> SimReport:
        pending = list(self.trace)
        cursor = 0
        limit = self.config.duration_ticks
        while True:
            now = self.clock.now()
            if now % self._interval_ticks == 0:
                self._telemetry()
            while cursor < len(pending) and pending[cursor].tick <= now:
                req = pending[cursor]
                cursor += 1
                sink = BufferSink(keep=self.keep_client_bytes)
                try:
                    session = self.manager.submit(req.video_id, req.profile, sink)
                except KeyError:
                    raise ConfigInvalid([f"workload: unknown profile {req.profile!r}"]) from None
                self.sinks[session.session_id] = sink
            if cursor >= len(pending) and self.manager.idle:
                break
            if limit is not None and now >= limit:
                break
            self.manager.step()
        return self.report()

    def report(self) -> SimReport:
        m = self.manager.metrics
        # what the origin would have sent had every delivered stream come straight from it
        equivalent = sum(len(self.containers[s.video_id]) for s in self.manager.sessions
                         if s.state.value == "Done" and s.video_id in self.containers)
        saved = 1 - m.origin_bytes / equivalent if equivalent else 0.0
        starts = Counter(e["node"] for e in self.events.of_kind("fetch_start"))
        segments = Counter(e["node"] for e in self.events.of_kind("range_response"))
        return SimReport(
            # index misses that ended in NotFound are reported on their own
            requests=m.requests, hits=m.cache_hits, misses=m.cache_misses - m.not_found,
            not_found=m.not_found, completed=m.completed, failed=m.failed,
            hit_rate=m.cache_hits / m.requests if m.requests else 0.0,
            origin_bytes=m.origin_bytes, client_bytes=m.client_bytes,
            origin_equivalent_bytes=equivalent,
            bandwidth_saved_ratio=min(1.0, max(0.0, saved)),
            startup_delay_hit=_delays(m.startup_delay_hit),
            startup_delay_miss=_delays(m.startup_delay_miss),
            total_stall_ticks=sum(m.stall_time),
            stalled_sessions=sum(1 for t in m.stall_time if t),
            transcode_count=m.transcode_count, coalesced_joins=m.coalesced_joins,
            per_node_fetch_counts=dict(sorted(starts.items())),
            per_node_segments=dict(sorted(segments.items())),
            ticks=self.clock.now(), tick_ms=self.clock.tick_ms,
            cache_enabled=self.config.cache_enabled,
            fingerprint=self.config.fingerprint(),
        )


def _delays(values: list[int]) -> DelaySummary:
    if not values:
        return DelaySummary()
    return DelaySummary(count=len(values), mean=statistics.fmean(values),
                        median=statistics.median(values))


def run_simulation(config: SimConfig | dict, log_stream: Optional[IO[str]] = None,
                   keep_events: bool = True) -> tuple[SimReport, list[dict]]:
    if isinstance(config, dict):
        config = load_config(config)
    sim = Simulation(config, log_stream=log_stream, keep_events=keep_events)
    report = sim.run()
    return report, sim.events.events


COMPARED = ["requests", "hits", "misses", "not_found", "completed", "failed", "hit_rate",
            "origin_bytes", "client_bytes", "bandwidth_saved_ratio", "total_stall_ticks",
            "transcode_count"]


def compare_runs(a: SimReport, b: SimReport) -> dict:
    """Per-metric deltas (b - a). The headline is origin bytes saved by caching."""
    if a.fingerprint != b.fingerprint:
        raise MismatchedConfigs(f"runs differ in workload/catalog: {a.fingerprint} vs {b.fingerprint}")
    rows = [{"metric": k, "a": getattr(a, k), "b": getattr(b, k),
             "delta": getattr(b, k) - getattr(a, k)} for k in COMPARED]
    for name in ("startup_delay_hit", "startup_delay_miss"):
        x, y = getattr(a, name).median, getattr(b, name).median
        rows.append({"metric": f"{name}_median", "a": x, "b": y,
                     "delta": None if x is None or y is None else y - x})
    if a.cache_enabled != b.cache_enabled:
        cached, baseline = (a, b) if a.cache_enabled else (b, a)
    else:
        cached, baseline = b, a
    return {"origin_bytes_saved": baseline.origin_bytes - cached.origin_bytes, "rows": rows}


def gen_catalog(videos: int, seed: int) -> dict[str, dict]:
    """Random catalog of CIF/QCIF clips, each a few seconds long."""
    rng = random.Random(seed)
    width = len(str(max(videos - 1, 0)))
    catalog = {}
    for i in range(videos):
        (w, h), fps = rng.choice([(CIF, 30), (CIF, 25), (QCIF, 15), (QCIF, 30)])
        catalog[f"v{i:0{width}d}"] = {"width": w, "height": h, "fps": fps,
                                      "frame_count": rng.randint(2, 8) * fps // 2}
    return catalog


def dump_report(report: SimReport) -> str:
    return json.dumps(report.model_dump(), indent=2, sort_keys=True) + "\n"
