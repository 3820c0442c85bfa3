"""Cloud node registry: telemetry ingestion, index scores and origin selection."""
from __future__ import annotations

import json
import logging
import random
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional, Sequence

log = logging.getLogger(__name__)

DEFAULT_TELEMETRY_INTERVAL_MS = 5_000
DEFAULT_STALENESS_MS = 3 * DEFAULT_TELEMETRY_INTERVAL_MS


class RegistryError(Exception):
    pass


class UnknownNode(RegistryError):
    pass


class StaleMessage(RegistryError):
    pass


class ProbeTimeout(RegistryError):
    pass


@dataclass
class NodeRecord:
    node_id: str
    address: str = ""
    route_time_ms: int = 0
    channel_capacity_kbps: int = 1
    signal_strength_db: int = 0
    available_storage_bytes: int = 0
    last_telemetry: int = 0
    hosted_videos: set[str] = field(default_factory=set)
    latency_ms: int = 0
    probe_failed: bool = False

    def __post_init__(self):
        if self.route_time_ms < 0 or self.available_storage_bytes < 0:
            raise ValueError(f"{self.node_id}: negative route time or storage")
        if self.channel_capacity_kbps <= 0:
            raise ValueError(f"{self.node_id}: channel capacity must be positive")

    @property
    def score(self) -> tuple[int, int, int]:
        return index_score(self)


def index_score(node: NodeRecord) -> tuple[int, int, int]:
    """Sort key: shortest route, then largest capacity, then strongest signal."""
    return (node.route_time_ms, -node.channel_capacity_kbps, -node.signal_strength_db)


@dataclass(frozen=True)
class TelemetryMsg:
    node_id: str
    ts: int
    capacity_kbps: int
    storage_bytes: int
    add_videos: tuple[str, ...] = ()
    remove_videos: tuple[str, ...] = ()

    def to_json(self) -> str:
        return json.dumps({
            "node_id": self.node_id, "ts": self.ts,
            "capacity_kbps": self.capacity_kbps, "storage_bytes": self.storage_bytes,
            "add_videos": list(self.add_videos), "remove_videos": list(self.remove_videos),
        }, separators=(",", ":"))

    @classmethod
    def from_json(cls, line: str) -> "TelemetryMsg":
        obj = json.loads(line)
        return cls(str(obj["node_id"]), int(obj["ts"]), int(obj["capacity_kbps"]),
                   int(obj["storage_bytes"]), tuple(obj.get("add_videos", ())),
                   tuple(obj.get("remove_videos", ())))


def select_best_node(candidates: Sequence[NodeRecord], rng: random.Random) -> NodeRecord:
    """Pick the node with the best index score; exact ties are broken by ``rng``.

    The tied set is ordered by node id before drawing so the result does not
    depend on candidate order.
    """
    if not candidates:
        raise ValueError("select_best_node needs at least one candidate")
    best = min(index_score(n) for n in candidates)
    tied = sorted((n for n in candidates if index_score(n) == best), key=lambda n: n.node_id)
    if len(tied) == 1:
        return tied[0]
    return tied[rng.randrange(len(tied))]


def rtt_from_latency(node: NodeRecord) -> int:
    return 2 * node.latency_ms


class NodeRegistry:
    def __init__(self, staleness_window_ms: int = DEFAULT_STALENESS_MS,
                 clock: Callable[[], int] = lambda: 0,
                 prober: Callable[[NodeRecord], int] = rtt_from_latency):
        self.staleness_window_ms = staleness_window_ms
        self.clock = clock
        self.prober = prober
        self.nodes: dict[str, NodeRecord] = {}
        self.stale_messages = 0
        self._lock = threading.RLock()

    def register(self, record: NodeRecord, probe: bool = True) -> NodeRecord:
        with self._lock:
            self.nodes[record.node_id] = record
        if probe:
            try:
                self.measure_route(record.node_id)
            except ProbeTimeout:
                pass
        return record

    def get(self, node_id: str) -> NodeRecord:
        try:
            return self.nodes[node_id]
        except KeyError:
            raise UnknownNode(node_id) from None

    def apply_telemetry(self, msg: TelemetryMsg) -> None:
        with self._lock:
            node = self.get(msg.node_id)
            if msg.ts < node.last_telemetry:
                self.stale_messages += 1
                raise StaleMessage(f"{msg.node_id}: ts {msg.ts} < {node.last_telemetry}")
            if msg.capacity_kbps <= 0 or msg.storage_bytes < 0:
                raise ValueError(f"{msg.node_id}: invalid telemetry values")
            node.channel_capacity_kbps = msg.capacity_kbps
            node.available_storage_bytes = msg.storage_bytes
            node.hosted_videos.update(msg.add_videos)
            node.hosted_videos.difference_update(msg.remove_videos)
            node.last_telemetry = msg.ts
            node.probe_failed = False

    def measure_route(self, node_id: str) -> int:
        node = self.get(node_id)
        try:
            rtt = int(self.prober(node))
        except ProbeTimeout:
            with self._lock:
                node.probe_failed = True
            raise
        with self._lock:
            node.route_time_ms = rtt
        return rtt

    def is_fresh(self, node: NodeRecord) -> bool:
        return not node.probe_failed and self.clock() - node.last_telemetry <= self.staleness_window_ms

    def find_hosts(self, video_id: str) -> list[NodeRecord]:
        with self._lock:
            return [n for n in self.nodes.values()
                    if video_id in n.hosted_videos and self.is_fresh(n)]

    def select(self, video_id: str, rng: random.Random,
               exclude: Iterable[str] = ()) -> Optional[NodeRecord]:
        skip = set(exclude)
        hosts = [n for n in self.find_hosts(video_id) if n.node_id not in skip]
        return select_best_node(hosts, rng) if hosts else None

    def snapshot(self) -> list[dict]:
        with self._lock:
            return [{
                "node_id": n.node_id, "address": n.address,
                "route_time_ms": n.route_time_ms,
                "channel_capacity_kbps": n.channel_capacity_kbps,
                "signal_strength_db": n.signal_strength_db,
                "available_storage_bytes": n.available_storage_bytes,
                "last_telemetry": n.last_telemetry,
                "fresh": self.is_fresh(n),
                "hosted_videos": sorted(n.hosted_videos),
            } for n in self.nodes.values()]
