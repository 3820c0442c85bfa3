import sys
from pathlib import Path

import pytest

from bbm.media import DeviceProfile, VideoAsset, encode_container


@pytest.fixture
def tiny_asset() -> VideoAsset:
    # 2x2 frames are 6 bytes; payload is simply 0..17
    return VideoAsset("g", 1, 2, 2, 5, 3, bytes(range(18)))


@pytest.fixture
def tiny_container(tiny_asset) -> bytes:
    return encode_container(tiny_asset)


def bbm_cmd() -> list[str]:
    return [sys.executable, "-m", "bbm"]


EXAMPLES = Path(__file__).parent / "data"


class World:
    """A Manager wired to simulated origin nodes, for engine-level tests."""

    def __init__(self, objects: dict[str, bytes], nodes=(("n1", 10, 8000),), **config):
        from bbm.clock import VirtualClock
        from bbm.events import EventLog
        from bbm.orchestrator import Manager, ManagerConfig
        from bbm.origin import SimNetwork, SimNode
        from bbm.registry import NodeRecord, NodeRegistry

        self.clock = VirtualClock(config.pop("tick_ms", 10))
        self.net = SimNetwork(self.clock)
        self.registry = NodeRegistry(10**12, clock=self.clock.now_ms)
        fail = config.pop("fail_after", {})
        for node_id, latency_ms, kbps in nodes:
            self.net.add(SimNode(node_id, self.clock.ticks_for_ms(latency_ms),
                                 self.clock.bytes_per_tick(kbps), dict(objects),
                                 fail_after_segments=fail.get(node_id)))
            self.registry.register(NodeRecord(node_id, channel_capacity_kbps=kbps,
                                              latency_ms=latency_ms, hosted_videos=set(objects)))
        self.events = EventLog(self.clock.now)
        config.setdefault("tick_ms", self.clock.tick_ms)
        self.manager = Manager(ManagerConfig(**config), self.registry, self.net,
                               clock=self.clock, events=self.events)

    def play(self, video_id, profile="qcif15", **kw):
        from bbm.streamer import BufferSink

        sink = BufferSink()
        return self.manager.submit(video_id, profile, sink, **kw), sink

    def run(self, max_ticks=200_000):
        return self.manager.run_until_idle(max_ticks)
