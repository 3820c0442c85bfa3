import random
from collections import Counter

import pytest
from hypothesis import given, settings, strategies as st
from scipy.stats import chisquare

from bbm.registry import (NodeRecord, NodeRegistry, ProbeTimeout, StaleMessage, TelemetryMsg,
                          UnknownNode, index_score, select_best_node)

from oracles import brute_force_best, random_fleet


def test_selection_example():
    nodes = [NodeRecord("a", route_time_ms=20, channel_capacity_kbps=500, signal_strength_db=-60),
             NodeRecord("b", route_time_ms=10, channel_capacity_kbps=100, signal_strength_db=-90),
             NodeRecord("c", route_time_ms=10, channel_capacity_kbps=300, signal_strength_db=-80),
             NodeRecord("d", route_time_ms=10, channel_capacity_kbps=300, signal_strength_db=-70)]
    assert select_best_node(nodes, random.Random(0)).node_id == "d"
    assert index_score(nodes[3]) == (10, -300, 70)


def test_empty_and_validation():
    with pytest.raises(ValueError):
        select_best_node([], random.Random(0))
    with pytest.raises(ValueError):
        NodeRecord("x", channel_capacity_kbps=0)


@settings(max_examples=300)
@given(seed=st.integers(0, 10**9), size=st.integers(1, 12), draw=st.integers(0, 10**6))
def test_selection_matches_oracle_and_is_order_free(seed, size, draw):
    rng = random.Random(seed)
    fleet = random_fleet(rng, size)
    best = brute_force_best(fleet)
    shuffled = fleet[:]
    rng.shuffle(shuffled)
    a = select_best_node(fleet, random.Random(draw))
    b = select_best_node(shuffled, random.Random(draw))
    assert a in best and a is b


@given(seed=st.integers(0, 10**9))
def test_improving_a_loser_never_hurts_it(seed):
    rng = random.Random(seed)
    fleet = random_fleet(rng, 6)
    target = fleet[0]
    target.route_time_ms = 0
    target.channel_capacity_kbps = 10**6
    assert select_best_node(fleet, random.Random(1)) is target


def test_tie_break_uniform():
    fleet = [NodeRecord(f"n{i}", route_time_ms=5, channel_capacity_kbps=100) for i in range(4)]
    rng = random.Random(42)
    counts = Counter(select_best_node(fleet, rng).node_id for _ in range(10_000))
    assert chisquare([counts[f"n{i}"] for i in range(4)]).pvalue > 0.01


def test_tie_break_deterministic_under_seed():
    fleet = [NodeRecord(f"n{i}", route_time_ms=5) for i in range(5)]
    picks = lambda: [select_best_node(fleet, r).node_id for r in [random.Random(7)] for _ in range(50)]
    assert picks() == picks()


def make_registry(now):
    reg = NodeRegistry(staleness_window_ms=1000, clock=lambda: now[0])
    reg.register(NodeRecord("a", latency_ms=15, hosted_videos={"v1"}))
    reg.register(NodeRecord("b", latency_ms=5, hosted_videos={"v1", "v2"}))
    return reg


def test_registry_probe_and_lookup():
    now = [0]
    reg = make_registry(now)
    assert reg.get("a").route_time_ms == 30 and reg.get("b").route_time_ms == 10
    assert [n.node_id for n in reg.find_hosts("v1")] == ["a", "b"]
    assert reg.select("v1", random.Random(0)).node_id == "b"
    assert reg.select("v1", random.Random(0), exclude=["b"]).node_id == "a"
    assert reg.select("v9", random.Random(0)) is None
    with pytest.raises(UnknownNode):
        reg.get("zz")


def test_staleness_window():
    now = [0]
    reg = make_registry(now)
    now[0] = 1000
    assert len(reg.find_hosts("v1")) == 2
    now[0] = 1001
    assert reg.find_hosts("v1") == []
    reg.apply_telemetry(TelemetryMsg("a", 1001, 200, 5))
    assert [n.node_id for n in reg.find_hosts("v1")] == ["a"]


def test_telemetry_updates_and_stale():
    now = [0]
    reg = make_registry(now)
    reg.apply_telemetry(TelemetryMsg("b", 50, 900, 1234, add_videos=("v3",), remove_videos=("v1",)))
    b = reg.get("b")
    assert b.channel_capacity_kbps == 900 and b.available_storage_bytes == 1234
    assert b.hosted_videos == {"v2", "v3"}
    with pytest.raises(StaleMessage):
        reg.apply_telemetry(TelemetryMsg("b", 49, 1, 1))
    assert reg.stale_messages == 1 and reg.get("b").channel_capacity_kbps == 900
    with pytest.raises(UnknownNode):
        reg.apply_telemetry(TelemetryMsg("zz", 1, 1, 1))


def test_telemetry_json_round_trip():
    msg = TelemetryMsg("a", 5, 100, 7, ("x",), ("y",))
    assert msg.to_json() == ('{"node_id":"a","ts":5,"capacity_kbps":100,"storage_bytes":7,'
                             '"add_videos":["x"],"remove_videos":["y"]}')
    assert TelemetryMsg.from_json(msg.to_json()) == msg


def test_probe_failure_marks_stale():
    def prober(node):
        raise ProbeTimeout(node.node_id)
    reg = NodeRegistry(clock=lambda: 0, prober=prober)
    reg.register(NodeRecord("a", hosted_videos={"v"}))
    assert reg.get("a").probe_failed and reg.find_hosts("v") == []
