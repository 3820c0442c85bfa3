"""Exit criteria. Each test prints one PASS/FAIL line (shown even under capture)."""
import hashlib
import json
import os
import random
import statistics
import subprocess
import sys
import textwrap
import time
from collections import Counter, defaultdict

import pytest
from scipy.stats import chisquare

from bbm.cache import CacheStore
from bbm.clock import VirtualClock
from bbm.media import (CIF, QCIF, DeviceProfile, decode_header, encode_container,
                       frame_size, synthetic_asset, transcode)
from bbm.registry import NodeRecord, select_best_node
from bbm.sim.harness import Simulation, load_config
from bbm.streamer import BufferSink, StreamConfig, plan_stream, run_stream

from conftest import EXAMPLES, bbm_cmd
from oracles import brute_force_best, drain_oracle, fill_arrivals, random_fleet, run_cache_trace

pytestmark = pytest.mark.acceptance

QCIF_FRAME = frame_size(*QCIF)  # 38016


@pytest.fixture
def verdict(capsys):
    def emit(name: str, ok: bool, detail: str, elapsed: float, limit: float | None = None):
        in_time = limit is None or elapsed < limit
        status = "PASS" if ok and in_time else "FAIL"
        bound = f" (limit {limit:.0f}s)" if limit else ""
        with capsys.disabled():
            print(f"\n[{status}] {name}: {detail}; {elapsed:.2f}s{bound}")
        assert ok, detail
        assert in_time, f"{name} took {elapsed:.2f}s, limit {limit}s"
    return emit


# shared scenario definitions

def bandwidth_catalog():
    cat = {}
    for i in range(10):
        if i % 2:
            cat[f"v{i}"] = {"width": CIF[0], "height": CIF[1], "fps": 30, "frame_count": 33}
        else:
            cat[f"v{i}"] = {"width": QCIF[0], "height": QCIF[1], "fps": 15, "frame_count": 132}
    return cat


def bandwidth_config(cache_enabled=True, seed=1):
    rng = random.Random(seed)
    order = [f"v{i}" for i in range(10) for _ in range(10)]
    rng.shuffle(order)
    trace = [{"tick": 30 * k, "video_id": vid, "profile": "qcif15"} for k, vid in enumerate(order)]
    return {"seed": seed, "catalog": bandwidth_catalog(), "cache_enabled": cache_enabled,
            "nodes": [{"id": "n1", "latency_ms": 20, "capacity_kbps": 1_000_000}],
            "workload": {"model": "fixed", "trace": trace}}


def delay_scenarios():
    """Cache-enabled scenarios for the startup-delay ordering check."""
    small = json.loads((EXAMPLES / "sim_small.json").read_text())
    yield "bandwidth", bandwidth_config()
    yield "sim_small", small
    for seed, (lat, kbps, seg, prefetch) in enumerate([(5, 10_000, 65536, 0.5), (50, 40_000, 262144, 2),
                                                       (100, 8_000, 32768, 1), (10, 100_000, 131072, 3)]):
        cfg = json.loads(json.dumps(small))
        cfg.update(seed=seed, segment_size_bytes=seg, prefetch_seconds=prefetch)
        cfg["nodes"] = [{"id": "a", "latency_ms": lat, "capacity_kbps": kbps},
                        {"id": "b", "latency_ms": lat * 2, "capacity_kbps": kbps * 2}]
        cfg["workload"].update(request_count=40, inter_arrival_ticks=25 + 10 * seed)
        yield f"grid{seed}", cfg
    failing = json.loads(json.dumps(small))
    failing["nodes"][0]["fail_after_segments"] = 4
    failing["fetch_timeout_s"] = 0.5
    yield "failover", failing


def test_ac1_repeat_request_bandwidth(verdict):
    t0 = time.perf_counter()
    cached = Simulation(load_config(bandwidth_config()))
    r1 = cached.run()
    sizes = {vid: len(data) for vid, data in cached.containers.items()}
    baseline = Simulation(load_config(bandwidth_config(cache_enabled=False)))
    r0 = baseline.run()
    per_request = sum(sizes[s.video_id] for s in baseline.manager.sessions)
    elapsed = time.perf_counter() - t0
    ok = (r1.origin_bytes == sum(sizes.values()) and r0.origin_bytes == per_request
          and r1.completed == r0.completed == 100 and r1.requests == 100)
    verdict("AC1 repeat-request bandwidth",
            ok, f"cached origin={r1.origin_bytes} vs sum(10 containers)={sum(sizes.values())}, "
                f"no-cache origin={r0.origin_bytes} vs sum(per-request)={per_request}, "
                f"video sizes {min(sizes.values())}-{max(sizes.values())} B",
            elapsed, 10)


def test_ac2_node_selection_oracle(verdict):
    t0 = time.perf_counter()
    rng = random.Random(2024)
    untied = tied = mismatches = 0
    for _ in range(1000):
        fleet = random_fleet(rng, rng.randint(1, 12))
        # force a tie cluster on the best score in roughly half the fleets
        if rng.random() < 0.5 and len(fleet) > 1:
            best = min(fleet, key=lambda n: (n.route_time_ms, -n.channel_capacity_kbps,
                                             -n.signal_strength_db))
            for n in rng.sample(fleet, rng.randint(1, len(fleet) - 1)):
                n.route_time_ms, n.channel_capacity_kbps = best.route_time_ms, best.channel_capacity_kbps
                n.signal_strength_db = best.signal_strength_db
        expected = brute_force_best(fleet)
        got = select_best_node(fleet, random.Random(rng.random()))
        if len(expected) == 1:
            untied += 1
            mismatches += got is not expected[0]
        else:
            tied += 1
            mismatches += got not in expected
    pvalues = []
    for k in (2, 3, 5, 8):
        fleet = [NodeRecord(f"t{i}", route_time_ms=7, channel_capacity_kbps=300) for i in range(k)]
        draw = random.Random(k)
        counts = Counter(select_best_node(fleet, draw).node_id for _ in range(10_000))
        pvalues.append(float(chisquare([counts[n.node_id] for n in fleet]).pvalue))
    elapsed = time.perf_counter() - t0
    verdict("AC2 node selection",
            mismatches == 0 and min(pvalues) > 0.01,
            f"{untied} untied + {tied} tied fleets, {mismatches} mismatches; "
            f"full-tie chi-square p-values {[round(p, 3) for p in pvalues]} (need > 0.01)",
            elapsed, 30)


def test_ac3_transcode_arithmetic(verdict):
    t0 = time.perf_counter()
    frames = 60
    base = synthetic_asset("src", *CIF, 60, frames)
    bad = []
    for in_fps in range(1, 61):
        asset = type(base)("src", 1, *CIF, in_fps, frames, base.payload)
        for out_fps in range(1, 61):
            out = transcode(asset, DeviceProfile("p", 1, *QCIF, out_fps))
            kept = frames * min(in_fps, out_fps) // in_fps
            if len(out.payload) != kept * QCIF_FRAME or out.frame_count != kept:
                bad.append((in_fps, out_fps))
    rng = random.Random(3)
    idem_fail = ident_fail = 0
    for k in range(1000):
        w, h = rng.randint(2, 96), rng.randint(2, 96)
        asset = synthetic_asset(f"a{k}", w, h, rng.randint(1, 60), rng.randint(0, 6), seed=k)
        prof = DeviceProfile("r", 1, rng.randint(1, w), rng.randint(1, h), rng.randint(1, 60))
        once = transcode(asset, prof)
        idem_fail += encode_container(transcode(once, prof)) != encode_container(once)
        same = DeviceProfile("m", 1, w, h, asset.fps + rng.randint(0, 5))
        ident_fail += encode_container(transcode(asset, same)) != encode_container(asset)
    elapsed = time.perf_counter() - t0
    verdict("AC3 transcode arithmetic",
            not bad and idem_fail == 0 and ident_fail == 0,
            f"3600 fps pairs, {len(bad)} size mismatches; 1000 assets: "
            f"{idem_fail} idempotence failures, {ident_fail} matching-profile changes",
            elapsed, 60)


def _stream_scenario(rng, slow: bool):
    fps = rng.choice([10, 15, 25, 30])
    data = encode_container(synthetic_asset("s", *QCIF, fps, rng.randint(2, 40), seed=rng.randint(0, 9)))
    seg = rng.choice([8192, 16384, 65536, 262144])
    variant, _ = decode_header(data)
    clock = VirtualClock(10)
    store = CacheStore(segment_size=seg)
    handle = store.begin_fill("s", variant, len(data))
    cap = rng.choice([None, None, 5000, 20000])
    plan = plan_stream(store, handle.entry, 1e9,
                       StreamConfig(prefetch_seconds=0 if slow else rng.uniform(0, 3),
                                    pace_cap_kbps=cap, tick_ms=10))
    pace = plan.pace_bytes_per_tick
    fill = max(1, pace // rng.randint(3, 6)) if slow else pace * rng.randint(1, 3) + rng.randint(0, 50)
    t0 = rng.randint(1, 20)
    arrivals = fill_arrivals(len(data), seg, fill, t0=t0)

    def before(now):
        for i, t in enumerate(arrivals):
            if t == now:
                store.write_segment(handle, i, data[i * seg:(i + 1) * seg])
        if handle.entry.complete:
            store.finish_fill(handle)

    sink = BufferSink(keep=False)
    progress = run_stream(plan, sink, clock, before)
    oracle = drain_oracle(arrivals, len(data), seg, pace, plan.prefetch_threshold, start_tick=1)
    return progress, oracle, plan.segment_count


def test_ac4_stream_while_fill(verdict):
    t0 = time.perf_counter()
    rng = random.Random(4)
    stalled, oracle_mismatch = 0, 0
    for _ in range(500):
        progress, (first, finish, stalls), _ = _stream_scenario(rng, slow=False)
        stalled += bool(progress.stall_events)
        oracle_mismatch += (progress.first_byte_at, progress.finished_at, progress.stall_ticks) \
            != (first, finish, len(stalls))
    slow_runs = slow_detected = 0
    for _ in range(100):
        progress, (first, finish, stalls), nseg = _stream_scenario(rng, slow=True)
        if nseg < 3:
            continue
        slow_runs += 1
        slow_detected += progress.stall_ticks > 0 and progress.stall_ticks == len(stalls)
    from conftest import World
    clip = encode_container(synthetic_asset("w", *QCIF, 15, 30))
    w = World({"w": clip}, nodes=(("n1", 10, 1000),), prefetch_seconds=0, segment_size_bytes=65536)
    w.play("w")
    w.run()
    engine_stalls = len(w.events.of_kind("stall"))
    engine_ok = engine_stalls > 0 and sum(w.manager.metrics.stall_time) > 0
    elapsed = time.perf_counter() - t0
    verdict("AC4 stream-while-fill",
            stalled == 0 and oracle_mismatch == 0 and slow_detected == slow_runs > 0 and engine_ok,
            f"500 fill>=drain runs with {stalled} stalled, {oracle_mismatch} oracle mismatches; "
            f"fill<drain: {slow_detected}/{slow_runs} stalled as predicted; "
            f"engine slow-node run logged {engine_stalls} stall events",
            elapsed, 30)


def test_ac5_startup_delay_ordering(verdict):
    t0 = time.perf_counter()
    lines, ok = [], True
    for name, raw in delay_scenarios():
        sim = Simulation(load_config(raw))
        sim.run()
        sessions = sim.manager.sessions
        hits = [s.startup_delay for s in sessions if s.hit and s.startup_delay is not None]
        misses = [s.startup_delay for s in sessions if s.hit is False and s.startup_delay is not None]
        first = {}
        repeat_bad = repeats = 0
        for s in sessions:
            if s.startup_delay is None:
                continue
            if s.video_id not in first:
                first[s.video_id] = s
            elif s.hit and s.hit_complete:
                repeats += 1
                repeat_bad += not s.startup_delay < first[s.video_id].startup_delay
        med_ok = bool(hits) and bool(misses) and statistics.median(hits) < statistics.median(misses)
        ok &= med_ok and repeat_bad == 0 and repeats > 0
        lines.append(f"{name}: hit med {statistics.median(hits) if hits else None} < miss med "
                     f"{statistics.median(misses) if misses else None}, {repeats - repeat_bad}/{repeats} repeats faster")
    elapsed = time.perf_counter() - t0
    verdict("AC5 startup-delay ordering", ok, "; ".join(lines), elapsed)


def test_ac6_cache_shadow_model(verdict):
    t0 = time.perf_counter()
    checked = run_cache_trace(seed=6, ops=10_000)
    elapsed = time.perf_counter() - t0
    verdict("AC6 cache LRU/accounting", checked == 10_000,
            f"{checked} operations matched the shadow model (victims, bytes, budget)", elapsed, 10)


def test_ac7_determinism(verdict, tmp_path):
    t0 = time.perf_counter()
    cfg = json.loads((EXAMPLES / "sim_small.json").read_text())
    cfg["nodes"][0]["fail_after_segments"] = 6
    cfg["fetch_timeout_s"] = 0.5
    path = tmp_path / "det.json"
    path.write_text(json.dumps(cfg))
    digests, reports = [], []
    for run in range(2):
        log = tmp_path / f"run{run}.ndjson"
        out = tmp_path / f"run{run}.json"
        subprocess.run(bbm_cmd() + ["simulate", "--config", str(path), "--log", str(log), "--out", str(out)],
                       check=True)
        digests.append(hashlib.sha256(log.read_bytes()).hexdigest())
        reports.append(out.read_bytes())
    lines = (tmp_path / "run0.ndjson").read_text().count("\n")
    elapsed = time.perf_counter() - t0
    verdict("AC7 determinism", digests[0] == digests[1] and reports[0] == reports[1] and lines > 100,
            f"two runs, {lines}-event logs, sha256 {digests[0][:16]} / {digests[1][:16]}", elapsed)


KILL_SCRIPT = textwrap.dedent("""
    import json, os, signal, sys
    from bbm.sim.harness import Simulation, load_config
    sim = Simulation(load_config(json.load(open(sys.argv[1]))))
    report = sim.run()
    print(json.dumps({"origin_bytes": report.origin_bytes, "completed": report.completed}), flush=True)
    os.kill(os.getpid(), signal.SIGKILL)
""")


def test_ac8_crash_safety(verdict, tmp_path):
    t0 = time.perf_counter()
    cache_dir = tmp_path / "cache"
    small = json.loads((EXAMPLES / "sim_small.json").read_text())
    trace = [{"tick": 40 * i, "video_id": v, "profile": p}
             for i, (v, p) in enumerate([("v0", "qcif15"), ("v1", "qcif15"), ("v2", "qcif10"), ("v1", "cif30")])]
    cfg = dict(small, cache_dir=str(cache_dir), workload={"model": "fixed", "trace": trace})
    path = tmp_path / "batch.json"
    path.write_text(json.dumps(cfg))
    proc = subprocess.run([sys.executable, "-c", KILL_SCRIPT, str(path)], capture_output=True, text=True)
    batch1 = json.loads(proc.stdout.strip().splitlines()[-1])
    killed = proc.returncode == -9
    # a second killed process that stops mid-fill must not leave partial entries behind
    partial = dict(cfg, duration_ticks=20, cache_dir=str(tmp_path / "partial"),
                   workload={"model": "fixed", "trace": [{"tick": 0, "video_id": "v2"}]})
    (tmp_path / "partial.json").write_text(json.dumps(partial))
    subprocess.run([sys.executable, "-c", KILL_SCRIPT, str(tmp_path / "partial.json")], capture_output=True)
    leftover = len(list((tmp_path / "partial").glob("*.seg")))
    restart_partial = Simulation(load_config(dict(partial, duration_ticks=None)))
    restored_partial = len(restart_partial.manager.cache)

    sim = Simulation(load_config(cfg))
    restored = len(sim.manager.cache)
    report = sim.run()
    elapsed = time.perf_counter() - t0
    ok = (killed and batch1["origin_bytes"] > 0 and batch1["completed"] == 4 and restored >= 3
          and report.origin_bytes == 0 and report.hits == 4 and report.completed == 4
          and leftover == 1 and restored_partial == 0)
    verdict("AC8 crash safety", ok,
            f"batch 1 fetched {batch1['origin_bytes']} B then SIGKILL (rc={proc.returncode}); "
            f"restart restored {restored} complete entries, batch 2 origin bytes={report.origin_bytes}, "
            f"hits={report.hits}/4; mid-fill kill left {leftover} partial file(s), {restored_partial} restored", elapsed)
