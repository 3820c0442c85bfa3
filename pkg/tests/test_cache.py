import logging

import pytest
from hypothesis import given, settings, strategies as st

from bbm.cache import (AlreadyComplete, CacheError, CacheStore, DuplicateSegment, EntryState,
                       FillInProgress, InsufficientBudget, OutOfRange, SegmentNotPresent,
                       SizeMismatch, key_hash, parse_manifest, CorruptManifest)
from bbm.media import FormatVariantKey

from oracles import run_cache_trace

V = FormatVariantKey(1, 176, 144, 15)
W = FormatVariantKey(1, 352, 288, 30)


def fill(store, vid, data, variant=V):
    return store.insert(vid, variant, data)


def test_segmented_fill_lifecycle():
    store = CacheStore(segment_size=4)
    h = store.begin_fill("a", V, 10)
    e = h.entry
    assert e.total_segments == 3 and [e.segment_length(i) for i in range(3)] == [4, 4, 2]
    assert e.state is EntryState.FILLING and e.filler_active and e.pin_count == 1
    store.write_segment(h, 2, b"ij")
    assert e.contiguous_prefix() == 0 and e.stored_bytes == 2
    store.write_segment(h, 0, b"abcd")
    assert e.contiguous_prefix() == 1
    with pytest.raises(SegmentNotPresent):
        store.read_segment(e, 1)
    store.write_segment(h, 1, b"efgh")
    assert e.complete and e.stored_bytes == 10
    store.finish_fill(h)
    store.finish_fill(h)
    assert e.pin_count == 0 and not e.filler_active
    assert store.read_all(e) == b"abcdefghij"


def test_write_errors():
    store = CacheStore(segment_size=4)
    h = store.begin_fill("a", V, 10)
    with pytest.raises(OutOfRange):
        store.write_segment(h, 3, b"xx")
    with pytest.raises(SizeMismatch):
        store.write_segment(h, 0, b"abc")
    store.write_segment(h, 0, b"abcd")
    store.write_segment(h, 0, b"abcd")  # identical rewrite is harmless
    with pytest.raises(DuplicateSegment):
        store.write_segment(h, 0, b"abce")
    with pytest.raises(FillInProgress):
        store.begin_fill("a", V, 10)
    store.finish_fill(h)
    with pytest.raises(CacheError):
        store.write_segment(h, 1, b"efgh")


def test_already_complete_and_restart():
    store = CacheStore(segment_size=4)
    fill(store, "a", b"x" * 8)
    with pytest.raises(AlreadyComplete):
        store.begin_fill("a", V, 8)
    h = store.begin_fill("b", V, 8)
    store.write_segment(h, 0, b"1234")
    store.abort_fill(h)
    # a failed fill stays behind as a restartable partial entry
    h2 = store.begin_fill("b", V, 8)
    assert h2.entry is h.entry and h2.entry.has(0)
    store.write_segment(h2, 1, b"5678")
    assert h2.entry.complete


def test_lru_eviction_example():
    t = [0]
    store = CacheStore(byte_budget=30, segment_size=8, clock=lambda: t[0])
    for i, vid in enumerate("abc"):
        t[0] = i + 1
        fill(store, vid, bytes(10))
    t[0] = 10
    store.release(store.lookup("a", V))  # a is now the most recent
    t[0] = 11
    fill(store, "d", bytes(10))
    assert store.evictions == [("b", V)]
    assert {k[0] for k in store.entries} == {"a", "c", "d"}


def test_pinned_entries_survive_and_budget_shortfall():
    store = CacheStore(byte_budget=20, segment_size=8)
    fill(store, "a", bytes(10))
    fill(store, "b", bytes(10))
    ea, eb = store.lookup("a", V), store.lookup("b", V)
    with pytest.raises(InsufficientBudget) as info:
        fill(store, "c", bytes(5))
    assert info.value.needed == 5 and info.value.available == 0
    store.release(ea)
    fill(store, "c", bytes(5))
    assert ("a", V) not in store and ("b", V) in store
    store.release(eb)
    with pytest.raises(CacheError):
        store.release(eb)


def test_reservation_counts_full_size():
    store = CacheStore(byte_budget=100, segment_size=8)
    h = store.begin_fill("a", V, 60)
    assert store.committed_bytes == 60 and store.bytes_used == 0
    with pytest.raises(InsufficientBudget):
        store.begin_fill("b", V, 50)  # the open fill is pinned
    store.finish_fill(h)
    store.begin_fill("b", V, 50)
    assert ("a", V) not in store


def test_variants_lookup():
    store = CacheStore(segment_size=8)
    fill(store, "a", bytes(3), V)
    fill(store, "a", bytes(5), W)
    assert {e.variant for e in store.variants("a")} == {V, W}
    assert store.lookup("a", FormatVariantKey(2, 1, 1, 1)) is None


def test_manifest_round_trip(tmp_path):
    t = [5]
    store = CacheStore(segment_size=4, root=tmp_path, clock=lambda: t[0])
    fill(store, "a", b"0123456789")
    h = store.begin_fill("b", W, 9)
    store.write_segment(h, 0, b"wxyz")
    text = store.manifest_path.read_text()
    files = sorted(p.name for p in tmp_path.glob("*.seg"))
    assert f"{key_hash('a', V)}.seg" in files and len(files) == 2
    assert text.startswith("bbm-manifest v1\n") and " b " not in text
    fresh = CacheStore(segment_size=4, root=tmp_path)
    assert fresh.load_manifest() == 1
    e = fresh.peek("a", V)
    assert e.complete and e.last_access == 5
    assert fresh.read_all(e) == b"0123456789"
    assert fresh.peek("b", W) is None
    assert sorted(p.name for p in tmp_path.glob("*.seg")) == [f"{key_hash('a', V)}.seg"]


def test_manifest_format(tmp_path):
    store = CacheStore(segment_size=4, root=tmp_path, clock=lambda: 7)
    fill(store, "a", b"abcde")
    text = store.manifest_path.read_text()
    assert text == f"bbm-manifest v1\n{key_hash('a', V)} a 1:176x144@15 5 7\n"
    assert parse_manifest(text) == [(key_hash("a", V), "a", V, 5, 7)]


@pytest.mark.parametrize("text", ["", "garbage\n", "bbm-manifest v1\nabc a 1:1x1@1 5\n",
                                  "bbm-manifest v1\nabc a notavariant 5 1\n",
                                  "bbm-manifest v1\nabc a 1:1x1@1 5 1"])
def test_corrupt_manifest(text):
    with pytest.raises(CorruptManifest):
        parse_manifest(text)


def test_corrupt_manifest_starts_empty(tmp_path, caplog):
    store = CacheStore(segment_size=4, root=tmp_path)
    fill(store, "a", b"abcde")
    store.manifest_path.write_text("bbm-manifest v1\nbroken\n")
    fresh = CacheStore(segment_size=4, root=tmp_path)
    with caplog.at_level(logging.WARNING):
        assert fresh.load_manifest() == 0
    assert len(fresh) == 0 and "corrupt" in caplog.text


def test_manifest_drops_missing_payload(tmp_path):
    store = CacheStore(segment_size=4, root=tmp_path)
    fill(store, "a", b"abcde")
    (tmp_path / f"{key_hash('a', V)}.seg").unlink()
    assert CacheStore(segment_size=4, root=tmp_path).load_manifest() == 0


def test_eviction_updates_manifest(tmp_path):
    t = [0]
    store = CacheStore(byte_budget=10, segment_size=4, root=tmp_path, clock=lambda: t[0])
    fill(store, "a", bytes(6))
    t[0] = 1
    fill(store, "b", bytes(6))
    records = parse_manifest(store.manifest_path.read_text())
    assert [r[1] for r in records] == ["b"]
    assert len(list(tmp_path.glob("*.seg"))) == 1


def test_shadow_trace_short():
    assert run_cache_trace(seed=1, ops=2000) == 2000


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), budget=st.integers(50, 500), keys=st.integers(2, 30))
def test_shadow_trace_property(seed, budget, keys):
    run_cache_trace(seed, ops=300, budget=budget, keys=keys, segment_size=7)
