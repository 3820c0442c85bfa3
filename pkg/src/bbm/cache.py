"""Segment-granularity video cache with LRU eviction under a byte budget."""
from __future__ import annotations

import enum
import hashlib
import logging
import os
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterator, Optional

from .media import FormatVariantKey

log = logging.getLogger(__name__)

DEFAULT_SEGMENT_SIZE = 256 * 1024
MANIFEST_HEADER = "bbm-manifest v1"
MANIFEST_NAME = "manifest.txt"

Key = tuple[str, FormatVariantKey]


class CacheError(Exception):
    pass


class InsufficientBudget(CacheError):
    def __init__(self, needed: int, available: int):
        super().__init__(f"need {needed} bytes, only {available} can be freed")
        self.needed = needed
        self.available = available


class AlreadyComplete(CacheError):
    pass


class FillInProgress(CacheError):
    pass


class OutOfRange(CacheError):
    pass


class SizeMismatch(CacheError):
    pass


class DuplicateSegment(CacheError):
    pass


class SegmentNotPresent(CacheError):
    pass


class CorruptManifest(CacheError):
    pass


class EntryState(enum.Enum):
    FILLING = "filling"
    COMPLETE = "complete"


def key_hash(video_id: str, variant: FormatVariantKey) -> str:
    return hashlib.sha256(f"{video_id}|{variant}".encode()).hexdigest()[:16]


@dataclass(eq=False)
class CacheEntry:
    video_id: str
    variant: FormatVariantKey
    segment_size: int
    total_bytes: int
    last_access: int = 0
    pin_count: int = 0
    filler_active: bool = False
    present: list[bool] = field(default_factory=list)
    state: EntryState = EntryState.FILLING
    # in-memory segment payloads; unused when the store is disk-backed
    blobs: dict[int, bytes] = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if not self.present:
            self.present = [False] * self.total_segments
        if all(self.present):
            self.state = EntryState.COMPLETE

    @property
    def key(self) -> Key:
        return (self.video_id, self.variant)

    @property
    def total_segments(self) -> int:
        return -(-self.total_bytes // self.segment_size)

    @property
    def complete(self) -> bool:
        return self.state is EntryState.COMPLETE

    @property
    def segments_present(self) -> int:
        return sum(self.present)

    def segment_length(self, index: int) -> int:
        if index == self.total_segments - 1:
            return self.total_bytes - index * self.segment_size
        return self.segment_size

    @property
    def stored_bytes(self) -> int:
        count = self.segments_present
        if count and self.present[-1]:
            return (count - 1) * self.segment_size + self.segment_length(self.total_segments - 1)
        return count * self.segment_size

    def has(self, index: int) -> bool:
        return 0 <= index < len(self.present) and self.present[index]

    def contiguous_prefix(self) -> int:
        """Number of leading segments present."""
        n = 0
        for bit in self.present:
            if not bit:
                break
            n += 1
        return n


@dataclass
class FillHandle:
    entry: CacheEntry
    open: bool = True


class CacheStore:
    """Index table of cached variants.

    ``byte_budget=None`` means unbounded. With a ``root`` directory every
    entry's segments live in one file named by :func:`key_hash`, and the
    manifest is rewritten whenever an entry completes or is evicted.
    """

    def __init__(self, byte_budget: Optional[int] = None,
                 segment_size: int = DEFAULT_SEGMENT_SIZE,
                 root: Optional[os.PathLike] = None,
                 clock: Callable[[], int] = lambda: 0):
        if segment_size <= 0:
            raise ValueError("segment_size must be positive")
        self.byte_budget = byte_budget
        self.segment_size = segment_size
        self.root = Path(root) if root is not None else None
        self.clock = clock
        self.entries: dict[Key, CacheEntry] = {}
        self.evictions: list[Key] = []
        self._lock = threading.RLock()
        if self.root is not None:
            self.root.mkdir(parents=True, exist_ok=True)

    # accounting

    @property
    def bytes_used(self) -> int:
        return sum(e.stored_bytes for e in self.entries.values())

    @property
    def committed_bytes(self) -> int:
        """Bytes reserved by all entries, counting in-progress fills at full size."""
        return sum(e.total_bytes for e in self.entries.values())

    def free_bytes(self) -> Optional[int]:
        if self.byte_budget is None:
            return None
        return self.byte_budget - self.committed_bytes

    def __contains__(self, key: Key) -> bool:
        return key in self.entries

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self) -> Iterator[CacheEntry]:
        return iter(list(self.entries.values()))

    def variants(self, video_id: str) -> list[CacheEntry]:
        with self._lock:
            return [e for e in self.entries.values() if e.video_id == video_id]

    def peek(self, video_id: str, variant: FormatVariantKey) -> Optional[CacheEntry]:
        return self.entries.get((video_id, variant))

    # lookup / pinning

    def lookup(self, video_id: str, variant: FormatVariantKey) -> Optional[CacheEntry]:
        """Return the entry for the key (pinned, access stamped) or None on a miss."""
        with self._lock:
            entry = self.entries.get((video_id, variant))
            if entry is None:
                return None
            entry.last_access = self.clock()
            entry.pin_count += 1
            return entry

    def release(self, entry: CacheEntry) -> None:
        with self._lock:
            if entry.pin_count <= 0:
                raise CacheError(f"release of unpinned entry {entry.key}")
            entry.pin_count -= 1

    # filling

    def begin_fill(self, video_id: str, variant: FormatVariantKey, total_bytes: int) -> FillHandle:
        with self._lock:
            key = (video_id, variant)
            entry = self.entries.get(key)
            if entry is not None:
                if entry.complete:
                    raise AlreadyComplete(f"{video_id} {variant} is already cached")
                if entry.filler_active:
                    raise FillInProgress(f"{video_id} {variant} already has a filler")
                if entry.total_bytes != total_bytes:
                    # origin object changed size; restart from scratch
                    self._drop(entry)
                    entry = None
            reserved = entry.total_bytes if entry is not None else 0
            needed = total_bytes - reserved
            if self.byte_budget is not None and needed > self.byte_budget - self.committed_bytes:
                if entry is not None:
                    entry.pin_count += 1  # keep the partial fill out of the victim set
                try:
                    self.evict_until(needed)
                finally:
                    if entry is not None:
                        entry.pin_count -= 1
                free = self.byte_budget - self.committed_bytes
                if needed > free:
                    raise InsufficientBudget(needed, free)
            if entry is None:
                entry = CacheEntry(video_id, variant, self.segment_size, total_bytes)
                self.entries[key] = entry
                if self.root is not None:
                    with open(self._path(entry), "wb") as fh:
                        fh.truncate(total_bytes)
            entry.pin_count += 1
            entry.filler_active = True
            entry.last_access = self.clock()
            if entry.total_segments == 0:
                entry.state = EntryState.COMPLETE
            return FillHandle(entry)

    def write_segment(self, handle: FillHandle, index: int, data: bytes) -> None:
        with self._lock:
            entry = handle.entry
            if not handle.open:
                raise CacheError("fill handle is closed")
            if not 0 <= index < entry.total_segments:
                raise OutOfRange(f"segment {index} outside 0..{entry.total_segments - 1}")
            if len(data) != entry.segment_length(index):
                raise SizeMismatch(
                    f"segment {index} is {len(data)} bytes, expected {entry.segment_length(index)}")
            if entry.present[index]:
                if self._read(entry, index) == bytes(data):
                    return
                raise DuplicateSegment(f"segment {index} rewritten with different bytes")
            self._write(entry, index, bytes(data))
            entry.present[index] = True
            if all(entry.present):
                entry.state = EntryState.COMPLETE
                self._persist_manifest()

    def finish_fill(self, handle: FillHandle) -> None:
        """Close a fill handle, releasing the filler's pin. Safe to call twice."""
        with self._lock:
            if not handle.open:
                return
            handle.open = False
            handle.entry.filler_active = False
            handle.entry.pin_count -= 1

    abort_fill = finish_fill

    def insert(self, video_id: str, variant: FormatVariantKey, data: bytes) -> CacheEntry:
        """Store a whole object at once (used for transcoded variants)."""
        handle = self.begin_fill(video_id, variant, len(data))
        try:
            seg = self.segment_size
            for i in range(handle.entry.total_segments):
                if not handle.entry.present[i]:
                    self.write_segment(handle, i, data[i * seg:(i + 1) * seg])
        finally:
            self.finish_fill(handle)
        return handle.entry

    def read_segment(self, entry: CacheEntry, index: int) -> bytes:
        with self._lock:
            if not entry.has(index):
                raise SegmentNotPresent(f"{entry.video_id} {entry.variant} segment {index}")
            return self._read(entry, index)

    def read_all(self, entry: CacheEntry) -> bytes:
        return b"".join(self.read_segment(entry, i) for i in range(entry.total_segments))

    # eviction

    def evict_until(self, needed_bytes: int) -> list[Key]:
        """Evict least-recently-used unpinned entries until ``needed_bytes`` fit."""
        with self._lock:
            evicted: list[Key] = []
            if self.byte_budget is None:
                return evicted
            while self.byte_budget - self.committed_bytes < needed_bytes:
                victims = [e for e in self.entries.values() if e.pin_count == 0]
                if not victims:
                    break
                victim = min(victims, key=lambda e: (e.last_access, e.video_id, e.variant))
                self._drop(victim)
                evicted.append(victim.key)
                log.debug("evicted %s %s", victim.video_id, victim.variant)
            self.evictions.extend(evicted)
            if evicted:
                self._persist_manifest()
            return evicted

    def _drop(self, entry: CacheEntry) -> None:
        del self.entries[entry.key]
        if self.root is not None:
            try:
                self._path(entry).unlink()
            except FileNotFoundError:
                pass

    # storage backends

    def _path(self, entry: CacheEntry) -> Path:
        assert self.root is not None
        return self.root / f"{key_hash(entry.video_id, entry.variant)}.seg"

    def _write(self, entry: CacheEntry, index: int, data: bytes) -> None:
        if self.root is None:
            entry.blobs[index] = data
            return
        with open(self._path(entry), "r+b") as fh:
            fh.seek(index * entry.segment_size)
            fh.write(data)

    def _read(self, entry: CacheEntry, index: int) -> bytes:
        if self.root is None:
            return entry.blobs[index]
        with open(self._path(entry), "rb") as fh:
            fh.seek(index * entry.segment_size)
            return fh.read(entry.segment_length(index))

    # manifest

    @property
    def manifest_path(self) -> Optional[Path]:
        return self.root / MANIFEST_NAME if self.root is not None else None

    def _persist_manifest(self) -> None:
        if self.root is not None:
            self.save_manifest()

    def save_manifest(self) -> None:
        if self.root is None:
            raise CacheError("cache has no directory to save a manifest in")
        with self._lock:
            lines = [MANIFEST_HEADER]
            for e in self.entries.values():
                if e.complete:
                    lines.append(f"{key_hash(e.video_id, e.variant)} {e.video_id} "
                                 f"{e.variant} {e.total_bytes} {e.last_access}")
            tmp = self.manifest_path.with_suffix(".tmp")
            tmp.write_text("\n".join(lines) + "\n", encoding="utf-8")
            os.replace(tmp, self.manifest_path)

    def load_manifest(self) -> int:
        """Reload Complete entries from disk; returns how many were restored.

        A corrupt manifest leaves the cache empty. Filling entries never
        survive a restart.
        """
        if self.root is None or not self.manifest_path.exists():
            return 0
        with self._lock:
            self.entries.clear()
            try:
                records = parse_manifest(self.manifest_path.read_text(encoding="utf-8"))
            except (CorruptManifest, UnicodeDecodeError) as exc:
                log.warning("ignoring corrupt cache manifest %s: %s", self.manifest_path, exc)
                return 0
            for digest, video_id, variant, total, last_access in records:
                entry = CacheEntry(video_id, variant, self.segment_size, total,
                                   last_access=last_access, present=[True] * -(-total // self.segment_size))
                entry.state = EntryState.COMPLETE
                path = self._path(entry)
                if digest != key_hash(video_id, variant) or not path.exists() \
                        or path.stat().st_size != total:
                    log.warning("dropping manifest record for %s %s: payload missing", video_id, variant)
                    continue
                self.entries[entry.key] = entry
            # stray payload files from fills that never completed
            keep = {self._path(e).name for e in self.entries.values()}
            for path in self.root.glob("*.seg"):
                if path.name not in keep:
                    path.unlink()
            if self.byte_budget is not None:
                self.evict_until(0)
            return len(self.entries)


def parse_manifest(text: str) -> list[tuple[str, str, FormatVariantKey, int, int]]:
    lines = text.split("\n")
    if not lines or lines[0] != MANIFEST_HEADER:
        raise CorruptManifest("missing manifest header")
    if lines[-1] != "":
        raise CorruptManifest("manifest lacks trailing newline")
    records = []
    for lineno, line in enumerate(lines[1:-1], start=2):
        parts = line.split(" ")
        if len(parts) != 5:
            raise CorruptManifest(f"line {lineno}: expected 5 fields")
        digest, video_id, variant, total, last_access = parts
        try:
            records.append((digest, video_id, FormatVariantKey.parse(variant),
                            int(total), int(last_access)))
        except ValueError as exc:
            raise CorruptManifest(f"line {lineno}: {exc}") from exc
    return records
