from __future__ import annotations

import json
from typing import Callable, IO, Optional


class EventLog:
    """Newline-delimited JSON event sink stamped with the current tick."""

    def __init__(self, now: Callable[[], int], stream: Optional[IO[str]] = None, keep: bool = True):
        self.now = now
        self.stream = stream
        self.keep = keep
        self.events: list[dict] = []

    def emit(self, kind: str, **fields) -> None:
        event = {"tick": self.now(), "kind": kind, **fields}
        if self.keep:
            self.events.append(event)
        if self.stream is not None:
            self.stream.write(json.dumps(event, separators=(",", ":")) + "\n")

    def of_kind(self, kind: str) -> list[dict]:
        return [e for e in self.events if e["kind"] == kind]


class NullLog(EventLog):
    def __init__(self):
        super().__init__(lambda: 0, keep=False)

    def emit(self, kind: str, **fields) -> None:
        pass
