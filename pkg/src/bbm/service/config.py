"""Service configuration: a key=value file plus JSON node and profile rosters."""
from __future__ import annotations

import json
from pathlib import Path
from typing import Optional

from pydantic import BaseModel, Field, ValidationError

from ..cache import DEFAULT_SEGMENT_SIZE
from ..media import PRESETS, DeviceProfile
from ..orchestrator import ManagerConfig
from ..registry import NodeRecord


class ServiceConfigError(ValueError):
    pass


class RosterNode(BaseModel):
    node_id: str = Field(min_length=1, pattern=r"^\S+$")
    address: str
    latency_ms: int = Field(default=0, ge=0)
    signal_db: int = 0
    capacity_kbps: int = Field(default=1000, gt=0)
    videos: list[str] = Field(default_factory=list)

    def record(self) -> NodeRecord:
        return NodeRecord(self.node_id, address=self.address, signal_strength_db=self.signal_db,
                          channel_capacity_kbps=self.capacity_kbps, latency_ms=self.latency_ms,
                          hosted_videos=set(self.videos))


class ServiceConfig(BaseModel):
    cache_budget_bytes: Optional[int] = Field(default=None, ge=0)
    segment_size_bytes: int = Field(default=DEFAULT_SEGMENT_SIZE, gt=0)
    prefetch_seconds: float = Field(default=2.0, ge=0)
    telemetry_staleness_s: float = Field(default=15.0, gt=0)
    fetch_timeout_s: float = Field(default=5.0, gt=0)
    rng_seed: int = 0
    listen: str = "127.0.0.1:8700"
    node_roster: Optional[str] = None
    profile_roster: Optional[str] = None
    cache_dir: Optional[str] = None
    tick_ms: int = Field(default=10, gt=0)
    client_link_kbps: float = Field(default=50_000, gt=0)

    @property
    def host(self) -> str:
        return self.listen.rpartition(":")[0] or "127.0.0.1"

    @property
    def port(self) -> int:
        return int(self.listen.rpartition(":")[2])

    def manager_config(self) -> ManagerConfig:
        return ManagerConfig(
            cache_budget_bytes=self.cache_budget_bytes,
            segment_size_bytes=self.segment_size_bytes,
            prefetch_seconds=self.prefetch_seconds,
            telemetry_staleness_s=self.telemetry_staleness_s,
            fetch_timeout_s=self.fetch_timeout_s,
            rng_seed=self.rng_seed,
            tick_ms=self.tick_ms,
            client_link_kbps=self.client_link_kbps,
            cache_dir=self.cache_dir,
        )

    def nodes(self) -> list[RosterNode]:
        if not self.node_roster:
            return []
        data = json.loads(Path(self.node_roster).read_text())
        return [RosterNode.model_validate(n) for n in data]

    def profiles(self) -> dict[str, DeviceProfile]:
        profiles = dict(PRESETS)
        if self.profile_roster:
            for item in json.loads(Path(self.profile_roster).read_text()):
                profile = DeviceProfile(**item)
                profiles[profile.profile_id] = profile
        return profiles


def parse_kv(text: str) -> dict[str, str]:
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ServiceConfigError(f"line {lineno}: expected key=value")
        values[key.strip()] = value.strip()
    return values


def load_service_config(path: str | Path) -> ServiceConfig:
    path = Path(path)
    values = parse_kv(path.read_text())
    for key in ("node_roster", "profile_roster", "cache_dir"):
        if values.get(key) and not Path(values[key]).is_absolute():
            values[key] = str(path.parent / values[key])
    unknown = set(values) - set(ServiceConfig.model_fields)
    if unknown:
        raise ServiceConfigError(f"unknown config keys: {sorted(unknown)}")
    try:
        return ServiceConfig.model_validate(values)
    except ValidationError as exc:
        raise ServiceConfigError(str(exc)) from None
