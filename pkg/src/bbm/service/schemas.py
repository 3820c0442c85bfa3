from typing import Optional

from pydantic import BaseModel, Field


class PlayRequest(BaseModel):
    video_id: str = Field(min_length=1, pattern=r"^\S+$")
    profile_id: str = Field(min_length=1, pattern=r"^\S+$")
    link_kbps: Optional[float] = Field(default=None, gt=0)


class TelemetryIn(BaseModel):
    node_id: str
    ts: int
    capacity_kbps: int = Field(gt=0)
    storage_bytes: int = Field(ge=0)
    add_videos: list[str] = Field(default_factory=list)
    remove_videos: list[str] = Field(default_factory=list)


class TelemetryResult(BaseModel):
    applied: int
    stale: int
    unknown: list[str] = Field(default_factory=list)


class DelayStats(BaseModel):
    count: int
    mean: Optional[float] = None
    median: Optional[float] = None
    max: Optional[int] = None


class MetricsOut(BaseModel):
    requests: int
    cache_hits: int
    cache_misses: int
    not_found: int
    completed: int
    failed: int
    origin_bytes: int
    client_bytes: int
    transcode_count: int
    coalesced_joins: int
    cache_bypasses: int
    bandwidth_below_playback: int
    startup_delay: DelayStats
    startup_delay_hit: DelayStats
    startup_delay_miss: DelayStats
    stall_time: DelayStats


class CacheEntryOut(BaseModel):
    video_id: str
    variant: str
    state: str
    total_bytes: int
    stored_bytes: int
    segments: str
    last_access: int
    pins: int


class NodeOut(BaseModel):
    node_id: str
    address: str
    route_time_ms: int
    channel_capacity_kbps: int
    signal_strength_db: int
    available_storage_bytes: int
    last_telemetry: int
    fresh: bool
    hosted_videos: list[str]
