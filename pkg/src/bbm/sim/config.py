"""Simulation configuration and report schemas."""
from __future__ import annotations

import hashlib
import json
from typing import Literal, Optional, Union

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from ..cache import DEFAULT_SEGMENT_SIZE
from ..media import frame_size, HEADER_SIZE


class VideoSpec(BaseModel):
    model_config = ConfigDict(extra="forbid")

    width: int = Field(gt=0, le=0xFFFF)
    height: int = Field(gt=0, le=0xFFFF)
    fps: int = Field(ge=1, le=255)
    frame_count: int = Field(ge=0)
    codec_id: int = Field(default=1, ge=0, le=255)

    @property
    def container_size(self) -> int:
        return HEADER_SIZE + self.frame_count * frame_size(self.width, self.height)


class NodeSpec(BaseModel):
    model_config = ConfigDict(extra="forbid")

    id: str = Field(min_length=1, pattern=r"^\S+$")
    latency_ms: int = Field(ge=0)
    capacity_kbps: int = Field(gt=0)
    signal_db: int = 0
    storage_bytes: int = Field(default=0, ge=0)
    videos: Union[Literal["all"], list[str]] = "all"
    fail_after_segments: Optional[int] = Field(default=None, ge=0)


class TraceItem(BaseModel):
    model_config = ConfigDict(extra="forbid")

    tick: int = Field(ge=0)
    video_id: str = Field(min_length=1, pattern=r"^\S+$")
    profile: str = "qcif15"


class WorkloadSpec(BaseModel):
    model_config = ConfigDict(extra="forbid")

    model: Literal["fixed", "zipf"] = "zipf"
    trace: list[TraceItem] = Field(default_factory=list)
    exponent: float = 1.0
    catalog_size: Optional[int] = Field(default=None, gt=0)
    request_count: int = Field(default=0, ge=0)
    inter_arrival_ticks: int = Field(default=10, ge=0)
    profile_mix: dict[str, int] = Field(default_factory=lambda: {"qcif15": 1})

    @field_validator("exponent")
    @classmethod
    def _positive_exponent(cls, v: float) -> float:
        if not v > 0:
            raise ValueError("Zipf exponent must be > 0")
        return v

    @field_validator("profile_mix")
    @classmethod
    def _mix(cls, v: dict[str, int]) -> dict[str, int]:
        if not v or any(w < 0 for w in v.values()) or sum(v.values()) <= 0:
            raise ValueError("profile_mix needs non-negative weights with a positive sum")
        return v


class SimConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    seed: int = 0
    tick_ms: int = Field(default=10, gt=0)
    nodes: list[NodeSpec] = Field(min_length=1)
    catalog: dict[str, VideoSpec] = Field(default_factory=dict)
    client_link_kbps: int = Field(default=50_000, gt=0)
    workload: WorkloadSpec = Field(default_factory=WorkloadSpec)
    duration_ticks: Optional[int] = Field(default=None, gt=0)
    cache_enabled: bool = True
    cache_budget_bytes: Optional[int] = Field(default=None, ge=0)
    cache_dir: Optional[str] = None
    segment_size_bytes: int = Field(default=DEFAULT_SEGMENT_SIZE, gt=0)
    prefetch_seconds: float = Field(default=2.0, ge=0)
    fetch_timeout_s: float = Field(default=5.0, gt=0)
    telemetry_interval_s: int = Field(default=5, gt=0)
    telemetry_staleness_s: Optional[int] = Field(default=None, gt=0)
    pace_cap_kbps: Optional[int] = Field(default=None, gt=0)
    burst: bool = False
    pipeline_depth: int = Field(default=1, ge=1)
    max_retries: int = Field(default=1, ge=0)
    profiles: dict[str, dict] = Field(default_factory=dict)

    @model_validator(mode="after")
    def _cross_checks(self) -> "SimConfig":
        ids = [n.id for n in self.nodes]
        if len(set(ids)) != len(ids):
            raise ValueError("node ids must be unique")
        for node in self.nodes:
            if node.videos != "all":
                missing = sorted(set(node.videos) - set(self.catalog))
                if missing:
                    raise ValueError(f"node {node.id} hosts videos missing from catalog: {missing}")
        if self.workload.model == "zipf" and self.workload.request_count and not self.catalog:
            raise ValueError("a zipf workload needs a non-empty catalog")
        return self

    @property
    def staleness_ms(self) -> int:
        seconds = self.telemetry_staleness_s or 3 * self.telemetry_interval_s
        return seconds * 1000

    def fingerprint(self) -> dict:
        """Identity of what is being compared: catalog, workload and seed."""
        catalog = json.dumps({k: v.model_dump() for k, v in self.catalog.items()}, sort_keys=True)
        workload = self.workload.model_dump_json()
        return {
            "seed": self.seed,
            "catalog_sha256": hashlib.sha256(catalog.encode()).hexdigest()[:16],
            "workload_sha256": hashlib.sha256(workload.encode()).hexdigest()[:16],
        }


class DelaySummary(BaseModel):
    count: int = 0
    mean: Optional[float] = None
    median: Optional[float] = None


class SimReport(BaseModel):
    requests: int = 0
    hits: int = 0
    misses: int = 0
    not_found: int = 0
    completed: int = 0
    failed: int = 0
    hit_rate: float = 0.0
    origin_bytes: int = 0
    client_bytes: int = 0
    origin_equivalent_bytes: int = 0
    bandwidth_saved_ratio: float = 0.0
    startup_delay_hit: DelaySummary = Field(default_factory=DelaySummary)
    startup_delay_miss: DelaySummary = Field(default_factory=DelaySummary)
    total_stall_ticks: int = 0
    stalled_sessions: int = 0
    transcode_count: int = 0
    coalesced_joins: int = 0
    per_node_fetch_counts: dict[str, int] = Field(default_factory=dict)
    per_node_segments: dict[str, int] = Field(default_factory=dict)
    ticks: int = 0
    tick_ms: int = 10
    cache_enabled: bool = True
    fingerprint: dict = Field(default_factory=dict)
