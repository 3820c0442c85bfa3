from __future__ import annotations

import bisect
import random
from dataclasses import dataclass
from typing import Sequence

from .config import WorkloadSpec


@dataclass(frozen=True)
class Request:
    tick: int
    video_id: str
    profile: str


def zipf_weights(n: int, exponent: float) -> list[float]:
    """Normalized popularity of ranks 1..n, proportional to rank ** -exponent."""
    raw = [r ** -exponent for r in range(1, n + 1)]
    total = sum(raw)
    return [w / total for w in raw]


def _cdf(weights: Sequence[float]) -> list[float]:
    cdf, acc = [], 0.0
    for w in weights:
        acc += w
        cdf.append(acc)
    cdf[-1] = 1.0
    return cdf


def _draw(rng: random.Random, cdf: list[float]) -> int:
    return min(bisect.bisect_right(cdf, rng.random()), len(cdf) - 1)


def generate_workload(spec: WorkloadSpec, seed: int, catalog: Sequence[str] = ()) -> list[Request]:
    if spec.model == "fixed":
        return sorted((Request(t.tick, t.video_id, t.profile) for t in spec.trace),
                      key=lambda r: r.tick)
    ids = list(catalog)[:spec.catalog_size] if spec.catalog_size else list(catalog)
    if spec.request_count and not ids:
        raise ValueError("zipf workload needs catalog video ids")
    rng = random.Random(seed)
    video_cdf = _cdf(zipf_weights(len(ids), spec.exponent)) if ids else []
    profiles = list(spec.profile_mix)
    profile_cdf = _cdf([spec.profile_mix[p] / sum(spec.profile_mix.values()) for p in profiles])
    trace = []
    for k in range(spec.request_count):
        video = ids[_draw(rng, video_cdf)]
        profile = profiles[_draw(rng, profile_cdf)]
        trace.append(Request(k * spec.inter_arrival_ticks, video, profile))
    return trace
