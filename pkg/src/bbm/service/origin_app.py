"""Minimal HTTP origin node serving BBMV objects with byte-range support."""
from __future__ import annotations

import re
from pathlib import Path
from typing import Mapping, Optional

from fastapi import FastAPI, Header, Response

RANGE_RE = re.compile(r"^bytes=(\d+)-(\d+)$")


def load_objects(directory: str | Path) -> dict[str, bytes]:
    """Every ``*.bbmv`` file in ``directory``, keyed by file stem."""
    return {p.stem: p.read_bytes() for p in sorted(Path(directory).glob("*.bbmv"))}


def create_origin_app(objects: Mapping[str, bytes]) -> FastAPI:
    app = FastAPI(title="bbm origin node")

    @app.get("/health")
    @app.head("/health")
    def health():
        return {"ok": True}

    @app.head("/videos/{video_id}")
    def size(video_id: str):
        data = objects.get(video_id)
        if data is None:
            return Response(status_code=404)
        return Response(status_code=200, headers={"content-length": str(len(data)),
                                                  "accept-ranges": "bytes"})

    @app.get("/videos/{video_id}")
    def get(video_id: str, range: Optional[str] = Header(default=None)):
        data = objects.get(video_id)
        if data is None:
            return Response(status_code=404)
        if range is None:
            return Response(data, media_type="application/octet-stream")
        m = RANGE_RE.match(range)
        if not m:
            return Response(status_code=416)
        start, end = int(m.group(1)), int(m.group(2))
        if start > end or end >= len(data):
            return Response(status_code=416, headers={"content-range": f"bytes */{len(data)}"})
        return Response(data[start:end + 1], status_code=206, media_type="application/octet-stream",
                        headers={"content-range": f"bytes {start}-{end}/{len(data)}"})

    @app.get("/videos")
    def listing():
        return sorted(objects)

    return app
