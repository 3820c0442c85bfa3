"""Line-oriented wire formats: origin range protocol and client delivery framing."""
from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Iterator, Optional, Union

FRAME_LEN = struct.Struct(">I")
END_FRAME = FRAME_LEN.pack(0)

STATUS_NOT_AVAILABLE = "404 NOT_AVAILABLE"
STATUS_FETCH_FAILED = "500 FETCH_FAILED"
STATUS_FORMAT_UNSUPPORTED = "501 FORMAT_UNSUPPORTED"
STATUS_BAD_REQUEST = "400 BAD_REQUEST"


class ProtocolError(ValueError):
    pass


@dataclass(frozen=True)
class RangeRequest:
    video_id: str
    byte_start: int
    byte_end_inclusive: int

    def __post_init__(self):
        if not 0 <= self.byte_start <= self.byte_end_inclusive:
            raise ValueError(f"bad range {self.byte_start}-{self.byte_end_inclusive}")

    @property
    def length(self) -> int:
        return self.byte_end_inclusive - self.byte_start + 1

    def to_line(self) -> str:
        return f"GET {self.video_id} RANGE {self.byte_start}-{self.byte_end_inclusive}"

    def http_header(self) -> str:
        return f"bytes={self.byte_start}-{self.byte_end_inclusive}"


@dataclass(frozen=True)
class SizeRequest:
    video_id: str

    def to_line(self) -> str:
        return f"SIZE {self.video_id}"


def _token(text: str) -> str:
    if not text or any(c.isspace() for c in text):
        raise ProtocolError(f"invalid token {text!r}")
    return text


def parse_origin_request(line: str) -> Union[RangeRequest, SizeRequest]:
    parts = line.strip().split(" ")
    if len(parts) == 2 and parts[0] == "SIZE":
        return SizeRequest(_token(parts[1]))
    if len(parts) == 4 and parts[0] == "GET" and parts[2] == "RANGE":
        start, sep, end = parts[3].partition("-")
        if not sep or not start.isdigit() or not end.isdigit():
            raise ProtocolError(f"bad range spec {parts[3]!r}")
        try:
            return RangeRequest(_token(parts[1]), int(start), int(end))
        except ValueError as exc:
            raise ProtocolError(str(exc)) from exc
    raise ProtocolError(f"unrecognised origin request {line!r}")


@dataclass(frozen=True)
class OriginResponse:
    status: int
    body: bytes = b""
    total_bytes: Optional[int] = None

    def encode(self) -> bytes:
        if self.status == 206:
            return f"206 {len(self.body)}\n".encode() + self.body
        if self.status == 200:
            return f"200 {self.total_bytes}\n".encode()
        return f"{self.status}\n".encode()

    @classmethod
    def decode(cls, data: bytes) -> "OriginResponse":
        head, sep, rest = data.partition(b"\n")
        if not sep:
            raise ProtocolError("origin response lacks a status line")
        parts = head.decode("ascii").split(" ")
        status = int(parts[0])
        if status == 206:
            length = int(parts[1])
            if len(rest) != length:
                raise ProtocolError(f"206 declares {length} bytes, got {len(rest)}")
            return cls(206, rest)
        if status == 200:
            return cls(200, total_bytes=int(parts[1]))
        return cls(status)


def serve_origin_request(line: str, store: dict[str, bytes]) -> OriginResponse:
    """Reference origin behaviour over an in-memory object store."""
    try:
        req = parse_origin_request(line)
    except ProtocolError:
        return OriginResponse(400)
    data = store.get(req.video_id)
    if data is None:
        return OriginResponse(404)
    if isinstance(req, SizeRequest):
        return OriginResponse(200, total_bytes=len(data))
    if req.byte_end_inclusive >= len(data):
        return OriginResponse(416)
    return OriginResponse(206, data[req.byte_start:req.byte_end_inclusive + 1])


# client side

@dataclass(frozen=True)
class PlayCommand:
    video_id: str
    profile_id: str


@dataclass(frozen=True)
class StatsCommand:
    pass


def parse_client_request(line: str) -> Union[PlayCommand, StatsCommand]:
    parts = line.strip().split(" ")
    if parts == ["STATS"]:
        return StatsCommand()
    if len(parts) == 4 and parts[0] == "PLAY" and parts[2] == "PROFILE":
        return PlayCommand(_token(parts[1]), _token(parts[3]))
    raise ProtocolError(f"unrecognised client request {line!r}")


def play_line(video_id: str, profile_id: str) -> str:
    return f"PLAY {video_id} PROFILE {profile_id}"


def stream_header(video_id: str, variant: str, total_bytes: int, segment_size: int) -> bytes:
    return f"STREAM {video_id} {variant} {total_bytes} {segment_size}\n".encode()


def encode_frame(data: bytes) -> bytes:
    return FRAME_LEN.pack(len(data)) + data


@dataclass
class StreamReply:
    status: str
    video_id: str = ""
    variant: str = ""
    total_bytes: int = 0
    segment_size: int = 0
    segments: list[bytes] = None
    terminated: bool = False

    @property
    def ok(self) -> bool:
        return self.status == "STREAM"

    @property
    def payload(self) -> bytes:
        return b"".join(self.segments or ())


def iter_frames(data: bytes) -> Iterator[bytes]:
    pos = 0
    while pos + FRAME_LEN.size <= len(data):
        (length,) = FRAME_LEN.unpack_from(data, pos)
        pos += FRAME_LEN.size
        if length == 0:
            return
        if pos + length > len(data):
            raise ProtocolError("truncated frame")
        yield data[pos:pos + length]
        pos += length
    raise ProtocolError("stream ended without terminator frame")


def decode_reply(data: bytes) -> StreamReply:
    """Parse a complete client response (status line, or STREAM header plus frames)."""
    head, sep, rest = data.partition(b"\n")
    line = head.decode("utf-8")
    if not line.startswith("STREAM "):
        return StreamReply(status=line)
    parts = line.split(" ")
    if len(parts) != 5:
        raise ProtocolError(f"bad STREAM header {line!r}")
    reply = StreamReply("STREAM", parts[1], parts[2], int(parts[3]), int(parts[4]), [])
    try:
        for frame in iter_frames(rest):
            reply.segments.append(frame)
        reply.terminated = True
    except ProtocolError:
        reply.terminated = False
    return reply
