"""Synthetic video container, device profiles and the reducing transcoder.

Frames are modelled as planar 4:2:0 byte blocks so every size in the
pipeline is exact integer arithmetic. The container ("BBMV") is a 15 byte
little-endian header followed by the frame payload.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

MAGIC = b"BBMV"
VERSION = 1
HEADER = struct.Struct("<4sBBHHBI")
HEADER_SIZE = HEADER.size  # 15

CIF = (352, 288)
QCIF = (176, 144)


class ContainerError(ValueError):
    pass


class BadMagic(ContainerError):
    pass


class BadVersion(ContainerError):
    pass


class TruncatedPayload(ContainerError):
    pass


class UpscaleRequested(ValueError):
    """The profile asks for a larger picture than the source has."""


def frame_size(width: int, height: int) -> int:
    return width * height * 3 // 2


@dataclass(frozen=True, order=True)
class FormatVariantKey:
    codec_id: int
    width: int
    height: int
    fps: int

    def __str__(self) -> str:
        return f"{self.codec_id}:{self.width}x{self.height}@{self.fps}"

    @classmethod
    def parse(cls, text: str) -> "FormatVariantKey":
        try:
            codec, rest = text.split(":", 1)
            dims, fps = rest.split("@", 1)
            width, height = dims.split("x", 1)
            return cls(int(codec), int(width), int(height), int(fps))
        except ValueError as exc:
            raise ValueError(f"bad variant {text!r}") from exc

    @property
    def pixels(self) -> int:
        return self.width * self.height


@dataclass(frozen=True)
class VideoAsset:
    video_id: str
    codec_id: int
    width: int
    height: int
    fps: int
    frame_count: int
    payload: bytes = b""

    def __post_init__(self):
        if self.width <= 0 or self.height <= 0:
            raise ValueError("width and height must be positive")
        if self.fps < 1:
            raise ValueError("fps must be >= 1")
        if self.frame_count < 0:
            raise ValueError("frame_count must be >= 0")
        if not 0 <= self.codec_id <= 0xFF or self.fps > 0xFF:
            raise ValueError("codec_id and fps must fit in one byte")
        if self.width > 0xFFFF or self.height > 0xFFFF:
            raise ValueError("dimensions must fit in two bytes")
        if len(self.payload) != self.frame_count * self.frame_size:
            raise ValueError(
                f"payload is {len(self.payload)} bytes, expected "
                f"{self.frame_count} x {self.frame_size}"
            )

    @property
    def frame_size(self) -> int:
        return frame_size(self.width, self.height)

    @property
    def variant(self) -> FormatVariantKey:
        return FormatVariantKey(self.codec_id, self.width, self.height, self.fps)

    @property
    def container_size(self) -> int:
        return HEADER_SIZE + len(self.payload)

    def frame(self, index: int) -> bytes:
        size = self.frame_size
        return self.payload[index * size:(index + 1) * size]


@dataclass(frozen=True)
class DeviceProfile:
    profile_id: str
    codec_id: int
    target_width: int
    target_height: int
    max_fps: int

    def __post_init__(self):
        if min(self.target_width, self.target_height, self.max_fps) <= 0:
            raise ValueError("profile targets must be positive")
        if self.target_width > CIF[0] or self.target_height > CIF[1]:
            raise ValueError("profile targets above CIF are not supported")


PRESETS = {
    "cif30": DeviceProfile("cif30", 1, *CIF, 30),
    "qcif15": DeviceProfile("qcif15", 1, *QCIF, 15),
    "qcif10": DeviceProfile("qcif10", 1, *QCIF, 10),
}


def encode_container(asset: VideoAsset) -> bytes:
    header = HEADER.pack(MAGIC, VERSION, asset.codec_id, asset.width,
                         asset.height, asset.fps, asset.frame_count)
    return header + asset.payload


def decode_header(data: bytes) -> tuple[FormatVariantKey, int]:
    """Parse just the header; returns the variant and declared frame count."""
    if len(data) < HEADER_SIZE:
        if not MAGIC.startswith(bytes(data[:4])):
            raise BadMagic("not a BBMV container")
        raise TruncatedPayload(f"header needs {HEADER_SIZE} bytes, got {len(data)}")
    magic, version, codec, width, height, fps, count = HEADER.unpack_from(data)
    if magic != MAGIC:
        raise BadMagic(f"bad magic {magic!r}")
    if version != VERSION:
        raise BadVersion(f"unsupported container version {version}")
    return FormatVariantKey(codec, width, height, fps), count


def decode_container(data: bytes, video_id: str = "") -> VideoAsset:
    variant, count = decode_header(data)
    need = count * frame_size(variant.width, variant.height)
    body = bytes(data[HEADER_SIZE:])
    if len(body) < need:
        raise TruncatedPayload(f"header declares {need} payload bytes, {len(body)} present")
    return VideoAsset(video_id, variant.codec_id, variant.width, variant.height,
                      variant.fps, count, body[:need])


def output_fps(asset_fps: int, profile: DeviceProfile) -> int:
    return min(asset_fps, profile.max_fps)


def kept_frame_indices(frame_count: int, in_fps: int, out_fps: int) -> list[int]:
    """Zero-based input frames surviving uniform decimation in_fps -> out_fps.

    Frame i (1-based) is kept when floor(i*out/in) steps past floor((i-1)*out/in).
    """
    return [i - 1 for i in range(1, frame_count + 1)
            if (i * out_fps) // in_fps > ((i - 1) * out_fps) // in_fps]


def frame_checksum(frame: bytes | memoryview) -> bytes:
    total = int(np.frombuffer(frame, dtype=np.uint8).sum(dtype=np.uint64))
    return struct.pack("<I", total & 0xFFFFFFFF)


def reduce_frame(frame: bytes | memoryview, out_size: int) -> bytes:
    # truncation keeps the reduction verifiable: prefix of source + checksum of the whole frame
    if out_size == len(frame):
        return bytes(frame)
    checksum = frame_checksum(frame)
    if out_size < 4:
        return checksum[:out_size]
    return bytes(frame[:out_size - 4]) + checksum


def matches_profile(asset: VideoAsset, profile: DeviceProfile) -> bool:
    return variant_matches(asset.variant, profile)


def variant_matches(variant: FormatVariantKey, profile: DeviceProfile) -> bool:
    return (variant.codec_id == profile.codec_id
            and variant.width == profile.target_width
            and variant.height == profile.target_height
            and variant.fps <= profile.max_fps)


def can_transcode(variant: FormatVariantKey, profile: DeviceProfile) -> bool:
    return variant.width >= profile.target_width and variant.height >= profile.target_height


def target_variant(variant: FormatVariantKey, profile: DeviceProfile) -> FormatVariantKey:
    """Variant that transcoding ``variant`` for ``profile`` will produce."""
    if variant_matches(variant, profile):
        return variant
    return FormatVariantKey(profile.codec_id, profile.target_width,
                            profile.target_height, output_fps(variant.fps, profile))


def transcode(asset: VideoAsset, profile: DeviceProfile) -> VideoAsset:
    if matches_profile(asset, profile):
        return asset
    if not can_transcode(asset.variant, profile):
        raise UpscaleRequested(
            f"{asset.video_id}: {asset.width}x{asset.height} cannot become "
            f"{profile.target_width}x{profile.target_height}"
        )
    out_fps = output_fps(asset.fps, profile)
    out_size = frame_size(profile.target_width, profile.target_height)
    kept = kept_frame_indices(asset.frame_count, asset.fps, out_fps)
    view, size = memoryview(asset.payload), asset.frame_size
    payload = b"".join(reduce_frame(view[i * size:(i + 1) * size], out_size) for i in kept)
    return VideoAsset(asset.video_id, profile.codec_id, profile.target_width,
                      profile.target_height, out_fps, len(kept), payload)


def transcode_container(data: bytes, profile: DeviceProfile, video_id: str = "") -> bytes:
    asset = decode_container(data, video_id)
    out = transcode(asset, profile)
    return data if out is asset else encode_container(out)


def synthetic_asset(video_id: str, width: int, height: int, fps: int,
                    frame_count: int, codec_id: int = 1, seed: int = 0) -> VideoAsset:
    """Deterministic pseudo-random payload keyed by video id and seed."""
    rng = np.random.default_rng([seed, *video_id.encode()])
    payload = rng.integers(0, 256, frame_count * frame_size(width, height),
                           dtype=np.uint8).tobytes()
    return VideoAsset(video_id, codec_id, width, height, fps, frame_count, payload)
