"""Caching and transcoding gateway for mobile video, plus a deterministic simulator."""

__version__ = "0.1.0"
