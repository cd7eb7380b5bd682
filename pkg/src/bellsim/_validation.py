from __future__ import annotations

import numpy as np

from .tagstream import TagStream


def check_stream(stream, name: str = "stream", allow_empty: bool = True) -> TagStream:
    """Coerce to :class:`TagStream` and check sortedness.

    Bare timestamp arrays (picoseconds) are wrapped with zero settings and
    detector bits.
    """
    if not isinstance(stream, TagStream):
        ts = np.asarray(stream)
        if ts.ndim != 1:
            raise ValueError(f"{name}: expected a TagStream or 1-d timestamp array")
        stream = TagStream(ts.astype(np.int64), np.zeros(ts.size, np.uint8), np.zeros(ts.size, np.uint8))
    if not allow_empty and len(stream) == 0:
        raise ValueError(f"{name} is empty")
    if not stream.is_sorted():
        raise ValueError(f"{name} timestamps are not sorted")
    return stream


def check_positive(value, name: str):
    if not value > 0:
        raise ValueError(f"{name} must be > 0, got {value}")
    return value


def seconds_to_ps(x: float) -> int:
    return int(round(x * 1e12))
