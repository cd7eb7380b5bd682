"""Binary time-tag stream format.

Layout, all little-endian, no padding::

    header (32 bytes)
      0   8s   magic        b"BELLTAG1"
      8   u16  version      1
     10   u16  station_id   0 = Alice, 1 = Bob
     12   u32  tick_unit    picoseconds per tick (> 0, default 75)
     16   u64  start_time   ticks
     24   u64  record_count 0 means "read until EOF"
    record (9 bytes, repeated)
      0   u64  timestamp    ticks, non-decreasing
      8   u8   flags        bit0 setting, bit1 detector (0 "+", 1 "-"),
                            bits 2-7 zero
"""
from __future__ import annotations

import csv
import io
import os
import struct
from dataclasses import dataclass, field
from typing import BinaryIO, Iterator, NamedTuple

import numpy as np

MAGIC = b"BELLTAG1"
VERSION = 1
HEADER_STRUCT = struct.Struct("<8sHHIQQ")
HEADER_SIZE = HEADER_STRUCT.size
RECORD_DTYPE = np.dtype([("timestamp", "<u8"), ("flags", "u1")])
RECORD_SIZE = RECORD_DTYPE.itemsize
FLAG_SETTING = 0x01
FLAG_DETECTOR = 0x02
FLAG_MASK = FLAG_SETTING | FLAG_DETECTOR
RESERVED_MASK = 0xFF & ~FLAG_MASK
DEFAULT_TICK_PS = 75

ALICE = 0
BOB = 1

assert HEADER_SIZE == 32 and RECORD_SIZE == 9


class TagStreamError(ValueError):
    pass


@dataclass(frozen=True)
class StreamHeader:
    station_id: int
    tick_unit: int = DEFAULT_TICK_PS
    start_time: int = 0
    record_count: int = 0
    version: int = VERSION
    magic: bytes = MAGIC

    def __post_init__(self):
        if self.magic != MAGIC:
            raise TagStreamError(f"bad magic {self.magic!r}")
        if self.station_id not in (ALICE, BOB):
            raise TagStreamError(f"station_id must be 0 or 1, got {self.station_id}")
        if self.tick_unit <= 0:
            raise TagStreamError("tick_unit must be > 0")

    def pack(self) -> bytes:
        return HEADER_STRUCT.pack(self.magic, self.version, self.station_id,
                                  self.tick_unit, self.start_time, self.record_count)

    @classmethod
    def unpack(cls, data: bytes) -> "StreamHeader":
        if len(data) < HEADER_SIZE:
            raise TagStreamError(f"truncated header: {len(data)} of {HEADER_SIZE} bytes")
        magic, version, station_id, tick_unit, start_time, count = HEADER_STRUCT.unpack(data[:HEADER_SIZE])
        if magic != MAGIC:
            raise TagStreamError(f"bad magic {magic!r}")
        if version != VERSION:
            raise TagStreamError(f"unsupported version {version}")
        return cls(station_id, tick_unit, start_time, count, version, magic)


class TagRecord(NamedTuple):
    timestamp: int
    setting: int
    detector: int


@dataclass
class TagStream:
    """In-memory stream of one station. ``timestamps`` are picoseconds."""

    timestamps: np.ndarray
    settings: np.ndarray
    detectors: np.ndarray
    station_id: int = ALICE
    tick_ps: int = DEFAULT_TICK_PS
    start_time: int = 0
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.timestamps = np.asarray(self.timestamps, dtype=np.int64)
        self.settings = np.asarray(self.settings, dtype=np.uint8)
        self.detectors = np.asarray(self.detectors, dtype=np.uint8)
        if not (self.timestamps.shape == self.settings.shape == self.detectors.shape):
            raise TagStreamError("timestamps, settings and detectors differ in length")

    def __len__(self):
        return len(self.timestamps)

    @property
    def times_s(self) -> np.ndarray:
        return self.timestamps * 1e-12

    def is_sorted(self) -> bool:
        return bool(np.all(np.diff(self.timestamps) >= 0))

    def header(self, record_count: int | None = None) -> StreamHeader:
        return StreamHeader(self.station_id, self.tick_ps, self.start_time // self.tick_ps,
                            len(self) if record_count is None else record_count)

    def records(self) -> Iterator[TagRecord]:
        for t, s, d in zip(self.timestamps.tolist(), self.settings.tolist(), self.detectors.tolist()):
            yield TagRecord(t, s, d)

    def __eq__(self, other):
        if not isinstance(other, TagStream):
            return NotImplemented
        return (self.station_id == other.station_id and self.tick_ps == other.tick_ps
                and np.array_equal(self.timestamps, other.timestamps)
                and np.array_equal(self.settings, other.settings)
                and np.array_equal(self.detectors, other.detectors))


def encode_records(ticks, settings, detectors) -> bytes:
    ticks = np.asarray(ticks)
    settings = np.asarray(settings)
    detectors = np.asarray(detectors)
    if ticks.size and ticks.min() < 0:
        raise TagStreamError("negative timestamp")
    bad = np.flatnonzero(np.diff(ticks) < 0)
    if bad.size:
        raise TagStreamError(f"unsorted input at record {bad[0] + 1}")
    if np.any(settings > 1) or np.any(detectors > 1):
        raise TagStreamError("flag bits outside mask")
    rec = np.empty(ticks.shape[0], dtype=RECORD_DTYPE)
    rec["timestamp"] = ticks.astype(np.uint64)
    rec["flags"] = settings.astype(np.uint8) | (detectors.astype(np.uint8) << 1)
    return rec.tobytes()


def _to_ticks(stream: TagStream) -> np.ndarray:
    if stream.tick_ps <= 0:
        raise TagStreamError("tick_ps must be > 0")
    if np.any(stream.timestamps % stream.tick_ps):
        raise TagStreamError(f"timestamps not on the {stream.tick_ps} ps grid")
    return stream.timestamps // stream.tick_ps


def stream_to_bytes(stream: TagStream, streaming: bool = False) -> bytes:
    """Serialize; ``streaming=True`` writes the record_count = 0 sentinel."""
    body = encode_records(_to_ticks(stream), stream.settings, stream.detectors)
    return stream.header(0 if streaming else len(stream)).pack() + body


def write_stream(target, stream: TagStream, streaming: bool = False) -> int:
    data = stream_to_bytes(stream, streaming)
    if isinstance(target, (str, os.PathLike)):
        with open(target, "wb") as fh:
            fh.write(data)
    else:
        target.write(data)
    return len(data)


class TagStreamWriter:
    """Append-only writer that never seeks; emits record_count = 0."""

    def __init__(self, target, station_id: int, tick_unit: int = DEFAULT_TICK_PS, start_time: int = 0):
        self._own = isinstance(target, (str, os.PathLike))
        self._fh = open(target, "wb") if self._own else target
        self._fh.write(StreamHeader(station_id, tick_unit, start_time, 0).pack())
        self._last = -1
        self.count = 0

    def write(self, ticks, settings, detectors):
        ticks = np.asarray(ticks)
        if ticks.size and ticks[0] < self._last:
            raise TagStreamError(f"unsorted input at record {self.count}")
        self._fh.write(encode_records(ticks, settings, detectors))
        if ticks.size:
            self._last = int(ticks[-1])
        self.count += ticks.size

    def close(self):
        if self._own:
            self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


class TagStreamReader:
    """Streaming reader: validates header, record framing, reserved bits and
    monotonicity on the fly, holding at most one chunk in memory."""

    def __init__(self, source, chunk_records: int = 1 << 16):
        if isinstance(source, (bytes, bytearray, memoryview)):
            source = io.BytesIO(bytes(source))
        self._own = isinstance(source, (str, os.PathLike))
        self._fh: BinaryIO = open(source, "rb") if self._own else source
        self.chunk_records = chunk_records
        try:
            self.header = StreamHeader.unpack(self._fh.read(HEADER_SIZE))
        except Exception:
            self.close()
            raise

    def iter_chunks(self) -> Iterator[np.ndarray]:
        """Yield structured arrays (``timestamp`` in ticks, ``flags``)."""
        limit = self.header.record_count or None
        index = 0
        last = None
        while limit is None or index < limit:
            want = self.chunk_records if limit is None else min(self.chunk_records, limit - index)
            buf = self._fh.read(want * RECORD_SIZE)
            if not buf:
                if limit is not None:
                    raise TagStreamError(
                        f"truncated stream: expected {limit} records, got {index} "
                        f"(EOF at byte offset {HEADER_SIZE + index * RECORD_SIZE})")
                break
            if len(buf) % RECORD_SIZE:
                whole = len(buf) // RECORD_SIZE
                offset = HEADER_SIZE + (index + whole) * RECORD_SIZE
                raise TagStreamError(f"truncated record {index + whole} at byte offset {offset}")
            rec = np.frombuffer(buf, dtype=RECORD_DTYPE)
            if np.any(rec["flags"] & np.uint8(RESERVED_MASK)):
                k = int(np.flatnonzero(rec["flags"] & np.uint8(RESERVED_MASK))[0])
                raise TagStreamError(f"reserved flag bits set in record {index + k}")
            ts = rec["timestamp"]
            if last is not None and ts.size and ts[0] < last:
                raise TagStreamError(f"timestamps decrease at record {index}")
            bad = np.flatnonzero(ts[1:] < ts[:-1])
            if bad.size:
                raise TagStreamError(f"timestamps decrease at record {index + int(bad[0]) + 1}")
            if ts.size:
                last = ts[-1]
            index += rec.shape[0]
            yield rec
            if limit is None and len(buf) < want * RECORD_SIZE:
                break
        if limit is not None and self._fh.read(1):
            raise TagStreamError(f"trailing bytes after {limit} records")

    def __iter__(self) -> Iterator[TagRecord]:
        for rec in self.iter_chunks():
            ts = rec["timestamp"].tolist()
            fl = rec["flags"].tolist()
            for t, f in zip(ts, fl):
                yield TagRecord(t, f & FLAG_SETTING, (f & FLAG_DETECTOR) >> 1)

    def read_all(self) -> TagStream:
        chunks = list(self.iter_chunks())
        rec = np.concatenate(chunks) if chunks else np.empty(0, dtype=RECORD_DTYPE)
        tick = self.header.tick_unit
        return TagStream(rec["timestamp"].astype(np.int64) * tick,
                         rec["flags"] & FLAG_SETTING,
                         (rec["flags"] & FLAG_DETECTOR) >> 1,
                         station_id=self.header.station_id, tick_ps=tick,
                         start_time=self.header.start_time * tick)

    def close(self):
        if self._own:
            self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def read_stream(source, chunk_records: int = 1 << 16):
    """Return ``(header, iterator of TagRecord)``; the file is closed once the
    iterator is exhausted."""
    reader = TagStreamReader(source, chunk_records)

    def _records():
        with reader:
            yield from reader

    return reader.header, _records()


def load_stream(source) -> TagStream:
    with TagStreamReader(source) as reader:
        return reader.read_all()


def export_text(stream: TagStream, target) -> None:
    """CSV export: ``ticks,setting,detector`` with detector as ``+``/``-``."""
    ticks = _to_ticks(stream)
    own = isinstance(target, (str, os.PathLike))
    fh = open(target, "w", newline="") if own else target
    try:
        w = csv.writer(fh)
        w.writerow(["ticks", "setting", "detector"])
        for t, s, d in zip(ticks.tolist(), stream.settings.tolist(), stream.detectors.tolist()):
            w.writerow([t, s, "-" if d else "+"])
    finally:
        if own:
            fh.close()
