"""Append-only session log.

File layout::

    "EPLG" | version:u16le = 1 | metadata_len:u32le | metadata (UTF-8 JSON)
    { host_time_ns:u64le | verbatim wire frame }*

Frames are self-delimiting through their length field, so the log is just
the received byte stream with a timestamp in front of every frame.
"""

from __future__ import annotations

import json
import struct
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

from .. import wire

MAGIC = b"EPLG"
VERSION = 1
_HEADER = struct.Struct("<4sHI")
_TS = struct.Struct("<Q")


class LogFormatError(ValueError):
    pass


@dataclass(frozen=True)
class LogRecord:
    host_time_ns: int
    frame: wire.Frame


class SessionLogWriter:
    """Single-writer appender.  ``append`` clamps timestamps to stay non-decreasing."""

    def __init__(self, path: str | Path, metadata: dict):
        self.path = Path(path)
        meta = json.dumps(metadata, sort_keys=True).encode("utf-8")
        self._fh = open(self.path, "wb", buffering=1 << 20)
        self._fh.write(_HEADER.pack(MAGIC, VERSION, len(meta)) + meta)
        self._last = 0
        self._lock = threading.Lock()
        self.records = 0

    def append(self, host_time_ns: int, raw_frame: bytes) -> int:
        with self._lock:
            t = max(host_time_ns, self._last)
            self._last = t
            self._fh.write(_TS.pack(t) + raw_frame)
            self.records += 1
            return t

    def flush(self) -> None:
        with self._lock:
            if not self._fh.closed:
                self._fh.flush()

    def close(self) -> None:
        with self._lock:
            if not self._fh.closed:
                self._fh.close()

    @property
    def closed(self) -> bool:
        return self._fh.closed


def read_header(data: bytes) -> tuple[dict, int]:
    if len(data) < _HEADER.size:
        raise LogFormatError("file too short for a session log header")
    magic, version, n = _HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise LogFormatError(f"bad magic {magic!r}, not a session log")
    if version != VERSION:
        raise LogFormatError(f"unsupported log version {version}")
    end = _HEADER.size + n
    if end > len(data):
        raise LogFormatError("truncated metadata")
    try:
        meta = json.loads(data[_HEADER.size:end].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise LogFormatError(f"unreadable metadata: {e}") from None
    return meta, end


def iter_records(data: bytes, offset: int, strict: bool = True) -> Iterator[LogRecord]:
    """Walk the record section.  A torn final record (crash mid-write) ends iteration."""
    end = len(data)
    pos = offset
    while pos < end:
        if end - pos < 8 + wire.HEADER_LEN:
            if strict:
                raise LogFormatError(f"torn record at byte {pos}")
            return
        (t,) = _TS.unpack_from(data, pos)
        res, nxt = wire.decode_stream(data, pos + 8)
        if isinstance(res, wire.Frame):
            yield LogRecord(t, res)
            pos = nxt
            continue
        if isinstance(res, wire.NeedMore) and not strict:
            return
        raise LogFormatError(f"invalid frame in record at byte {pos}")


def read_log(path: str | Path, strict: bool = True) -> tuple[dict, list[LogRecord]]:
    data = Path(path).read_bytes()
    meta, off = read_header(data)
    return meta, list(iter_records(data, off, strict))
