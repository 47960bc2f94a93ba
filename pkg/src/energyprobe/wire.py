"""Board <-> host framing.

Layout of one frame::

    AA | type:u8 | payload_len:u16le | payload | crc:u16le

The CRC is CRC-16/CCITT-FALSE (poly 0x1021, init 0xFFFF, no reflection,
no final xor) over ``type | payload_len | payload``; the sync byte is not
covered.  All integers are little-endian, strings are UTF-8 prefixed by a
u16 byte count.
"""

from __future__ import annotations

import binascii
import enum
import struct
from dataclasses import dataclass, field
from typing import Union

from .core import ProbeDescriptor, ProbeKind, Sample, TagEvent, Topology

SYNC = 0xAA
MAX_PAYLOAD = 1024
HEADER_LEN = 4
CRC_LEN = 2
SAMPLE_PAYLOAD_LEN = 26
SAMPLE_FRAME_LEN = 1 + 1 + 2 + SAMPLE_PAYLOAD_LEN + 2  # 32


class FrameType(enum.IntEnum):
    SAMPLE = 0x01
    TAG = 0x02
    TOPOLOGY = 0x03
    STATUS = 0x04
    START = 0x10
    STOP = 0x11
    GET_TOPOLOGY = 0x12
    SET_RATE = 0x13
    POWER = 0x14
    PING = 0x15
    # simulation only: stands in for a node driving the GPIO header
    INJECT_TAG = 0x16


DOWNSTREAM = frozenset({FrameType.SAMPLE, FrameType.TAG, FrameType.TOPOLOGY, FrameType.STATUS})
UPSTREAM = frozenset(FrameType) - DOWNSTREAM

# exact payload sizes; None = variable, with a minimum
_FIXED_LEN = {
    FrameType.SAMPLE: SAMPLE_PAYLOAD_LEN,
    FrameType.TAG: 9,
    FrameType.START: 0,
    FrameType.STOP: 0,
    FrameType.GET_TOPOLOGY: 0,
    FrameType.SET_RATE: 1,
    FrameType.POWER: 2,
    FrameType.PING: 0,
    FrameType.INJECT_TAG: 1,
}
_MIN_LEN = {FrameType.TOPOLOGY: 3, FrameType.STATUS: 3}
_KNOWN = {int(t) for t in FrameType}


class StatusCode(enum.IntEnum):
    OK = 0
    MALFORMED = 1
    UNKNOWN_CHANNEL = 2
    BAD_ARGUMENT = 3
    NO_EDGE = 4
    UNKNOWN_COMMAND = 5
    # informational, sent once when the scenario clock runs out
    END = 0x80


class WireError(ValueError):
    """A frame or payload that cannot be encoded or interpreted."""


def crc16(data: bytes) -> int:
    """CRC-16/CCITT-FALSE of *data*."""
    return binascii.crc_hqx(data, 0xFFFF)


@dataclass(frozen=True, slots=True)
class Frame:
    frame_type: int
    payload: bytes = b""
    # verbatim bytes as seen on the wire, filled in by the decoder
    raw: bytes = field(default=b"", compare=False, repr=False)

    @property
    def payload_len(self) -> int:
        return len(self.payload)


def payload_len_ok(frame_type: int, n: int) -> bool:
    if n > MAX_PAYLOAD:
        return False
    fixed = _FIXED_LEN.get(frame_type)
    if fixed is not None:
        return n == fixed
    return n >= _MIN_LEN.get(frame_type, 0)


def encode(frame: Frame) -> bytes:
    ft = int(frame.frame_type)
    if ft not in _KNOWN:
        raise WireError(f"unknown frame type {ft:#04x}")
    n = len(frame.payload)
    if n > MAX_PAYLOAD:
        raise WireError(f"payload of {n} bytes exceeds {MAX_PAYLOAD}")
    if not payload_len_ok(ft, n):
        raise WireError(f"payload length {n} invalid for {FrameType(ft).name}")
    body = struct.pack("<BH", ft, n) + bytes(frame.payload)
    return bytes([SYNC]) + body + struct.pack("<H", crc16(body))


# -- decoding ---------------------------------------------------------------


@dataclass(frozen=True, slots=True)
class NeedMore:
    pass


@dataclass(frozen=True, slots=True)
class ResyncSkip:
    n: int


NEED_MORE = NeedMore()
DecodeResult = Union[Frame, NeedMore, ResyncSkip]


def _skip_to_sync(buf, start: int, cursor: int) -> tuple[ResyncSkip, int]:
    nxt = buf.find(b"\xaa", start)
    if nxt < 0:
        nxt = len(buf)
    return ResyncSkip(nxt - cursor), nxt


def decode_stream(buf: bytes | bytearray, cursor: int = 0) -> tuple[DecodeResult, int]:
    """Decode one step of *buf* starting at *cursor*.

    Returns ``(Frame, next_cursor)`` for an intact frame, ``(NEED_MORE,
    cursor)`` when the bytes so far are a plausible frame prefix, or
    ``(ResyncSkip(n), cursor + n)`` when *n* bytes were discarded to reach
    the next sync byte candidate.
    """
    end = len(buf)
    if cursor >= end:
        return NEED_MORE, cursor
    if buf[cursor] != SYNC:
        return _skip_to_sync(buf, cursor, cursor)
    if end - cursor < HEADER_LEN:
        return NEED_MORE, cursor
    ft = buf[cursor + 1]
    n = buf[cursor + 2] | (buf[cursor + 3] << 8)
    if ft not in _KNOWN or not payload_len_ok(ft, n):
        return _skip_to_sync(buf, cursor + 1, cursor)
    stop = cursor + HEADER_LEN + n + CRC_LEN
    if stop > end:
        return NEED_MORE, cursor
    body = bytes(buf[cursor + 1 : cursor + HEADER_LEN + n])
    got = buf[stop - 2] | (buf[stop - 1] << 8)
    if binascii.crc_hqx(body, 0xFFFF) != got:
        return _skip_to_sync(buf, cursor + 1, cursor)
    return Frame(ft, body[3:], bytes(buf[cursor:stop])), stop


class StreamDecoder:
    """Incremental decoder for one connection.

    ``feed`` returns the frames and resync events produced by the new
    bytes.  ``finish`` drains whatever is left when the stream ends: a
    truncated frame candidate is treated as corruption.
    """

    def __init__(self):
        self._buf = bytearray()
        self._pos = 0
        self.frames = 0
        self.resync_events = 0
        self.skipped_bytes = 0

    def feed(self, data: bytes) -> list[Frame | ResyncSkip]:
        if data:
            self._buf += data
        out: list[Frame | ResyncSkip] = []
        buf = self._buf
        pos = self._pos
        while True:
            res, pos = decode_stream(buf, pos)
            if res is NEED_MORE:
                break
            self._account(res)
            out.append(res)
        # compact occasionally; slicing a large bytearray every call is costly
        if pos > 65536 or pos == len(buf):
            del buf[:pos]
            pos = 0
        self._pos = pos
        return out

    def finish(self) -> list[Frame | ResyncSkip]:
        out = self.feed(b"")
        buf = self._buf
        pos = self._pos
        while pos < len(buf):
            # truncated candidate: drop its sync byte and rescan the rest
            res, pos = _skip_to_sync(buf, pos + 1, pos)
            self._account(res)
            out.append(res)
            while True:
                res, pos = decode_stream(buf, pos)
                if res is NEED_MORE:
                    break
                self._account(res)
                out.append(res)
        del buf[:]
        self._pos = 0
        return out

    def _account(self, res) -> None:
        if isinstance(res, ResyncSkip):
            self.resync_events += 1
            self.skipped_bytes += res.n
        else:
            self.frames += 1

    @property
    def pending(self) -> int:
        return len(self._buf) - self._pos


# -- typed messages -----------------------------------------------------------


@dataclass(frozen=True)
class Status:
    code: int
    detail: str = ""


@dataclass(frozen=True)
class Start:
    pass


@dataclass(frozen=True)
class Stop:
    pass


@dataclass(frozen=True)
class GetTopology:
    pass


@dataclass(frozen=True)
class Ping:
    pass


@dataclass(frozen=True)
class SetRate:
    divider: int


@dataclass(frozen=True)
class Power:
    channel: int
    on: bool


@dataclass(frozen=True)
class InjectTag:
    gpio_state: int


Message = Union[Sample, TagEvent, Topology, Status, Start, Stop, GetTopology, Ping, SetRate, Power, InjectTag]

_SAMPLE = struct.Struct("<BIQiiiB")
_SAMPLE_FRAME = struct.Struct("<BBHBIQiiiB")
_TAG = struct.Struct("<QB")
_EMPTY = {Start: FrameType.START, Stop: FrameType.STOP, GetTopology: FrameType.GET_TOPOLOGY, Ping: FrameType.PING}


def _pack_str(s: str) -> bytes:
    b = s.encode("utf-8")
    if len(b) > 0xFFFF:
        raise WireError("string too long")
    return struct.pack("<H", len(b)) + b


def _unpack_str(p: bytes, off: int) -> tuple[str, int]:
    if off + 2 > len(p):
        raise WireError("truncated string length")
    (n,) = struct.unpack_from("<H", p, off)
    off += 2
    if off + n > len(p):
        raise WireError("truncated string")
    try:
        return bytes(p[off : off + n]).decode("utf-8"), off + n
    except UnicodeDecodeError as e:
        raise WireError(f"invalid UTF-8: {e}") from None


def pack(msg: Message) -> Frame:
    """Typed message to a Frame."""
    try:
        if isinstance(msg, Sample):
            return Frame(
                FrameType.SAMPLE,
                _SAMPLE.pack(
                    msg.probe_id, msg.seq, msg.board_time_us, msg.voltage_mV,
                    msg.current_mA, msg.power_mW, msg.avg_count,
                ),
            )
        if isinstance(msg, TagEvent):
            return Frame(FrameType.TAG, _TAG.pack(msg.board_time_us, msg.gpio_state))
        if isinstance(msg, Topology):
            parts = [_pack_str(msg.board_serial), struct.pack("<B", len(msg.probes))]
            for p in msg.probes:
                parts.append(struct.pack("<BBBB", p.probe_id, p.bus, p.position_on_bus, int(p.kind)))
                parts.append(_pack_str(p.label))
            return Frame(FrameType.TOPOLOGY, b"".join(parts))
        if isinstance(msg, Status):
            return Frame(FrameType.STATUS, struct.pack("<B", msg.code) + _pack_str(msg.detail))
        if isinstance(msg, SetRate):
            return Frame(FrameType.SET_RATE, struct.pack("<B", msg.divider))
        if isinstance(msg, Power):
            return Frame(FrameType.POWER, struct.pack("<BB", msg.channel, 1 if msg.on else 0))
        if isinstance(msg, InjectTag):
            return Frame(FrameType.INJECT_TAG, struct.pack("<B", msg.gpio_state))
        ft = _EMPTY.get(type(msg))
        if ft is not None:
            return Frame(ft, b"")
    except struct.error as e:
        raise WireError(f"{type(msg).__name__}: field out of range ({e})") from None
    raise WireError(f"cannot pack {msg!r}")


def unpack(frame: Frame) -> Message:
    """Frame to typed message.  Raises WireError on a malformed payload."""
    ft, p = frame.frame_type, frame.payload
    if not payload_len_ok(ft, len(p)):
        raise WireError(f"bad payload length {len(p)} for type {ft:#04x}")
    if ft == FrameType.SAMPLE:
        return Sample(*_SAMPLE.unpack(p))
    if ft == FrameType.TAG:
        return TagEvent(*_TAG.unpack(p))
    if ft == FrameType.TOPOLOGY:
        serial, off = _unpack_str(p, 0)
        if off >= len(p):
            raise WireError("truncated topology")
        count = p[off]
        off += 1
        probes = []
        for _ in range(count):
            if off + 4 > len(p):
                raise WireError("truncated probe descriptor")
            pid, bus, pos, kind = struct.unpack_from("<BBBB", p, off)
            off += 4
            try:
                kind = ProbeKind(kind)
            except ValueError:
                raise WireError(f"unknown probe kind {kind}") from None
            label, off = _unpack_str(p, off)
            probes.append(ProbeDescriptor(pid, bus, pos, kind, label))
        if off != len(p):
            raise WireError("trailing bytes after topology")
        return Topology(tuple(probes), serial)
    if ft == FrameType.STATUS:
        detail, off = _unpack_str(p, 1)
        if off != len(p):
            raise WireError("trailing bytes after status")
        return Status(p[0], detail)
    if ft == FrameType.SET_RATE:
        if p[0] == 0:
            raise WireError("rate divider must be >= 1")
        return SetRate(p[0])
    if ft == FrameType.POWER:
        if p[1] not in (0, 1):
            raise WireError(f"power state {p[1]} not in {{0,1}}")
        return Power(p[0], bool(p[1]))
    if ft == FrameType.INJECT_TAG:
        return InjectTag(p[0])
    for cls, t in _EMPTY.items():
        if t == ft:
            return cls()
    raise WireError(f"unknown frame type {ft:#04x}")


def encode_message(msg: Message) -> bytes:
    if isinstance(msg, Sample):
        return encode_sample(msg)
    return encode(pack(msg))


def encode_sample(s: Sample) -> bytes:
    """Fast path for the hot frame type; byte-identical to encode(pack(s))."""
    try:
        head = _SAMPLE_FRAME.pack(
            SYNC, FrameType.SAMPLE, SAMPLE_PAYLOAD_LEN, s.probe_id, s.seq,
            s.board_time_us, s.voltage_mV, s.current_mA, s.power_mW, s.avg_count,
        )
    except struct.error as e:
        raise WireError(f"Sample: field out of range ({e})") from None
    return head + struct.pack("<H", binascii.crc_hqx(head[1:], 0xFFFF))


def decode_sample_payload(payload: bytes) -> Sample:
    return Sample(*_SAMPLE.unpack(payload))
