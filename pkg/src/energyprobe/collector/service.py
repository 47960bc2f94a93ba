"""Host-side collector: one board connection, one session log, many readers."""

from __future__ import annotations

import bisect
import hmac
import json
import logging
import os
import queue
import re
import struct
import threading
import time
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path

from .. import wire
from ..core import Sample, TagEvent, Topology
from ..link import Link
from .sessionlog import SessionLogWriter

log = logging.getLogger(__name__)

ADMIN_TOKEN_ENV = "ENERGYPROBE_ADMIN_TOKEN"
SUBSCRIBER_QUEUE = 10_000
COMMAND_TIMEOUT_S = 5.0


class CollectorError(RuntimeError):
    pass


class NoSession(CollectorError):
    pass


@dataclass(frozen=True)
class ClockMap:
    """board_time_us -> host_time_ns.  ``drift_ppm`` is a hook, 0 unless configured."""

    offset_ns: int
    drift_ppm: float = 0.0

    def to_host(self, board_time_us: int) -> int:
        ns = board_time_us * 1000
        if self.drift_ppm:
            ns += int(round(ns * self.drift_ppm * 1e-6))
        return ns + self.offset_ns

    @classmethod
    def from_round_trip(cls, sent_ns: int, received_ns: int, board_time_us: int, drift_ppm: float = 0.0):
        midpoint = sent_ns + (received_ns - sent_ns) // 2
        return cls(midpoint - board_time_us * 1000, drift_ppm)


@dataclass
class CommandResult:
    ok: bool
    status: wire.Status | None = None
    reason: str = ""


class Subscription:
    """Bounded live feed.  Overflow disconnects the consumer instead of stalling ingest."""

    END = object()

    def __init__(self, probes: set[int] | None, maxsize: int = SUBSCRIBER_QUEUE):
        self.probes = probes
        self.q: queue.Queue = queue.Queue(maxsize)
        self.overflowed = False
        self.closed = False
        self.delivered = 0

    def wants(self, probe_id: int) -> bool:
        return self.probes is None or probe_id in self.probes

    def offer(self, item) -> bool:
        if self.overflowed or self.closed:
            return False
        try:
            self.q.put_nowait(item)
            return True
        except queue.Full:
            self.overflowed = True
            return False

    def end(self) -> None:
        self.closed = True
        try:
            self.q.put_nowait(self.END)
        except queue.Full:
            pass

    def get(self, timeout: float | None = None):
        """Next ("S", host_ns, Sample) / ("T", host_ns, TagEvent), or END."""
        if self.overflowed:
            return self.END
        try:
            item = self.q.get(timeout=timeout)
        except queue.Empty:
            if self.closed:
                return self.END
            raise
        if item is not self.END:
            self.delivered += 1
        return item

    def __iter__(self):
        while True:
            try:
                item = self.get(timeout=0.25)
            except queue.Empty:
                continue
            if item is self.END:
                return
            yield item


@dataclass
class Metrics:
    frames: int = 0
    samples: Counter = field(default_factory=Counter)
    drops: Counter = field(default_factory=Counter)
    tags: int = 0
    status_frames: int = 0
    corruption: int = 0
    resync_bytes: int = 0
    malformed: int = 0
    subscriber_overflows: int = 0
    power_refusals: int = 0

    def as_dict(self) -> dict:
        return {
            "frames": self.frames,
            "samples": {str(k): v for k, v in sorted(self.samples.items())},
            "drops": {str(k): v for k, v in sorted(self.drops.items())},
            "drops_total": sum(self.drops.values()),
            "tags": self.tags,
            "status_frames": self.status_frames,
            "corruption": self.corruption,
            "resync_bytes": self.resync_bytes,
            "malformed": self.malformed,
            "subscriber_overflows": self.subscriber_overflows,
            "power_refusals": self.power_refusals,
        }


_BOARD_TIME = re.compile(r"board_time_us=(\d+)")
_U64 = struct.Struct("<Q")


class Collector:
    """Ingests one board connection into a session log and serves readers.

    Single writer: the ingest thread is the only code touching the log and
    the sample index.  Queries read the index under a short lock.  Power and
    tag commands serialize through ``_cmd_lock`` and are answered by the next
    STATUS frame from the board.

    ``virtual_epoch_ns`` replaces the host clock by ``epoch + board time of
    the latest timed frame``; with an as-fast-as-possible simulator this
    makes the whole log reproducible byte for byte.
    """

    def __init__(self, link: Link, log_path: str | Path, *, admin_token: str | None = None,
                 clock=time.time_ns, virtual_epoch_ns: int | None = None,
                 subscriber_queue: int = SUBSCRIBER_QUEUE, drift_ppm: float = 0.0):
        self.link = link
        self.log_path = Path(log_path)
        self.admin_token = admin_token if admin_token is not None else os.environ.get(ADMIN_TOKEN_ENV)
        self._clock = clock
        self._virtual_epoch = virtual_epoch_ns
        self._virtual_now = virtual_epoch_ns or 0
        self._drift_ppm = drift_ppm
        self.subscriber_queue = subscriber_queue

        self.metrics = Metrics()
        self.topology: Topology | None = None
        self.clock_map: ClockMap | None = None
        self.writer: SessionLogWriter | None = None
        self.active = False
        self.finished = threading.Event()
        self.board_ended = False
        self.gpio = 0

        self._index_lock = threading.Lock()
        self._times: dict[int, list[int]] = defaultdict(list)
        self._samples: dict[int, list[Sample]] = defaultdict(list)
        self._tags: list[tuple[int, TagEvent]] = []
        self._next_seq: dict[int, int] = {}
        self._subs: list[Subscription] = []
        self._subs_lock = threading.Lock()
        self._cmd_lock = threading.Lock()
        self._replies: queue.Queue = queue.Queue()
        self._pending: list[tuple[int, wire.Frame]] = []
        self._in_resync = False
        self._thread: threading.Thread | None = None
        self._dec = wire.StreamDecoder()

    # -- lifecycle ----------------------------------------------------------

    def start(self, timeout: float = COMMAND_TIMEOUT_S, divider: int | None = None) -> None:
        """Handshake, write the log header, START the board."""
        self._thread = threading.Thread(target=self._ingest, daemon=True, name="collector-ingest")
        self._thread.start()
        sent = self._now()
        st = self._command(wire.Ping(), timeout, expect=wire.FrameType.STATUS)
        received = self._reply_time
        m = _BOARD_TIME.search(st.detail) if isinstance(st, wire.Status) else None
        board_us = int(m.group(1)) if m else 0
        if self._virtual_epoch is not None:
            sent = received = self._virtual_epoch + board_us * 1000
        self.clock_map = ClockMap.from_round_trip(sent, received, board_us, self._drift_ppm)
        topo = self._command(wire.GetTopology(), timeout, expect=wire.FrameType.TOPOLOGY)
        if not isinstance(topo, Topology):
            raise CollectorError("board did not answer GET_TOPOLOGY")
        self.topology = topo
        start_wall = self._virtual_epoch if self._virtual_epoch is not None else time.time_ns()
        meta = {
            "format": "energyprobe-session",
            "board_serial": topo.board_serial,
            "topology": topo.to_dict(),
            "start_wall_clock_ns": start_wall,
            "clock_offset_ns": self.clock_map.offset_ns,
            "clock_drift_ppm": self.clock_map.drift_ppm,
            "clock_rtt_ns": received - sent,
        }
        with self._index_lock:
            self.writer = SessionLogWriter(self.log_path, meta)
            pending, self._pending = self._pending, []
            self.active = True
            for t, fr in pending:
                self._record(t, fr, replay=True)
        if divider is not None:
            self._command(wire.SetRate(divider), timeout)
        self._command(wire.Start(), timeout)

    def wait(self, timeout: float | None = None) -> bool:
        return self.finished.wait(timeout)

    def close(self) -> None:
        self.link.close()
        if self._thread is not None:
            self._thread.join(timeout=5)
        self._finalize()

    # -- ingest -------------------------------------------------------------

    def _now(self) -> int:
        return self._virtual_now if self._virtual_epoch is not None else self._clock()

    def _ingest(self) -> None:
        try:
            while True:
                data = self.link.recv(1 << 16)
                if not data:
                    self._consume(self._dec.finish())
                    break
                self._consume(self._dec.feed(data))
        except Exception:  # pragma: no cover - logged, session still finalized
            log.exception("ingest failed")
        finally:
            self._finalize()

    def _consume(self, events) -> None:
        t_batch = None if self._virtual_epoch is not None else self._clock()
        with self._index_lock:
            for ev in events:
                if isinstance(ev, wire.ResyncSkip):
                    self.metrics.resync_bytes += ev.n
                    if not self._in_resync:
                        self.metrics.corruption += 1
                        self._in_resync = True
                    continue
                self._in_resync = False
                self.metrics.frames += 1
                if t_batch is None:
                    ft = ev.frame_type
                    if ft == wire.FrameType.SAMPLE or ft == wire.FrameType.TAG:
                        (bt,) = _U64.unpack_from(ev.payload, 5 if ft == wire.FrameType.SAMPLE else 0)
                        self._virtual_now = max(self._virtual_now, self._virtual_epoch + bt * 1000)
                    t = self._virtual_now
                else:
                    t = t_batch
                if self.active:
                    self._record(t, ev)
                else:
                    self._pending.append((t, ev))
                    self._control(t, ev)

    def _record(self, t: int, fr: wire.Frame, replay: bool = False) -> None:
        """Log one frame and fan it out.  Caller holds _index_lock."""
        self.writer.append(t, fr.raw or wire.encode(fr))
        ft = fr.frame_type
        if ft == wire.FrameType.SAMPLE:
            s = wire.decode_sample_payload(fr.payload)
            pid = s.probe_id
            self.metrics.samples[pid] += 1
            exp = self._next_seq.get(pid)
            if exp is not None and s.seq != exp:
                self.metrics.drops[pid] += (s.seq - exp) & 0xFFFFFFFF
            self._next_seq[pid] = (s.seq + 1) & 0xFFFFFFFF
            ht = self.clock_map.to_host(s.board_time_us)
            self._times[pid].append(ht)
            self._samples[pid].append(s)
            if self._subs:
                self._fanout(("S", ht, s), pid)
            return
        if ft == wire.FrameType.TAG:
            try:
                tag = wire.unpack(fr)
            except wire.WireError:
                self.metrics.malformed += 1
                return
            self.metrics.tags += 1
            self.gpio = tag.gpio_state
            ht = self.clock_map.to_host(tag.board_time_us)
            self._tags.append((ht, tag))
            if self._subs:
                self._fanout(("T", ht, tag), None)
            return
        if not replay:
            self._control(t, fr)

    def _control(self, t: int, fr: wire.Frame) -> None:
        try:
            msg = wire.unpack(fr)
        except wire.WireError:
            self.metrics.malformed += 1
            return
        if isinstance(msg, wire.Status):
            self.metrics.status_frames += 1
            if msg.code == wire.StatusCode.END:
                self.board_ended = True
                return
        elif isinstance(msg, TagEvent):
            self.gpio = msg.gpio_state
            return
        elif not isinstance(msg, Topology):
            return
        self._reply_time = t
        self._replies.put(msg)

    def _fanout(self, item, probe_id: int | None) -> None:
        dead = []
        with self._subs_lock:
            for sub in self._subs:
                if probe_id is not None and not sub.wants(probe_id):
                    continue
                if not sub.offer(item) and sub.overflowed:
                    dead.append(sub)
            for sub in dead:
                self._subs.remove(sub)
                self.metrics.subscriber_overflows += 1
                log.warning("subscriber dropped after %d queued frames", self.subscriber_queue)

    def _finalize(self) -> None:
        with self._index_lock:
            if self.finished.is_set():
                return
            self.active = False
            if self.writer is None:
                # handshake never completed: still leave a readable, header-only log
                meta = {"format": "energyprobe-session", "topology": None, "board_serial": "",
                        "start_wall_clock_ns": self._now(), "clock_offset_ns": 0,
                        "clock_drift_ppm": 0.0, "clock_rtt_ns": 0}
                self.writer = SessionLogWriter(self.log_path, meta)
            self.writer.close()
            metrics_path = self.log_path.with_name(self.log_path.name + ".metrics.json")
            metrics_path.write_text(json.dumps(self.metrics.as_dict(), indent=2, sort_keys=True) + "\n")
            self.finished.set()
        with self._subs_lock:
            for sub in self._subs:
                sub.end()
            self._subs.clear()
        self._replies.put(None)

    # -- commands -----------------------------------------------------------

    _reply_time = 0

    def _command(self, msg, timeout: float = COMMAND_TIMEOUT_S, expect=wire.FrameType.STATUS):
        with self._cmd_lock:
            while True:
                try:
                    self._replies.get_nowait()
                except queue.Empty:
                    break
            if self.finished.is_set():
                raise NoSession("no active session")
            try:
                self.link.send(wire.encode(wire.pack(msg)))
            except OSError as e:
                raise NoSession(f"board connection lost ({e})") from None
            deadline = time.monotonic() + timeout
            while True:
                left = deadline - time.monotonic()
                if left <= 0:
                    raise CollectorError(f"board did not answer {type(msg).__name__}")
                try:
                    reply = self._replies.get(timeout=left)
                except queue.Empty:
                    continue
                if reply is None:
                    raise NoSession("session ended while waiting for the board")
                want = wire.Status if expect == wire.FrameType.STATUS else Topology
                if isinstance(reply, want):
                    return reply

    def _check_token(self, token: str | None) -> bool:
        if not self.admin_token or not token:
            return False
        return hmac.compare_digest(self.admin_token.encode(), token.encode())

    def power(self, channel: int, on: bool, token: str | None, requester: str = "?") -> CommandResult:
        if not self._check_token(token):
            self.metrics.power_refusals += 1
            log.warning("POWER channel=%s refused for %s: missing or invalid admin token", channel, requester)
            return CommandResult(False, reason="admin token required")
        if not self.active:
            raise NoSession("no active session")
        st = self._command(wire.Power(channel, on))
        return CommandResult(st.code == wire.StatusCode.OK, st, st.detail)

    def tag(self, gpio_state: int, requester: str = "?") -> CommandResult:
        if not 0 <= gpio_state <= 0xFF:
            return CommandResult(False, reason="gpio state must be 0x00..0xff")
        if not self.active:
            raise NoSession("no active session")
        if gpio_state == self.gpio:
            return CommandResult(False, reason=f"no edge: gpio already {gpio_state:#04x}")
        st = self._command(wire.InjectTag(gpio_state))
        if st.code == wire.StatusCode.OK:
            self.gpio = gpio_state
        return CommandResult(st.code == wire.StatusCode.OK, st, st.detail)

    # -- readers ------------------------------------------------------------

    def known_probe(self, probe_id: int) -> bool:
        return self.topology is not None and self.topology.probe(probe_id) is not None

    def query(self, probe_id: int, t0_ns: int, t1_ns: int) -> list[tuple[int, Sample]] | None:
        """Samples with mapped host time in [t0, t1); None for a probe not in the topology."""
        if t0_ns > t1_ns:
            raise ValueError("t0 must not exceed t1")
        if not self.known_probe(probe_id):
            return None
        with self._index_lock:
            times = self._times.get(probe_id, [])
            lo = bisect.bisect_left(times, t0_ns)
            hi = bisect.bisect_left(times, t1_ns)
            return list(zip(times[lo:hi], self._samples[probe_id][lo:hi]))

    def tags(self) -> list[tuple[int, TagEvent]]:
        with self._index_lock:
            return list(self._tags)

    def subscribe(self, probes: set[int] | None = None) -> Subscription:
        if not self.active:
            raise NoSession("no active session")
        sub = Subscription(probes, self.subscriber_queue)
        with self._subs_lock:
            self._subs.append(sub)
        return sub

    def unsubscribe(self, sub: Subscription) -> None:
        with self._subs_lock:
            if sub in self._subs:
                self._subs.remove(sub)

