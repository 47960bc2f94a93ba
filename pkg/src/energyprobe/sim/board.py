"""Simulated main board with its daisy-chained probes.

Each probe converts at 4000 SPS (one conversion every 250 us) and averages
blocks of four conversions, so averaged sample ``n`` of a probe covers the
conversions at ``(n+1)*P - 750, -500, -250, -0`` us with ``P`` = 1000 us,
and is stamped with the time of the fourth one.  The board polls its two
buses round-robin in fixed (bus, position) order and forwards every
``divider``-th averaged sample of each probe.

Noise is Gaussian, in milliwatts, added before quantization.  Each probe has
its own numpy ``Generator(PCG64(seed))`` and draws four standard normals per
averaged sample, so streams are reproducible for a given seed.
"""

from __future__ import annotations

import binascii
import logging
import queue
import threading
import time
from collections import Counter, deque
from dataclasses import dataclass, field

import numpy as np

from .. import wire
from ..core import AVG_COUNT, CONVERSION_PERIOD_US, Sample, TagEvent, average4, per_probe_rate
from ..link import Link
from .profiles import ground_truth_power
from .scenario import ProbeSetup, ScenarioError, SimScenario

log = logging.getLogger(__name__)

SAMPLE_DTYPE = np.dtype(
    [
        ("sync", "u1"), ("type", "u1"), ("len", "<u2"),
        ("probe_id", "u1"), ("seq", "<u4"), ("board_time_us", "<u8"),
        ("voltage_mV", "<i4"), ("current_mA", "<i4"), ("power_mW", "<i4"), ("avg_count", "u1"),
        ("crc", "<u2"),
    ]
)
assert SAMPLE_DTYPE.itemsize == wire.SAMPLE_FRAME_LEN


def conversion_times_us(index, period_us: int = 1000):
    """Times of the four conversions behind averaged sample(s) *index*."""
    end = (np.asarray(index, dtype=np.int64) + 1) * period_us
    offsets = np.arange(AVG_COUNT - 1, -1, -1, dtype=np.int64) * CONVERSION_PERIOD_US
    return end[..., None] - offsets


def raw_conversions(setup: ProbeSetup, index, rng=None, powered: bool = True, period_us: int = 1000):
    """Raw (power_mW, current_mA) conversion arrays, shape (..., 4)."""
    t_us = conversion_times_us(index, period_us)
    if powered:
        truth_mW = ground_truth_power(setup.profile, t_us / 1e6) * 1000.0
    else:
        truth_mW = np.zeros(t_us.shape)
    if setup.noise.sigma_mW > 0 and rng is not None:
        truth_mW = truth_mW + rng.standard_normal(t_us.shape) * setup.noise.sigma_mW
    # the simulated supply never sources current back
    p = np.maximum(np.rint(truth_mW), 0).astype(np.int64)
    v = setup.nominal_voltage_mV
    i = np.rint(p * 1000.0 / v).astype(np.int64)
    return p, i


def sample_probe(setup: ProbeSetup, index: int, seq: int, rng=None, powered: bool = True,
                 period_us: int = 1000, drift_ppm: float = 0.0) -> Sample:
    """Scalar reference for one averaged sample; the batch path must agree with it."""
    p, i = raw_conversions(setup, index, rng, powered, period_us)
    v = setup.nominal_voltage_mV
    raw = [(v, int(ci), int(cp)) for cp, ci in zip(p, i)]
    voltage, current, power, n = average4(raw)
    t_us = (index + 1) * period_us
    return Sample(setup.descriptor.probe_id, seq, board_time(t_us, drift_ppm), voltage, current, power, n)


def board_time(true_us, drift_ppm: float):
    if not drift_ppm:
        return true_us
    return np.rint(np.asarray(true_us) * (1.0 + drift_ppm * 1e-6)).astype(np.int64)


@dataclass
class ProbeState:
    setup: ProbeSetup
    rank: int
    period_us: int
    rng: np.random.Generator
    next_index: int = 0
    seq: int = 0
    powered: bool = True
    divider_base: int = 0


@dataclass
class RunReport:
    frames_per_probe: Counter = field(default_factory=Counter)
    tag_frames: int = 0
    status_frames: int = 0
    commands: int = 0
    bad_commands: int = 0
    board_time_us: int = 0
    finished: bool = False

    def lines(self) -> list[str]:
        out = [f"probe {pid}: {n} sample frames" for pid, n in sorted(self.frames_per_probe.items())]
        out.append(f"tags: {self.tag_frames}  status: {self.status_frames}  "
                   f"commands: {self.commands} ({self.bad_commands} rejected)")
        out.append(f"board time: {self.board_time_us / 1e6:.3f} s  finished: {self.finished}")
        return out


class Board:
    """Deterministic board model.  Not thread-safe; one driver at a time."""

    def __init__(self, scenario: SimScenario):
        problems = scenario.validate()
        if problems:
            raise ScenarioError(problems)
        self.scenario = scenario
        topo = scenario.topology
        counts = topo.bus_counts()
        order = topo.poll_order()
        self.probes: dict[int, ProbeState] = {}
        for rank, desc in enumerate(order):
            rate = per_probe_rate(counts[desc.bus])
            setup = scenario.setup(desc.probe_id)
            self.probes[desc.probe_id] = ProbeState(
                setup=setup, rank=rank, period_us=1_000_000 // rate,
                rng=np.random.Generator(np.random.PCG64(setup.noise.seed)),
            )
        self.duration_us = int(round(scenario.duration_s * 1e6))
        self.clock_us = 0
        self.started = False
        self.divider = 1
        self.gpio = 0
        self._tags = deque(scenario.tag_events())
        self.report = RunReport()

    @property
    def finished(self) -> bool:
        return self.clock_us >= self.duration_us

    # -- commands -----------------------------------------------------------

    def handle(self, frame: wire.Frame) -> bytes:
        """Apply one upstream frame, return the encoded reply."""
        self.report.commands += 1
        try:
            msg = wire.unpack(frame)
        except wire.WireError as e:
            return self._status(wire.StatusCode.MALFORMED, str(e))
        if isinstance(msg, wire.Ping):
            return self._status(wire.StatusCode.OK, f"board_time_us={self._stamp(self.clock_us)}")
        if isinstance(msg, wire.Start):
            self.started = True
            return self._status(wire.StatusCode.OK, "started")
        if isinstance(msg, wire.Stop):
            self.started = False
            return self._status(wire.StatusCode.OK, "stopped")
        if isinstance(msg, wire.GetTopology):
            return wire.encode(wire.pack(self.scenario.topology))
        if isinstance(msg, wire.SetRate):
            self.divider = msg.divider
            for ps in self.probes.values():
                ps.divider_base = ps.next_index
            return self._status(wire.StatusCode.OK, f"divider={msg.divider}")
        if isinstance(msg, wire.Power):
            ps = self.probes.get(msg.channel)
            if ps is None:
                return self._status(wire.StatusCode.UNKNOWN_CHANNEL, f"no probe on channel {msg.channel}")
            ps.powered = msg.on
            return self._status(wire.StatusCode.OK, f"channel {msg.channel} {'on' if msg.on else 'off'}")
        if isinstance(msg, wire.InjectTag):
            if msg.gpio_state == self.gpio:
                return self._status(wire.StatusCode.NO_EDGE, f"gpio already {self.gpio:#04x}")
            self.gpio = msg.gpio_state
            self.report.tag_frames += 1
            tag = wire.encode(wire.pack(TagEvent(self._stamp(self.clock_us), msg.gpio_state)))
            return tag + self._status(wire.StatusCode.OK, f"gpio={msg.gpio_state:#04x}")
        return self._status(wire.StatusCode.UNKNOWN_COMMAND, f"frame type {frame.frame_type:#04x} is not a command")

    def reject(self, detail: str) -> bytes:
        self.report.commands += 1
        return self._status(wire.StatusCode.MALFORMED, detail)

    def _status(self, code, detail: str) -> bytes:
        if code != wire.StatusCode.OK and code != wire.StatusCode.END:
            self.report.bad_commands += 1
        self.report.status_frames += 1
        return wire.encode(wire.pack(wire.Status(int(code), detail)))

    def end_status(self) -> bytes:
        return self._status(wire.StatusCode.END, "end of scenario")

    def _stamp(self, true_us):
        return int(board_time(true_us, self.scenario.drift_ppm))

    # -- sampling -----------------------------------------------------------

    def skip_to(self, until_us: int) -> None:
        """Let board time pass without streaming (real-time mode while stopped)."""
        until_us = min(until_us, self.duration_us)
        for ps in self.probes.values():
            n_end = until_us // ps.period_us
            if n_end > ps.next_index:
                if ps.setup.noise.sigma_mW > 0:
                    ps.rng.standard_normal((n_end - ps.next_index, AVG_COUNT))
                ps.next_index = n_end
        while self._tags and self._tags[0].board_time_us <= until_us:
            ev = self._tags.popleft()
            self.gpio = ev.gpio_state
        self.clock_us = max(self.clock_us, until_us)

    def advance(self, until_us: int) -> bytes:
        """Stream everything with board time in (clock, until]; returns encoded frames."""
        until_us = min(until_us, self.duration_us)
        if until_us <= self.clock_us:
            return b""
        recs = []
        for ps in self.probes.values():
            n_end = until_us // ps.period_us
            if n_end > ps.next_index:
                recs.append(self._batch(ps, ps.next_index, n_end))
                ps.next_index = n_end
        tags = []
        while self._tags and self._tags[0].board_time_us <= until_us:
            ev = self._tags.popleft()
            if ev.gpio_state != self.gpio:
                self.gpio = ev.gpio_state
                tags.append(ev)
        self.clock_us = until_us
        if recs:
            arr = np.concatenate(recs)
            order = np.lexsort((arr["rank"], arr["t"]))
            arr = arr[order]
            frames = arr["frame"]
        else:
            frames = np.empty(0, SAMPLE_DTYPE)
            arr = None
        if not tags:
            return _finish_frames(frames)
        # interleave tags ahead of samples stamped at the same time
        out = []
        times = arr["t"] if arr is not None else np.empty(0, np.int64)
        lo = 0
        for ev in tags:
            hi = int(np.searchsorted(times, ev.board_time_us, side="left"))
            out.append(_finish_frames(frames[lo:hi]))
            out.append(wire.encode(wire.pack(TagEvent(self._stamp(ev.board_time_us), ev.gpio_state))))
            self.report.tag_frames += 1
            lo = hi
        out.append(_finish_frames(frames[lo:]))
        return b"".join(out)

    def _batch(self, ps: ProbeState, n0: int, n1: int):
        idx = np.arange(n0, n1, dtype=np.int64)
        p, i = raw_conversions(ps.setup, idx, ps.rng, ps.powered, ps.period_us)
        keep = ((idx - ps.divider_base + 1) % self.divider) == 0
        idx, p, i = idx[keep], p[keep], i[keep]
        k = len(idx)
        out = np.zeros(k, dtype=[("t", "<i8"), ("rank", "<i4"), ("frame", SAMPLE_DTYPE)])
        if k == 0:
            return out
        true_t = (idx + 1) * ps.period_us
        out["t"] = true_t
        out["rank"] = ps.rank
        f = out["frame"]
        f["sync"] = wire.SYNC
        f["type"] = wire.FrameType.SAMPLE
        f["len"] = wire.SAMPLE_PAYLOAD_LEN
        f["probe_id"] = ps.setup.descriptor.probe_id
        f["seq"] = (ps.seq + np.arange(k)) & 0xFFFFFFFF
        f["board_time_us"] = board_time(true_t, self.scenario.drift_ppm)
        f["voltage_mV"] = ps.setup.nominal_voltage_mV
        # the sum of four integers divided by four is exact in float64, so rint is a true half-even round
        f["current_mA"] = np.rint(i.sum(axis=1) / AVG_COUNT)
        f["power_mW"] = np.rint(p.sum(axis=1) / AVG_COUNT)
        f["avg_count"] = AVG_COUNT
        out["frame"] = f
        ps.seq = (ps.seq + k) & 0xFFFFFFFF
        self.report.frames_per_probe[ps.setup.descriptor.probe_id] += k
        return out


def _finish_frames(frames: np.ndarray) -> bytes:
    """Fill in CRCs and serialize a run of sample records."""
    n = len(frames)
    if n == 0:
        return b""
    frames = np.ascontiguousarray(frames)
    raw = frames.tobytes()
    size = wire.SAMPLE_FRAME_LEN
    crc = binascii.crc_hqx
    frames["crc"] = [crc(raw[k * size + 1 : k * size + size - 2], 0xFFFF) for k in range(n)]
    return frames.tobytes()


# -- driver -------------------------------------------------------------------

_EOF = object()


def _reader(link: Link, q: queue.Queue) -> None:
    dec = wire.StreamDecoder()
    while True:
        data = link.recv(4096)
        if not data:
            for ev in dec.finish():
                q.put(ev)
            q.put(_EOF)
            return
        for ev in dec.feed(data):
            q.put(ev)


def run(scenario: SimScenario, link: Link, *, autostart: bool = False, accel: float | None = None,
        chunk_us: int = 20_000, stop_event: threading.Event | None = None) -> RunReport:
    """Stream *scenario* over *link* until the scenario ends or the peer leaves.

    Commands are read on a helper thread and applied between chunks, i.e. on
    sample boundaries.  With acceleration 0 the board clock only moves while
    streaming, so output depends on the command sequence alone.
    """
    board = Board(scenario)
    accel = scenario.time_acceleration if accel is None else accel
    if accel < 0:
        raise ValueError("acceleration must be >= 0")
    board.started = autostart
    q: queue.Queue = queue.Queue()
    threading.Thread(target=_reader, args=(link, q), daemon=True, name="board-control").start()
    wall0 = time.monotonic()
    peer_gone = False

    def apply(ev) -> None:
        nonlocal peer_gone
        if ev is _EOF:
            peer_gone = True
        elif isinstance(ev, wire.ResyncSkip):
            link.send(board.reject(f"discarded {ev.n} corrupt command bytes"))
        else:
            link.send(board.handle(ev))

    try:
        while not board.finished:
            if stop_event is not None and stop_event.is_set():
                break
            while True:
                try:
                    apply(q.get_nowait())
                except queue.Empty:
                    break
            if peer_gone and not autostart:
                log.info("control channel closed; stopping")
                break
            if accel > 0:
                target = int((time.monotonic() - wall0) * accel * 1e6)
                if not board.started:
                    board.skip_to(target)
                    _wait(q, apply, 0.005)
                    continue
                if target <= board.clock_us:
                    time.sleep(min(0.005, (board.clock_us - target) / accel / 1e6 + 0.0005))
                    continue
                link.send(board.advance(min(target, board.clock_us + chunk_us)))
            else:
                if not board.started:
                    if peer_gone:
                        break
                    _wait(q, apply, 0.5)
                    continue
                link.send(board.advance(board.clock_us + chunk_us))
        if board.finished:
            board.report.finished = True
            link.send(board.end_status())
    except (BrokenPipeError, ConnectionResetError):
        log.info("peer disconnected")
    board.report.board_time_us = board.clock_us
    return board.report


def _wait(q: queue.Queue, apply, timeout: float) -> None:
    try:
        apply(q.get(timeout=timeout))
    except queue.Empty:
        pass


def stream_bytes(scenario: SimScenario, *, divider: int = 1, commands=()) -> bytes:
    """Whole scenario as one byte string, as if STARTed at t=0 (handy offline)."""
    board = Board(scenario)
    out = []
    if divider != 1:
        board.handle(wire.pack(wire.SetRate(divider)))
    for c in commands:
        out.append(board.handle(wire.pack(c)))
    board.started = True
    while not board.finished:
        out.append(board.advance(board.clock_us + 100_000))
    out.append(board.end_status())
    return b"".join(out)
