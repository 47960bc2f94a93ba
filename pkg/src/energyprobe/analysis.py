"""Offline analysis of session logs: energy, regions, summaries, CSV."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import wire
from .collector.service import ClockMap
from .collector.sessionlog import LogFormatError, read_header, iter_records
from .core import TagEvent, Topology

# reference wattmeter used for comparison: ~50 SPS at 0.1 W
REFERENCE_SPS = 50.0
REFERENCE_RESOLUTION_mW = 100
CLAIMED_SPS = 1000.0
CLAIMED_RESOLUTION_mW = 1
RATE_TOLERANCE = 0.01

_PAYLOAD_DTYPE = np.dtype(
    [("probe_id", "u1"), ("seq", "<u4"), ("board_time_us", "<u8"),
     ("voltage_mV", "<i4"), ("current_mA", "<i4"), ("power_mW", "<i4"), ("avg_count", "u1")]
)
assert _PAYLOAD_DTYPE.itemsize == wire.SAMPLE_PAYLOAD_LEN


@dataclass
class ProbeSeries:
    probe_id: int
    host_ns: np.ndarray
    seq: np.ndarray
    voltage_mV: np.ndarray
    current_mA: np.ndarray
    power_mW: np.ndarray
    avg_count: np.ndarray
    board_time_us: np.ndarray

    def __len__(self) -> int:
        return len(self.host_ns)

    @property
    def drops(self) -> int:
        if len(self.seq) < 2:
            return 0
        gaps = (np.diff(self.seq.astype(np.int64)) - 1) % (1 << 32)
        return int(gaps.sum())

    @classmethod
    def empty(cls, probe_id: int) -> "ProbeSeries":
        z = np.zeros(0, np.int64)
        return cls(probe_id, z, z, z, z, z, z, z)


@dataclass
class Session:
    path: Path | None
    metadata: dict
    topology: Topology | None
    clock: ClockMap
    series: dict[int, ProbeSeries]
    tags: list[tuple[int, TagEvent]]
    statuses: list[tuple[int, wire.Status]]
    records: int
    metrics: dict | None = None

    @property
    def corruption(self) -> int | None:
        return None if self.metrics is None else int(self.metrics.get("corruption", 0))

    def probe_ids(self) -> list[int]:
        if self.topology is not None:
            return sorted(p.probe_id for p in self.topology.probes)
        return sorted(self.series)

    def knows(self, probe_id: int) -> bool:
        return probe_id in self.probe_ids()

    def get(self, probe_id: int) -> ProbeSeries:
        return self.series.get(probe_id) or ProbeSeries.empty(probe_id)


def load_session(path: str | Path, strict: bool = False) -> Session:
    """Decode a session log.  Board times are mapped to host time with the log's clock map."""
    path = Path(path)
    data = path.read_bytes()
    meta, off = read_header(data)
    clock = ClockMap(int(meta.get("clock_offset_ns", 0)), float(meta.get("clock_drift_ppm", 0.0)))
    topo = Topology.from_dict(meta["topology"]) if meta.get("topology") else None
    payloads = []
    tags, statuses = [], []
    n = 0
    for rec in iter_records(data, off, strict=strict):
        n += 1
        fr = rec.frame
        if fr.frame_type == wire.FrameType.SAMPLE:
            payloads.append(fr.payload)
        elif fr.frame_type == wire.FrameType.TAG:
            ev = wire.unpack(fr)
            tags.append((clock.to_host(ev.board_time_us), ev))
        elif fr.frame_type == wire.FrameType.STATUS:
            try:
                statuses.append((rec.host_time_ns, wire.unpack(fr)))
            except wire.WireError:
                pass
    series = _series_from_payloads(b"".join(payloads), clock)
    metrics = None
    mpath = path.with_name(path.name + ".metrics.json")
    if mpath.exists():
        try:
            metrics = json.loads(mpath.read_text())
        except json.JSONDecodeError:
            metrics = None
    return Session(path, meta, topo, clock, series, tags, statuses, n, metrics)


def _series_from_payloads(blob: bytes, clock: ClockMap) -> dict[int, ProbeSeries]:
    arr = np.frombuffer(blob, dtype=_PAYLOAD_DTYPE)
    out = {}
    for pid in np.unique(arr["probe_id"]):
        a = arr[arr["probe_id"] == pid]
        bt = a["board_time_us"].astype(np.int64)
        host = bt * 1000
        if clock.drift_ppm:
            host = host + np.rint(host * clock.drift_ppm * 1e-6).astype(np.int64)
        host = host + clock.offset_ns
        out[int(pid)] = ProbeSeries(
            int(pid), host, a["seq"].astype(np.int64), a["voltage_mV"].astype(np.int64),
            a["current_mA"].astype(np.int64), a["power_mW"].astype(np.int64),
            a["avg_count"].astype(np.int64), bt,
        )
    return out


# -- integration ----------------------------------------------------------------


@dataclass(frozen=True)
class Integral:
    joules: float
    no_data: bool = False
    clipped: bool = False
    extrapolated: bool = False
    single_sample: bool = False


def nominal_period_ns(t_ns: np.ndarray) -> int:
    if len(t_ns) < 2:
        return 0
    return int(np.median(np.diff(t_ns)))


class PowerCurve:
    """Piecewise-linear power through the samples, held flat for one sample
    period beyond the first and last sample, zero outside that.

    ``energy(a, b)`` is F(b) - F(a) of the exact antiderivative, so results
    are additive over any partition of a window and depend on time
    differences only.
    """

    def __init__(self, t_ns: Sequence[int], p_mW: Sequence[float], hold_ns: int | None = None):
        t = np.asarray(t_ns, dtype=np.int64)
        p = np.asarray(p_mW, dtype=np.float64) / 1000.0
        if len(t) and np.any(np.diff(t) < 0):
            raise ValueError("samples must be ordered by time")
        self.n = len(t)
        self.ref = int(t[0]) if self.n else 0
        self.x = (t - self.ref).astype(np.float64) / 1e9
        self.p = p
        self.h = (nominal_period_ns(t) if hold_ns is None else hold_ns) / 1e9
        if self.n >= 2:
            seg = np.diff(self.x) * (self.p[1:] + self.p[:-1]) / 2.0
            self.cum = np.concatenate(([0.0], np.cumsum(seg)))
        else:
            self.cum = np.zeros(self.n)

    def _sec(self, t_ns: int) -> float:
        return (int(t_ns) - self.ref) / 1e9

    @property
    def lo(self) -> float:
        return self.x[0] - self.h

    @property
    def hi(self) -> float:
        return self.x[-1] + self.h

    def F(self, s: float) -> float:
        """Integral of the curve from its left edge up to *s* seconds (relative)."""
        x, p, h = self.x, self.p, self.h
        if s <= x[0] - h:
            return 0.0
        head = p[0] * h
        if s <= x[0]:
            return p[0] * (s - (x[0] - h))
        if s >= x[-1]:
            return head + self.cum[-1] + p[-1] * min(s - x[-1], h)
        k = int(np.searchsorted(x, s, side="right")) - 1
        dx = x[k + 1] - x[k]
        frac = (s - x[k]) / dx if dx > 0 else 0.0
        ps = p[k] + (p[k + 1] - p[k]) * frac
        return head + self.cum[k] + (s - x[k]) * (p[k] + ps) / 2.0

    def energy(self, t0_ns: int, t1_ns: int) -> Integral:
        if t1_ns < t0_ns:
            raise ValueError("window end precedes start")
        if self.n == 0:
            return Integral(0.0, no_data=True)
        a, b = self._sec(t0_ns), self._sec(t1_ns)
        if self.n == 1:
            return Integral(float(self.p[0] * (b - a)), single_sample=True)
        if b < self.lo or a > self.hi or (a < b and (b <= self.lo or a >= self.hi)):
            return Integral(0.0, no_data=True)
        clipped = a < self.lo or b > self.hi
        extrap = (a < self.x[0] and b > self.lo) or (b > self.x[-1] and a < self.hi)
        return Integral(self.F(b) - self.F(a), clipped=clipped, extrapolated=extrap)


def integrate(t_ns: Sequence[int], p_mW: Sequence[float], t0_ns: int, t1_ns: int,
              hold_ns: int | None = None) -> Integral:
    """Energy in joules of the sampled power over [t0, t1] by the trapezoidal rule."""
    return PowerCurve(t_ns, p_mW, hold_ns).energy(t0_ns, t1_ns)


# -- regions --------------------------------------------------------------------


@dataclass(frozen=True)
class RegionInterval:
    start_ns: int
    end_ns: int
    energy_J: float
    mean_power_W: float
    sample_count: int
    unclosed: bool = False


@dataclass
class RegionReport:
    bit: int
    intervals: list[RegionInterval] = field(default_factory=list)
    alignment_tolerance_ns: int = 0

    @property
    def total_energy_J(self) -> float:
        return sum(iv.energy_J for iv in self.intervals)

    @property
    def unclosed(self) -> bool:
        return any(iv.unclosed for iv in self.intervals)


def region_bounds(tags: Iterable[tuple[int, TagEvent]], bit: int, initial_state: int = 0):
    """(start_ns, end_ns | None) per maximal high period of *bit*."""
    if not 0 <= bit < 8:
        raise ValueError("bit must be in 0..7")
    out = []
    high_since = None  # None: high since before the first sample
    level = (initial_state >> bit) & 1
    for t, ev in tags:
        new = (ev.gpio_state >> bit) & 1
        if new and not level:
            high_since = t
        elif level and not new:
            out.append((high_since, t))
            high_since = None
        level = new
    if level:
        out.append((high_since, None))
    return out


def regions(tags: Sequence[tuple[int, TagEvent]], t_ns, p_mW, bit: int,
            initial_state: int = 0) -> RegionReport:
    t = np.asarray(t_ns, dtype=np.int64)
    curve = PowerCurve(t, p_mW)
    rep = RegionReport(bit, alignment_tolerance_ns=nominal_period_ns(t))
    last = int(t[-1]) if len(t) else 0
    first = int(t[0]) if len(t) else 0
    for start, end in region_bounds(tags, bit, initial_state):
        unclosed = end is None
        if start is None:
            start = first
        if unclosed:
            end = max(last, start)
        e = curve.energy(start, end).joules
        dur = (end - start) / 1e9
        count = int(np.searchsorted(t, end, "left") - np.searchsorted(t, start, "left"))
        rep.intervals.append(RegionInterval(start, end, e, e / dur if dur > 0 else 0.0, count, unclosed))
    return rep


# -- summaries ------------------------------------------------------------------


@dataclass
class Summary:
    probe_id: int
    duration_s: float
    samples: int
    effective_sps: float
    min_power_W: float
    mean_power_W: float
    max_power_W: float
    energy_J: float
    drops: int
    corruption: int | None
    unknown_probe: bool = False
    empty: bool = False


def summarize_series(s: ProbeSeries, corruption: int | None = None, unknown: bool = False) -> Summary:
    n = len(s)
    if n == 0:
        return Summary(s.probe_id, 0.0, 0, 0.0, 0.0, 0.0, 0.0, 0.0, 0, corruption, unknown, True)
    period = nominal_period_ns(s.host_ns)
    duration = (int(s.host_ns[-1]) - int(s.host_ns[0]) + period) / 1e9
    p = s.power_mW / 1000.0
    energy = integrate(s.host_ns, s.power_mW, int(s.host_ns[0]) - period, int(s.host_ns[-1])).joules
    return Summary(
        probe_id=s.probe_id,
        duration_s=duration,
        samples=n,
        effective_sps=n / duration if duration > 0 else 0.0,
        min_power_W=float(p.min()),
        mean_power_W=float(p.mean()),
        max_power_W=float(p.max()),
        energy_J=energy,
        drops=s.drops,
        corruption=corruption,
        unknown_probe=unknown,
    )


def summarize(session: Session, probe_id: int) -> Summary:
    unknown = not session.knows(probe_id)
    return summarize_series(session.get(probe_id), session.corruption, unknown)


@dataclass(frozen=True)
class ReferenceComparison:
    effective_sps: float
    rate_ratio: float
    resolution_mW: int
    resolution_ratio: float
    rate_claim_ok: bool
    resolution_claim_ok: bool


def compare_reference(summary: Summary, resolution_mW: int = CLAIMED_RESOLUTION_mW) -> ReferenceComparison:
    eff = summary.effective_sps
    return ReferenceComparison(
        effective_sps=eff,
        rate_ratio=eff / REFERENCE_SPS,
        resolution_mW=resolution_mW,
        resolution_ratio=REFERENCE_RESOLUTION_mW / resolution_mW,
        rate_claim_ok=abs(eff - CLAIMED_SPS) <= RATE_TOLERANCE * CLAIMED_SPS,
        resolution_claim_ok=resolution_mW <= CLAIMED_RESOLUTION_mW,
    )


def power_resolution_mW(s: ProbeSeries) -> int | None:
    """Wire quantum of the stored power values: 1 when every value is an integer mW.

    Values are integers by construction of the frame format; this checks the
    decoded arrays really are integral rather than assuming it.
    """
    if len(s) == 0:
        return None
    p = s.power_mW
    if p.dtype.kind in "iu" or np.all(np.asarray(p) == np.round(p)):
        return 1
    return None


# -- lifecycle phases -----------------------------------------------------------


@dataclass(frozen=True)
class PhaseStat:
    name: str
    start_s: float
    end_s: float
    expected_W: float
    mean_W: float
    samples: int

    @property
    def rel_error(self) -> float:
        if self.expected_W == 0:
            return abs(self.mean_W)
        return abs(self.mean_W - self.expected_W) / self.expected_W


def phase_stats(s: ProbeSeries, clock: ClockMap, phases, guard_ns: int | None = None) -> list[PhaseStat]:
    """Mean measured power inside each (name, start_s, end_s, power_W) phase.

    One sample period is trimmed at both phase edges: a sample straddling
    an edge averages conversions from both sides of it.
    """
    guard = nominal_period_ns(s.host_ns) if guard_ns is None else guard_ns
    out = []
    for ph in phases:
        a = clock.to_host(int(round(ph.start_s * 1e6))) + guard
        b = clock.to_host(int(round(ph.end_s * 1e6))) - guard
        lo, hi = np.searchsorted(s.host_ns, [a, b], "left")
        n = int(hi - lo)
        mean = float(s.power_mW[lo:hi].mean() / 1000.0) if n else math.nan
        out.append(PhaseStat(ph.name, ph.start_s, ph.end_s, ph.power_W, mean, n))
    return out


def board_window_energy(s: ProbeSeries, clock: ClockMap, t0_s: float, t1_s: float) -> Integral:
    return integrate(s.host_ns, s.power_mW, clock.to_host(int(round(t0_s * 1e6))),
                     clock.to_host(int(round(t1_s * 1e6))))


# -- CSV ------------------------------------------------------------------------

SAMPLE_HEADER = ["host_time_ns", "probe_id", "seq", "voltage_mV", "current_mA", "power_mW", "avg_count"]
TAG_HEADER = ["host_time_ns", "gpio_state"]


def tags_path_for(path: str | Path) -> Path:
    path = Path(path)
    stem = path.name[:-4] if path.name.endswith(".csv") else path.name
    return path.with_name(stem + ".tags.csv")


def export_csv(session: Session, probes: Iterable[int] | None, path: str | Path) -> int:
    """Write samples (time-ordered across probes) and the sibling tags file; returns data rows."""
    path = Path(path)
    wanted = set(session.series) if probes is None else set(probes)
    cols = []
    for pid in sorted(wanted & set(session.series)):
        s = session.series[pid]
        cols.append(np.column_stack([s.host_ns, np.full(len(s), pid), s.seq, s.voltage_mV,
                                     s.current_mA, s.power_mW, s.avg_count]))
    rows = np.concatenate(cols) if cols else np.zeros((0, len(SAMPLE_HEADER)), np.int64)
    rows = rows[np.lexsort((rows[:, 1], rows[:, 0]))] if len(rows) else rows
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(SAMPLE_HEADER)
        w.writerows(rows.tolist())
    with open(tags_path_for(path), "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(TAG_HEADER)
        for t, ev in session.tags:
            w.writerow([t, f"0x{ev.gpio_state:02x}"])
    return len(rows)


def read_csv(path: str | Path) -> dict[int, tuple[np.ndarray, np.ndarray]]:
    """Per probe (host_time_ns, power_mW) arrays from an exported sample CSV."""
    out: dict[int, tuple[list, list]] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        r = csv.reader(fh)
        header = next(r)
        if header != SAMPLE_HEADER:
            raise LogFormatError(f"unexpected CSV header {header}")
        for row in r:
            t, pid, p = int(row[0]), int(row[1]), int(row[5])
            ts, ps = out.setdefault(pid, ([], []))
            ts.append(t)
            ps.append(p)
    return {pid: (np.array(ts, np.int64), np.array(ps, np.int64)) for pid, (ts, ps) in out.items()}


def read_tags_csv(path: str | Path) -> list[tuple[int, TagEvent]]:
    out = []
    with open(path, newline="", encoding="utf-8") as fh:
        r = csv.reader(fh)
        next(r)
        for t, state in r:
            out.append((int(t), TagEvent(0, int(state, 16))))
    return out
