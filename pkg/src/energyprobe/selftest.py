"""In-process simulate -> record -> report pipeline and the headline checks."""

from __future__ import annotations

import random
import threading
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import analysis
from .collector.service import Collector
from .core import PROBE_OUTPUT_SPS, ProbeDescriptor, ProbeKind, per_probe_rate
from .link import Link, link_pair
from .sim.board import RunReport, run
from .sim.profiles import Constant, Sine, Square
from .sim.scenario import NoiseModel, ProbeSetup, ScenarioError, SimScenario

# fixed host epoch for reproducible logs (2024-01-01T00:00:00Z)
DEFAULT_EPOCH_NS = 1_704_067_200_000_000_000

RATE_TOL = 0.01
ENERGY_TOL = 0.0005


class CorruptingLink(Link):
    """Flips single bytes at chosen absolute offsets of the outgoing stream."""

    def __init__(self, inner: Link, offsets):
        self.inner = inner
        self.offsets = sorted(set(offsets))
        self.sent = 0
        self.flipped = 0

    def send(self, data: bytes) -> None:
        lo, hi = self.sent, self.sent + len(data)
        hits = [o for o in self.offsets if lo <= o < hi]
        if hits:
            buf = bytearray(data)
            for o in hits:
                buf[o - lo] ^= 0x5A
                self.flipped += 1
            data = bytes(buf)
        self.sent = hi
        self.inner.send(data)

    def recv(self, n: int = 65536) -> bytes:
        return self.inner.recv(n)

    def close(self) -> None:
        self.inner.close()


@dataclass
class PipelineResult:
    collector: Collector
    board: RunReport
    log_path: Path
    flipped: int = 0


def run_pipeline(scenario: SimScenario, log_path: str | Path, *, epoch_ns: int | None = DEFAULT_EPOCH_NS,
                 divider: int | None = None, corrupt_offsets=(), admin_token: str | None = None,
                 timeout: float = 300.0) -> PipelineResult:
    """Simulator and collector joined by a socket pair, simulator at full speed."""
    problems = scenario.validate()
    if problems:
        raise ScenarioError(problems)
    host_end, board_end = link_pair()
    board_link = CorruptingLink(board_end, corrupt_offsets) if corrupt_offsets else board_end
    box = {}

    def sim():
        try:
            box["report"] = run(scenario, board_link, accel=0.0)
        finally:
            board_end.close()

    th = threading.Thread(target=sim, daemon=True, name="simulator")
    th.start()
    col = Collector(host_end, log_path, virtual_epoch_ns=epoch_ns, admin_token=admin_token)
    try:
        col.start(divider=divider)
        if not col.wait(timeout):
            raise TimeoutError("pipeline did not finish")
    finally:
        col.close()
        th.join(timeout=10)
    flipped = board_link.flipped if isinstance(board_link, CorruptingLink) else 0
    return PipelineResult(col, box.get("report", RunReport()), Path(log_path), flipped)


def default_scenario(seed: int = 1, duration_s: float = 5.0) -> SimScenario:
    """Six probes on bus 0 with periodic loads and light seeded noise."""
    profiles = [
        (ProbeKind.UsbC, Constant(100.0)),
        (ProbeKind.UsbC, Square(0.5, 0.5, 10.0, 50.0)),
        (ProbeKind.UsbC, Sine(100.0, 50.0, 0.5)),
        (ProbeKind.Coax21x55, Sine(40.0, 10.0, 0.25)),
        (ProbeKind.Coax25x55, Square(0.2, 0.25, 5.0, 65.0)),
        (ProbeKind.Psu12VHPWR, Constant(525.0)),
    ]
    rng = random.Random(seed)
    probes = []
    for i, (kind, prof) in enumerate(profiles):
        desc = ProbeDescriptor(i, 0, i, kind, f"probe{i}")
        probes.append(ProbeSetup(desc, prof, NoiseModel(sigma_mW=20.0, seed=rng.getrandbits(63))))
    return SimScenario(tuple(probes), duration_s, board_serial="SIM-SELFTEST")


@dataclass
class Check:
    name: str
    ok: bool
    detail: str

    def line(self) -> str:
        return f"{self.name} {'OK' if self.ok else 'FAIL'} ({self.detail})"


@dataclass
class SelftestResult:
    checks: list[Check] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return all(c.ok for c in self.checks)

    def failed(self) -> list[Check]:
        return [c for c in self.checks if not c.ok]


def check_session(scenario: SimScenario, session: analysis.Session, divider: int = 1,
                  corruption_expected: bool = False) -> SelftestResult:
    res = SelftestResult()
    topo = scenario.topology
    counts = topo.bus_counts()

    worst_rate = 0.0
    rates = []
    for d in topo.probes:
        expected = per_probe_rate(counts[d.bus]) / divider
        s = analysis.summarize(session, d.probe_id)
        rates.append(s.effective_sps)
        worst_rate = max(worst_rate, abs(s.effective_sps - expected) / expected)
    nominal = PROBE_OUTPUT_SPS / divider
    res.checks.append(Check(
        "rate", worst_rate <= RATE_TOL,
        f"{nominal:g}±1% SPS; measured {min(rates):.1f}..{max(rates):.1f}" if rates else "no probes",
    ))

    integral = all(analysis.power_resolution_mW(session.get(d.probe_id)) in (1, None) for d in topo.probes)
    one_mw_step = any(
        np.any(np.abs(np.diff(session.get(d.probe_id).power_mW)) == 1) for d in topo.probes
    )
    res.checks.append(Check(
        "resolution", integral and one_mw_step,
        "1 mW" if integral and one_mw_step else f"integer={integral} 1mW-step-seen={one_mw_step}",
    ))

    worst = 0.0
    for p in scenario.probes:
        s = session.get(p.descriptor.probe_id)
        if len(s) == 0:
            worst = float("inf")
            continue
        got = analysis.board_window_energy(s, session.clock, 0.0, scenario.duration_s).joules
        want = p.profile.energy(0.0, scenario.duration_s)
        if want:
            worst = max(worst, abs(got - want) / abs(want))
    res.checks.append(Check("energy", worst <= ENERGY_TOL, f"<0.05%; worst {worst * 100:.4f}%"))

    corr = session.corruption or 0
    if corruption_expected:
        res.checks.append(Check("resync", corr > 0, f"{corr} resync events"))
    else:
        drops = sum(session.get(d.probe_id).drops for d in topo.probes)
        res.checks.append(Check("integrity", drops == 0 and corr == 0, f"{drops} drops, {corr} resync events"))
    return res


def corruption_offsets(n: int, seed: int, stream_hint: int = 200_000) -> list[int]:
    """Byte offsets well inside the sample stream (past the handshake)."""
    rng = random.Random(seed)
    return sorted(rng.randrange(4096, stream_hint) for _ in range(n))


def selftest(log_path: str | Path, *, scenario: SimScenario | None = None, seed: int = 1,
             corrupt: int = 0, divider: int = 1) -> tuple[SelftestResult, PipelineResult]:
    sc = scenario or default_scenario(seed)
    offs = corruption_offsets(corrupt, seed) if corrupt else ()
    pr = run_pipeline(sc, log_path, divider=None if divider == 1 else divider, corrupt_offsets=offs)
    session = analysis.load_session(log_path)
    return check_session(sc, session, divider, corruption_expected=bool(corrupt)), pr
