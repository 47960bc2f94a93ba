"""Domain types, units and quantization rules shared by every layer.

All electrical quantities travel as integers: millivolts, milliamps and
milliwatts.  Rounding is round-half-to-even everywhere.
"""

from __future__ import annotations

import enum
import math
from collections import Counter
from dataclasses import dataclass
from typing import Iterable, Sequence

MAX_PROBES = 12
MAX_PROBES_PER_BUS = 6
N_BUSES = 2
BUS_CAPACITY_SPS = 6000
PROBE_CONVERSION_SPS = 4000
AVG_COUNT = 4
PROBE_OUTPUT_SPS = PROBE_CONVERSION_SPS // AVG_COUNT  # 1000
CONVERSION_PERIOD_US = 1_000_000 // PROBE_CONVERSION_SPS  # 250
GPIO_LINES = 8


class ProbeKind(enum.IntEnum):
    """Physical probe flavour.  The integer value is the wire code."""

    UsbC = 0
    Coax21x55 = 1
    Coax25x55 = 2
    PsuRail33 = 3
    PsuRail5 = 4
    PsuRail12 = 5
    Psu12VHPWR = 6

    @property
    def max_power_mW(self) -> int | None:
        return _MAX_POWER_MW.get(self)

    @property
    def nominal_voltage_mV(self) -> int:
        return _NOMINAL_MV[self]


# USB-PD 3.1 EPR and the 12VHPWR connector rating.  Coax jacks have no stated ceiling.
_MAX_POWER_MW = {ProbeKind.UsbC: 240_000, ProbeKind.Psu12VHPWR: 600_000}

_NOMINAL_MV = {
    ProbeKind.UsbC: 20_000,
    ProbeKind.Coax21x55: 19_500,
    ProbeKind.Coax25x55: 19_500,
    ProbeKind.PsuRail33: 3_300,
    ProbeKind.PsuRail5: 5_000,
    ProbeKind.PsuRail12: 12_000,
    ProbeKind.Psu12VHPWR: 12_000,
}


@dataclass(frozen=True, slots=True)
class Sample:
    """One averaged measurement delivered by one probe."""

    probe_id: int
    seq: int
    board_time_us: int
    voltage_mV: int
    current_mA: int
    power_mW: int
    avg_count: int = AVG_COUNT

    def consistency_slack_mW(self) -> float:
        """Largest allowed gap between power_mW and V*I.

        Current is quantized to 1 mA, so V*I moves in steps of V/1000 mW;
        averaging adds half a quantum on each of power and current.
        """
        return 0.5 + abs(self.voltage_mV) / 1000.0

    def is_consistent(self) -> bool:
        vi = self.voltage_mV * self.current_mA / 1000.0
        return abs(self.power_mW - vi) <= self.consistency_slack_mW()


@dataclass(frozen=True, slots=True)
class ProbeDescriptor:
    probe_id: int
    bus: int
    position_on_bus: int
    kind: ProbeKind
    label: str = ""


@dataclass(frozen=True)
class Topology:
    probes: tuple[ProbeDescriptor, ...] = ()
    board_serial: str = ""

    def __post_init__(self):
        # accept any iterable, store a tuple so the value stays hashable
        object.__setattr__(self, "probes", tuple(self.probes))

    def probe(self, probe_id: int) -> ProbeDescriptor | None:
        for p in self.probes:
            if p.probe_id == probe_id:
                return p
        return None

    def bus_counts(self) -> dict[int, int]:
        return dict(Counter(p.bus for p in self.probes))

    def poll_order(self) -> list[ProbeDescriptor]:
        """Fixed round-robin order: bus, then position on the bus."""
        return sorted(self.probes, key=lambda p: (p.bus, p.position_on_bus, p.probe_id))

    def to_dict(self) -> dict:
        return {
            "board_serial": self.board_serial,
            "probes": [
                {
                    "probe_id": p.probe_id,
                    "bus": p.bus,
                    "position_on_bus": p.position_on_bus,
                    "kind": p.kind.name,
                    "label": p.label,
                }
                for p in self.probes
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Topology":
        probes = [
            ProbeDescriptor(
                probe_id=int(p["probe_id"]),
                bus=int(p["bus"]),
                position_on_bus=int(p["position_on_bus"]),
                kind=ProbeKind[p["kind"]],
                label=p.get("label", ""),
            )
            for p in d.get("probes", [])
        ]
        return cls(probes=tuple(probes), board_serial=d.get("board_serial", ""))


@dataclass(frozen=True, slots=True)
class TagEvent:
    board_time_us: int
    gpio_state: int

    def bit(self, b: int) -> bool:
        return bool((self.gpio_state >> b) & 1)


def check_tag_edges(events: Sequence[TagEvent], initial_state: int = 0) -> None:
    """Raise ValueError unless *events* is time-ordered and every entry is a real edge."""
    prev_t = None
    prev_state = initial_state
    for ev in events:
        if not 0 <= ev.gpio_state <= 0xFF:
            raise ValueError(f"gpio_state {ev.gpio_state:#x} is not an 8-bit mask")
        if prev_t is not None and ev.board_time_us < prev_t:
            raise ValueError(f"tag at {ev.board_time_us} us precedes previous tag at {prev_t} us")
        if ev.gpio_state == prev_state:
            raise ValueError(f"tag at {ev.board_time_us} us repeats state {ev.gpio_state:#04x}")
        prev_t, prev_state = ev.board_time_us, ev.gpio_state


@dataclass(frozen=True)
class BusBudget:
    bus_capacity_sps: int = BUS_CAPACITY_SPS

    def per_probe_rate(self, n_probes: int) -> int:
        return per_probe_rate(n_probes, self.bus_capacity_sps)


def quantize_mW(power_W: float) -> int:
    """Watts to integer milliwatts, round-half-to-even."""
    if not math.isfinite(power_W):
        raise ValueError(f"cannot quantize non-finite power {power_W!r}")
    # round() on a float is already half-to-even
    return int(round(power_W * 1000.0))


def _round_half_even_ratio(num: int, den: int) -> int:
    q, r = divmod(num, den)
    twice = 2 * r
    if twice > den or (twice == den and q % 2 == 1):
        q += 1
    return q


def average4(raw: Sequence[tuple[int, int, int]]) -> tuple[int, int, int, int]:
    """Average raw (voltage_mV, current_mA, power_mW) conversions.

    Returns (voltage_mV, current_mA, power_mW, avg_count).  Means are
    computed exactly on integers and rounded half-to-even.
    """
    n = len(raw)
    if n == 0:
        raise ValueError("average4 needs at least one conversion")
    if n > 255:
        raise ValueError("avg_count must fit in one byte")
    sums = [sum(c[i] for c in raw) for i in range(3)]
    v, i, p = (_round_half_even_ratio(s, n) for s in sums)
    return v, i, p, n


def per_probe_rate(n_probes_on_bus: int, bus_capacity_sps: int = BUS_CAPACITY_SPS) -> int:
    if not 1 <= n_probes_on_bus <= MAX_PROBES_PER_BUS:
        raise ValueError(f"a bus carries 1..{MAX_PROBES_PER_BUS} probes, got {n_probes_on_bus}")
    return min(PROBE_OUTPUT_SPS, bus_capacity_sps // n_probes_on_bus)


def validate_topology(t: Topology) -> list[str]:
    """Every violated topology constraint, as human readable strings (empty = ok)."""
    out: list[str] = []
    if len(t.probes) > MAX_PROBES:
        out.append(f"topology has {len(t.probes)} probes, limit is {MAX_PROBES}")
    for p in t.probes:
        if not 0 <= p.probe_id < MAX_PROBES:
            out.append(f"probe {p.probe_id}: id outside 0..{MAX_PROBES - 1}")
        if not 0 <= p.bus < N_BUSES:
            out.append(f"probe {p.probe_id}: bus {p.bus} outside 0..{N_BUSES - 1}")
        if not 0 <= p.position_on_bus < MAX_PROBES_PER_BUS:
            out.append(
                f"probe {p.probe_id}: position {p.position_on_bus} outside 0..{MAX_PROBES_PER_BUS - 1}"
            )
        if not isinstance(p.kind, ProbeKind):
            out.append(f"probe {p.probe_id}: unknown kind {p.kind!r}")
        if len(p.label.encode("utf-8")) > 255:
            out.append(f"probe {p.probe_id}: label longer than 255 bytes")
    for bus, n in sorted(t.bus_counts().items()):
        if n > MAX_PROBES_PER_BUS:
            out.append(f"bus {bus} exceeds {MAX_PROBES_PER_BUS} probes ({n})")
    for pid, n in sorted(Counter(p.probe_id for p in t.probes).items()):
        if n > 1:
            out.append(f"duplicate probe_id {pid}")
    for (bus, pos), n in sorted(Counter((p.bus, p.position_on_bus) for p in t.probes).items()):
        if n > 1:
            out.append(f"duplicate position {pos} on bus {bus}")
    if len(t.board_serial.encode("utf-8")) > 255:
        out.append("board serial longer than 255 bytes")
    return out


def gpio_edges(states: Iterable[tuple[int, int]], initial_state: int = 0) -> list[TagEvent]:
    """Collapse (time_us, state) snapshots into edge-only TagEvents."""
    out = []
    prev = initial_state
    for t, s in states:
        if s != prev:
            out.append(TagEvent(t, s))
            prev = s
    return out
