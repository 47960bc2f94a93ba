"""Scenario files: YAML documents describing one simulated board run.

Schema (keys not listed are rejected)::

    board_serial: str                 # default "SIM-0000"
    duration_s: float                 # board-clock seconds of streaming
    time_acceleration: float          # 1.0 real time, 0 as fast as possible
    drift_ppm: float                  # optional constant board clock drift
    probes:
      - id: int                       # 0..11
        bus: int                      # 0 or 1
        position: int                 # 0..5 on that bus
        kind: UsbC | Coax21x55 | Coax25x55 | PsuRail33 | PsuRail5 | PsuRail12 | Psu12VHPWR
        label: str
        voltage_mV: int               # default: nominal voltage of the kind
        profile: {type: constant|square|sine|trace|ramp|lifecycle, ...}
        noise: {sigma_mW: float, seed: int}
    tags:                             # GPIO edges injected by the board
      - {t_s: float, state: int}
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from ..core import ProbeDescriptor, ProbeKind, TagEvent, Topology, check_tag_edges, validate_topology
from .profiles import LoadProfile, Trace, profile_from_dict, profile_min_power_W, profile_to_dict


class ScenarioError(ValueError):
    """Scenario rejected at load; ``violations`` lists every problem found."""

    def __init__(self, violations: list[str]):
        self.violations = list(violations)
        super().__init__("; ".join(self.violations))


@dataclass(frozen=True)
class NoiseModel:
    sigma_mW: float = 0.0
    seed: int = 0


@dataclass(frozen=True)
class ProbeSetup:
    descriptor: ProbeDescriptor
    profile: LoadProfile
    noise: NoiseModel = NoiseModel()
    voltage_mV: int | None = None

    @property
    def nominal_voltage_mV(self) -> int:
        if self.voltage_mV is not None:
            return self.voltage_mV
        return self.descriptor.kind.nominal_voltage_mV


@dataclass(frozen=True)
class SimScenario:
    probes: tuple[ProbeSetup, ...]
    duration_s: float
    board_serial: str = "SIM-0000"
    time_acceleration: float = 0.0
    drift_ppm: float = 0.0
    tags: tuple[tuple[float, int], ...] = field(default_factory=tuple)

    @property
    def topology(self) -> Topology:
        return Topology(tuple(p.descriptor for p in self.probes), self.board_serial)

    def setup(self, probe_id: int) -> ProbeSetup:
        for p in self.probes:
            if p.descriptor.probe_id == probe_id:
                return p
        raise KeyError(probe_id)

    def tag_events(self) -> list[TagEvent]:
        return [TagEvent(int(round(t * 1e6)), s) for t, s in self.tags]

    def validate(self) -> list[str]:
        return validate_scenario(self)

    def to_dict(self) -> dict:
        return {
            "board_serial": self.board_serial,
            "duration_s": self.duration_s,
            "time_acceleration": self.time_acceleration,
            "drift_ppm": self.drift_ppm,
            "probes": [
                {
                    "id": p.descriptor.probe_id,
                    "bus": p.descriptor.bus,
                    "position": p.descriptor.position_on_bus,
                    "kind": p.descriptor.kind.name,
                    "label": p.descriptor.label,
                    "voltage_mV": p.nominal_voltage_mV,
                    "profile": profile_to_dict(p.profile),
                    "noise": {"sigma_mW": p.noise.sigma_mW, "seed": p.noise.seed},
                }
                for p in self.probes
            ],
            "tags": [{"t_s": t, "state": s} for t, s in self.tags],
        }


def validate_scenario(sc: SimScenario) -> list[str]:
    out = validate_topology(sc.topology)
    if not (math.isfinite(sc.duration_s) and sc.duration_s > 0):
        out.append(f"duration_s must be positive, got {sc.duration_s}")
    if not (math.isfinite(sc.time_acceleration) and sc.time_acceleration >= 0):
        out.append(f"time_acceleration must be >= 0, got {sc.time_acceleration}")
    for p in sc.probes:
        d = p.descriptor
        name = f"probe {d.probe_id} ({d.kind.name})"
        peak = p.profile.max_power_W()
        if profile_min_power_W(p.profile) < 0:
            out.append(f"{name}: profile has negative power")
        ceiling = d.kind.max_power_mW
        if ceiling is not None and peak * 1000 > ceiling:
            out.append(f"{name}: profile peak {peak:g} W exceeds the {ceiling / 1000:g} W ceiling")
        if p.nominal_voltage_mV <= 0:
            out.append(f"{name}: voltage_mV must be positive")
        if p.noise.sigma_mW < 0:
            out.append(f"{name}: sigma_mW must be >= 0")
        if not 0 <= p.noise.seed < 2**64:
            out.append(f"{name}: seed must fit in 64 bits")
        if isinstance(p.profile, Trace):
            ts = [t for t, _ in p.profile.points]
            if not ts or ts[0] != 0.0:
                out.append(f"{name}: trace must start at t=0")
            if any(b < a for a, b in zip(ts, ts[1:])):
                out.append(f"{name}: trace times must be non-decreasing")
    try:
        check_tag_edges(sc.tag_events())
    except ValueError as e:
        out.append(f"tag schedule: {e}")
    for t, _ in sc.tags:
        if not 0 <= t <= sc.duration_s:
            out.append(f"tag schedule: t={t} outside [0, {sc.duration_s}]")
    return out


_TOP_KEYS = {"board_serial", "duration_s", "time_acceleration", "drift_ppm", "probes", "tags"}
_PROBE_KEYS = {"id", "bus", "position", "kind", "label", "voltage_mV", "profile", "noise"}


def scenario_from_dict(doc: dict) -> SimScenario:
    """Build and validate a scenario; raises ScenarioError listing every violation."""
    if not isinstance(doc, dict):
        raise ScenarioError(["scenario document must be a mapping"])
    errors = [f"unknown key {k!r}" for k in sorted(set(doc) - _TOP_KEYS)]
    probes = []
    for i, pd in enumerate(doc.get("probes") or []):
        extra = set(pd) - _PROBE_KEYS
        if extra:
            errors.append(f"probes[{i}]: unknown keys {sorted(extra)}")
        try:
            kind = ProbeKind[pd["kind"]]
        except KeyError:
            errors.append(f"probes[{i}]: unknown or missing kind {pd.get('kind')!r}")
            continue
        try:
            desc = ProbeDescriptor(int(pd["id"]), int(pd.get("bus", 0)), int(pd.get("position", 0)),
                                   kind, str(pd.get("label", "")))
            profile = profile_from_dict(pd["profile"])
            noise = NoiseModel(**(pd.get("noise") or {}))
        except (KeyError, TypeError, ValueError) as e:
            errors.append(f"probes[{i}]: {e}")
            continue
        v = pd.get("voltage_mV")
        probes.append(ProbeSetup(desc, profile, noise, None if v is None else int(v)))
    tags = []
    for i, td in enumerate(doc.get("tags") or []):
        try:
            tags.append((float(td["t_s"]), int(td["state"])))
        except (KeyError, TypeError, ValueError) as e:
            errors.append(f"tags[{i}]: {e}")
    if errors:
        raise ScenarioError(errors)
    sc = SimScenario(
        probes=tuple(probes),
        duration_s=float(doc.get("duration_s", 10.0)),
        board_serial=str(doc.get("board_serial", "SIM-0000")),
        time_acceleration=float(doc.get("time_acceleration", 0.0)),
        drift_ppm=float(doc.get("drift_ppm", 0.0)),
        tags=tuple(tags),
    )
    violations = validate_scenario(sc)
    if violations:
        raise ScenarioError(violations)
    return sc


def load_scenario(path: str | Path) -> SimScenario:
    text = Path(path).read_text(encoding="utf-8")
    try:
        doc = yaml.safe_load(text)
    except yaml.YAMLError as e:
        raise ScenarioError([f"{path}: not valid YAML ({e})"]) from None
    return scenario_from_dict(doc)


def dump_scenario(sc: SimScenario) -> str:
    return yaml.safe_dump(sc.to_dict(), sort_keys=False)
