"""Ground-truth load profiles driving the simulated probes.

Every profile evaluates on scalars or numpy arrays of seconds and knows its
own closed-form energy over an interval, which the tests and selftest use as
the reference the sampled stream is checked against.
"""

from __future__ import annotations

import math
from functools import cached_property
from dataclasses import dataclass, field
from typing import Union

import numpy as np


@dataclass(frozen=True)
class Constant:
    power_W: float

    def power(self, t):
        return np.full(np.shape(t), float(self.power_W)) if np.ndim(t) else float(self.power_W)

    def max_power_W(self) -> float:
        return self.power_W

    def energy(self, t0: float, t1: float) -> float:
        return self.power_W * (t1 - t0)


@dataclass(frozen=True)
class Square:
    """High for the first ``duty`` fraction of each period, low for the rest."""

    period_s: float
    duty: float
    low_W: float
    high_W: float

    def power(self, t):
        # snap to 1e-9 cycles so edges on exact microsecond instants don't flip with float error
        cycles = np.round(np.asarray(t, dtype=float) / self.period_s, 9)
        frac = np.round(cycles - np.floor(cycles), 9)
        out = np.where(frac < self.duty, self.high_W, self.low_W)
        return out if np.ndim(t) else float(out)

    def max_power_W(self) -> float:
        return max(self.low_W, self.high_W)

    def _cumulative(self, t: float) -> float:
        k, r = divmod(t, self.period_s)
        on = self.duty * self.period_s
        per_period = self.high_W * on + self.low_W * (self.period_s - on)
        partial = self.high_W * min(r, on) + self.low_W * max(0.0, r - on)
        return k * per_period + partial

    def energy(self, t0: float, t1: float) -> float:
        return self._cumulative(t1) - self._cumulative(t0)


@dataclass(frozen=True)
class Sine:
    mean_W: float
    amplitude_W: float
    period_s: float

    def power(self, t):
        return self.mean_W + self.amplitude_W * np.sin(2 * np.pi * np.asarray(t) / self.period_s)

    def max_power_W(self) -> float:
        return self.mean_W + abs(self.amplitude_W)

    def energy(self, t0: float, t1: float) -> float:
        w = 2 * math.pi / self.period_s
        return self.mean_W * (t1 - t0) + self.amplitude_W / w * (math.cos(w * t0) - math.cos(w * t1))


@dataclass(frozen=True)
class Trace:
    """Step-held playback of (t_s, power_W) points; the first point must sit at t=0."""

    points: tuple[tuple[float, float], ...]

    def __post_init__(self):
        object.__setattr__(self, "points", tuple((float(a), float(b)) for a, b in self.points))

    @cached_property
    def _t(self):
        return np.array([p[0] for p in self.points])

    @cached_property
    def _p(self):
        return np.array([p[1] for p in self.points])

    def power(self, t):
        idx = np.searchsorted(self._t, t, side="right") - 1
        out = self._p[np.clip(idx, 0, len(self.points) - 1)]
        return out if np.ndim(t) else float(out)

    def max_power_W(self) -> float:
        return max(p for _, p in self.points)

    def energy(self, t0: float, t1: float) -> float:
        total = 0.0
        ts = [p[0] for p in self.points] + [math.inf]
        for i, (start, pw) in enumerate(self.points):
            lo, hi = max(start, t0), min(ts[i + 1], t1)
            if hi > lo:
                total += pw * (hi - lo)
        return total


@dataclass(frozen=True)
class Ramp:
    """Linear from start_W to end_W over ramp_s, then held at end_W."""

    start_W: float
    end_W: float
    ramp_s: float

    def power(self, t):
        frac = np.clip(np.asarray(t, dtype=float) / self.ramp_s, 0.0, 1.0)
        out = self.start_W + (self.end_W - self.start_W) * frac
        return out if np.ndim(t) else float(out)

    def max_power_W(self) -> float:
        return max(self.start_W, self.end_W)

    def _cumulative(self, t: float) -> float:
        if t <= self.ramp_s:
            return self.start_W * t + 0.5 * (self.end_W - self.start_W) * t * t / self.ramp_s
        return 0.5 * (self.start_W + self.end_W) * self.ramp_s + self.end_W * (t - self.ramp_s)

    def energy(self, t0: float, t1: float) -> float:
        return self._cumulative(t1) - self._cumulative(t0)


@dataclass(frozen=True)
class Phase:
    name: str  # "suspend", "boot", "job" or "idle"
    start_s: float
    end_s: float
    power_W: float


@dataclass(frozen=True)
class NodeLifecycle:
    """Power draw of a compute node managed by suspend/resume hooks.

    ``jobs`` holds (submit_s, duration_s) pairs.  A suspended node is woken
    by the submission, spends ``boot_s`` booting at ``load_W``, then runs the
    job.  Jobs on an awake node start at submission or as soon as the
    previous one finishes.  A node left without work for ``idle_timeout_s``
    is suspended again.
    """

    suspend_W: float
    idle_W: float
    load_W: float
    boot_s: float
    idle_timeout_s: float
    jobs: tuple[tuple[float, float], ...] = field(default_factory=tuple)

    def __post_init__(self):
        object.__setattr__(self, "jobs", tuple(sorted((float(a), float(b)) for a, b in self.jobs)))

    def phases(self, horizon_s: float = math.inf) -> list[Phase]:
        out: list[Phase] = []
        t = 0.0
        state = "suspend"
        busy_until = 0.0
        awake_idle_since = None

        def emit(name, a, b, pw):
            a, b = min(a, horizon_s), min(b, horizon_s)
            if b <= a:
                return
            if out and out[-1].name == name and out[-1].end_s == a:
                out[-1] = Phase(name, out[-1].start_s, b, pw)
            else:
                out.append(Phase(name, a, b, pw))

        for submit, dur in self.jobs:
            if state != "suspend" and awake_idle_since is not None:
                # node sits idle from awake_idle_since; did it fall asleep first?
                sleep_at = awake_idle_since + self.idle_timeout_s
                if submit >= sleep_at:
                    emit("idle", awake_idle_since, sleep_at, self.idle_W)
                    t = sleep_at
                    state = "suspend"
            if state == "suspend":
                emit("suspend", t, submit, self.suspend_W)
                emit("boot", submit, submit + self.boot_s, self.load_W)
                start = submit + self.boot_s
            else:
                start = max(submit, busy_until)
                if awake_idle_since is not None and start > awake_idle_since:
                    emit("idle", awake_idle_since, start, self.idle_W)
            emit("job", start, start + dur, self.load_W)
            busy_until = start + dur
            awake_idle_since = busy_until
            state = "awake"
            t = busy_until
        if state == "awake":
            sleep_at = awake_idle_since + self.idle_timeout_s
            emit("idle", awake_idle_since, sleep_at, self.idle_W)
            t = sleep_at
        emit("suspend", t, math.inf, self.suspend_W)
        return out

    @cached_property
    def _edges(self):
        ph = self.phases()
        return np.array([p.start_s for p in ph]), np.array([p.power_W for p in ph])

    def power(self, t):
        starts, powers = self._edges
        idx = np.searchsorted(starts, t, side="right") - 1
        out = powers[np.clip(idx, 0, len(powers) - 1)]
        return out if np.ndim(t) else float(out)

    def max_power_W(self) -> float:
        return max(self.suspend_W, self.idle_W, self.load_W)

    def energy(self, t0: float, t1: float) -> float:
        total = 0.0
        for p in self.phases():
            lo, hi = max(p.start_s, t0), min(p.end_s, t1)
            if hi > lo:
                total += p.power_W * (hi - lo)
        return total


LoadProfile = Union[Constant, Square, Sine, Trace, Ramp, NodeLifecycle]


def ground_truth_power(profile: LoadProfile, t_s):
    """Exact power of *profile* at *t_s* seconds (scalar or array)."""
    if np.any(np.asarray(t_s) < 0):
        raise ValueError("profile time must be >= 0")
    return profile.power(t_s)


def profile_min_power_W(profile: LoadProfile) -> float:
    if isinstance(profile, Constant):
        return profile.power_W
    if isinstance(profile, Square):
        return min(profile.low_W, profile.high_W)
    if isinstance(profile, Sine):
        return profile.mean_W - abs(profile.amplitude_W)
    if isinstance(profile, Trace):
        return min(p for _, p in profile.points)
    if isinstance(profile, Ramp):
        return min(profile.start_W, profile.end_W)
    return min(profile.suspend_W, profile.idle_W, profile.load_W)


_KINDS = {
    "constant": Constant,
    "square": Square,
    "sine": Sine,
    "trace": Trace,
    "ramp": Ramp,
    "lifecycle": NodeLifecycle,
}


def profile_from_dict(d: dict) -> LoadProfile:
    d = dict(d)
    kind = d.pop("type", None)
    cls = _KINDS.get(kind)
    if cls is None:
        raise ValueError(f"unknown profile type {kind!r}; expected one of {sorted(_KINDS)}")
    if cls is Trace:
        d["points"] = tuple(tuple(p) for p in d.get("points", ()))
    if cls is NodeLifecycle:
        d["jobs"] = tuple(tuple(j) for j in d.get("jobs", ()))
    try:
        return cls(**d)
    except TypeError as e:
        raise ValueError(f"{kind} profile: {e}") from None


def profile_to_dict(p: LoadProfile) -> dict:
    name = next(k for k, v in _KINDS.items() if isinstance(p, v))
    out = {"type": name}
    for f in p.__dataclass_fields__:
        v = getattr(p, f)
        out[f] = [list(x) for x in v] if isinstance(v, tuple) else v
    return out
