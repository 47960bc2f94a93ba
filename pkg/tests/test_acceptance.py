"""Acceptance suite: one test per headline claim, each printing a PASS/FAIL line."""

import random
import time
from fractions import Fraction

import numpy as np
from energyprobe import analysis, wire
from energyprobe.cli import main, resolve_scenario
from energyprobe.collector.sessionlog import read_log
from energyprobe.core import AVG_COUNT, average4
from energyprobe.selftest import run_pipeline, selftest
from energyprobe.sim.profiles import Constant, Sine, Square
from energyprobe.sim.scenario import ScenarioError, scenario_from_dict

from helpers import decode_all, frames_only, make_scenario, random_message


def test_rate_six_probes_one_bus(tmp_path, criterion):
    c = criterion(1, "1000 SPS per probe with six probes on one bus")
    sc = make_scenario([Constant(20.0 + 10 * i) for i in range(6)], 60.0, sigma_mW=10.0)
    t0 = time.perf_counter()
    pr = run_pipeline(sc, tmp_path / "rate.eplg")
    elapsed = time.perf_counter() - t0
    session = analysis.load_session(tmp_path / "rate.eplg")
    counts = [len(session.get(i)) for i in range(6)]
    drops = sum(pr.collector.metrics.drops.values()) + sum(session.get(i).drops for i in range(6))
    ok = all(abs(n - 60000) <= 600 for n in counts) and drops == 0 and elapsed < 10.0
    c.check(ok, f"samples/probe {min(counts)}..{max(counts)} (60000±600), drops {drops}, runtime {elapsed:.2f} s (<10 s)")


def test_milliwatt_resolution(tmp_path, criterion):
    c = criterion(2, "milliwatt resolution over a 0-240 W ramp")
    sc = resolve_scenario("ramp")
    run_pipeline(sc, tmp_path / "ramp.eplg")
    _, records = read_log(tmp_path / "ramp.eplg")
    # decode persisted frames independently of the analysis module
    powers = [wire.unpack(r.frame).power_mW for r in records if r.frame.frame_type == wire.FrameType.SAMPLE]
    integral = all(isinstance(p, int) for p in powers)
    diffs = np.diff(np.array(powers))
    one_mw = int(np.sum(np.abs(diffs) == 1))
    span = (min(powers), max(powers))
    ok = integral and one_mw > 0 and span[0] <= 1000 and span[1] >= 239_000
    c.check(ok, f"{len(powers)} values, integer={integral}, range {span[0]}..{span[1]} mW, "
                f"{one_mw} consecutive 1 mW steps")


def test_averaging_chain(tmp_path, criterion):
    c = criterion(3, "four conversions averaged per sample")
    sc = make_scenario([Sine(100.0, 60.0, 0.37), Square(0.05, 0.3, 3.0, 200.0), Constant(12.345)], 2.0)
    run_pipeline(sc, tmp_path / "avg.eplg")
    session = analysis.load_session(tmp_path / "avg.eplg")
    all_four = all(np.all(session.get(p).avg_count == AVG_COUNT) for p in session.probe_ids())
    # oracle: evaluate each profile at the four conversion instants, 250 us apart, ending at the stamp
    mismatches = 0
    checked = 0
    for setup in sc.probes:
        s = session.get(setup.descriptor.probe_id)
        for stamp, got in zip(s.board_time_us.tolist(), s.power_mW.tolist()):
            raw = [int(np.rint(setup.profile.power((stamp - off) / 1e6) * 1000)) for off in (750, 500, 250, 0)]
            want = round(Fraction(sum(raw), 4))
            v = setup.nominal_voltage_mV
            via_average4 = average4([(v, 0, r) for r in raw])[2]
            mismatches += (got != want) + (via_average4 != want)
            checked += 1
    c.check(all_four and mismatches == 0 and checked == 6000,
            f"avg_count=4 everywhere: {all_four}; {checked} samples vs exact mean of 4 conversions, {mismatches} mismatches")


def test_energy_oracle(tmp_path, criterion):
    c = criterion(4, "integrated energy against closed forms")
    t0 = time.perf_counter()
    sine, square = Sine(100.0, 50.0, 1.0), Square(1.0, 0.5, 10.0, 50.0)
    sc = make_scenario([sine, square], 30.0)
    run_pipeline(sc, tmp_path / "energy.eplg")
    session = analysis.load_session(tmp_path / "energy.eplg")
    e = analysis.board_window_energy(session.get(0), session.clock, 0.0, 30.0).joules
    mean_sq = analysis.summarize(session, 1).mean_power_W
    elapsed = time.perf_counter() - t0
    e_err = abs(e - 3000.0) / 3000.0
    m_err = abs(mean_sq - 30.0) / 30.0
    ok = e_err <= 5e-4 and m_err <= 5e-3 and elapsed < 5.0
    c.check(ok, f"sine {e:.4f} J vs 3000 J ({e_err * 100:.4f}% <= 0.05%), square mean {mean_sq:.4f} W "
                f"({m_err * 100:.4f}% <= 0.5%), runtime {elapsed:.2f} s (<5 s)")


def _nested_tags(rng: random.Random, duration_ms: int):
    """Random schedule where bit 1 is only ever high inside a bit-0 region."""
    t = rng.randrange(5, 50)
    out = []
    while t < duration_ms - 40:
        a = t
        d = min(a + rng.randrange(10, 200), duration_ms - 5)
        b = rng.randrange(a + 1, d - 2)
        cc = rng.randrange(b + 1, d)
        out += [(a / 1000, 1), (b / 1000, 3), (cc / 1000, 1), (d / 1000, 0)]
        t = d + rng.randrange(5, 100)
    return out


def test_region_attribution(tmp_path, criterion):
    c = criterion(5, "energy of tagged code regions")
    sc = make_scenario([Constant(100.0)], 3.0, sigma_mW=50.0, tags=[(1.0, 0x01), (2.0, 0x00)])
    run_pipeline(sc, tmp_path / "region.eplg")
    session = analysis.load_session(tmp_path / "region.eplg")
    s = session.get(0)
    rep = analysis.regions(session.tags, s.host_ns, s.power_mW, 0)
    energy = rep.intervals[0].energy_J if len(rep.intervals) == 1 else float("nan")
    region_ok = abs(energy - 100.0) <= 0.2

    rng = random.Random(20240101)
    violations = 0
    for k in range(100):
        prof = Square(rng.uniform(0.05, 0.3), rng.uniform(0.1, 0.9), rng.uniform(0, 50), rng.uniform(50, 240))
        sched = _nested_tags(rng, 1000)
        scn = make_scenario([prof], 1.0, sigma_mW=100.0, tags=sched)
        path = tmp_path / f"nest{k}.eplg"
        run_pipeline(scn, path)
        ss = analysis.load_session(path)
        p = ss.get(0)
        e0 = analysis.regions(ss.tags, p.host_ns, p.power_mW, 0)
        e1 = analysis.regions(ss.tags, p.host_ns, p.power_mW, 1)
        violations += e1.total_energy_J > e0.total_energy_J + 1e-9
        # per interval too: each bit-1 region sits inside one bit-0 region
        for iv in e1.intervals:
            outer = [o for o in e0.intervals if o.start_ns <= iv.start_ns and iv.end_ns <= o.end_ns]
            violations += len(outer) != 1 or iv.energy_J > outer[0].energy_J + 1e-9
        path.unlink()
    c.check(region_ok and violations == 0,
            f"1 s at 100 W -> {energy:.4f} J (100±0.2 J); nested monotonicity violations in 100 schedules: {violations}")


def test_codec_robustness(criterion):
    c = criterion(6, "frame codec round-trip and single-byte corruption")
    rng = random.Random(7)
    msgs = [random_message(rng) for _ in range(10_000)]
    raws = [wire.encode_message(m) for m in msgs]
    blob = b"".join(raws)
    cuts = sorted(rng.randrange(len(blob)) for _ in range(500))
    events, dec = decode_all(blob, cuts)
    decoded = [wire.unpack(f) for f in frames_only(events)]
    round_trip = decoded == msgs and dec.resync_events == 0

    cases = failures = 0
    for j in range(1, len(raws) - 1):
        for pos in range(len(raws[j])):
            mid = bytearray(raws[j])
            mid[pos] ^= rng.randrange(1, 256)
            got = frames_only(decode_all(raws[j - 1] + bytes(mid) + raws[j + 1])[0])
            cases += 1
            if [f.raw for f in got] != [raws[j - 1], raws[j + 1]]:
                failures += 1
    c.check(round_trip and failures == 0,
            f"{len(msgs)} frames round-trip exact={round_trip}; {cases} single-byte corruptions, "
            f"{failures} lost more than the corrupted frame")


def test_reference_comparison(tmp_path, criterion, capsys):
    c = criterion(7, "comparison with the 50 SPS / 0.1 W wattmeter")
    selftest(tmp_path / "nominal.eplg")
    capsys.readouterr()
    rc = main(["report", "--log", str(tmp_path / "nominal.eplg")])
    out = capsys.readouterr().out.splitlines()
    start = next(i for i, line in enumerate(out) if line.startswith("# reference"))
    rows = [line.split("\t") for line in out[start + 2:] if line and not line.startswith("#")]
    rows = rows[:6]
    ok = rc == 0 and len(rows) == 6 and all(r[2] == "20.0x" and r[4] == "100x" for r in rows)
    c.check(ok, f"report rows: {sorted({(r[2], r[4]) for r in rows})} (expect 20.0x rate, 100x resolution)")


def test_constraint_enforcement(criterion):
    c = criterion(8, "per-kind power ceilings and six probes per bus")
    found = []

    def rejected(doc, needle):
        try:
            scenario_from_dict(doc)
        except ScenarioError as e:
            hit = [v for v in e.violations if needle in v]
            found.extend(hit)
            return bool(hit)
        return False

    def probe(pid, kind, watts, bus=0, pos=None):
        return {"id": pid, "bus": bus, "position": pid % 6 if pos is None else pos, "kind": kind,
                "profile": {"type": "constant", "power_W": watts}}

    usbc = rejected({"duration_s": 1, "probes": [probe(0, "UsbC", 10), probe(4, "UsbC", 240.001)]},
                    "probe 4 (UsbC): profile peak 240.001 W exceeds the 240 W ceiling")
    hpwr = rejected({"duration_s": 1, "probes": [probe(2, "Psu12VHPWR", 650)]},
                    "probe 2 (Psu12VHPWR): profile peak 650 W exceeds the 600 W ceiling")
    seven = rejected({"duration_s": 1, "probes": [probe(i, "UsbC", 5, pos=min(i, 5)) for i in range(7)]},
                     "bus 0 exceeds 6 probes (7)")
    try:
        resolve_scenario("invalid_seven_per_bus")
        shipped = False
    except ScenarioError as e:
        shipped = any("bus 0 exceeds 6" in v for v in e.violations)
    at_limit = scenario_from_dict({"duration_s": 1, "probes": [probe(0, "UsbC", 240), probe(1, "Psu12VHPWR", 600)]})
    ok = usbc and hpwr and seven and shipped and len(at_limit.probes) == 2
    c.check(ok, "; ".join(found[:3]) + f"; shipped 7-per-bus file rejected={shipped}; exact ceilings accepted")


def test_lifecycle_scenario(tmp_path, criterion, capsys):
    c = criterion(9, "suspend/boot/job/idle lifecycle of one GPU node")
    sc = resolve_scenario("lifecycle")
    lc = sc.probes[0].profile
    params_ok = (lc.suspend_W, lc.idle_W, lc.load_W) == (6 / 4, 212 / 4, 2100 / 4) and lc.idle_timeout_s == 600
    run_pipeline(sc, tmp_path / "lifecycle.eplg")
    capsys.readouterr()
    rc = main(["report", "--log", str(tmp_path / "lifecycle.eplg"), "--scenario", "lifecycle"])
    out = capsys.readouterr().out.splitlines()
    k = out.index("# phases probe=0")
    phases = []
    for line in out[k + 2:]:
        if line.startswith("#"):
            break
        name, _, _, expected, mean, rel, n = line.split("\t")
        phases.append((name, float(expected), float(mean), float(rel.rstrip("%")) / 100, int(n)))
    k = out.index("# closed-form energy probe=0")
    measured, closed, rel_e = out[k + 2].split("\t")
    rel_e = float(rel_e.rstrip("%")) / 100
    names = [p[0] for p in phases]
    worst = max(p[3] for p in phases)
    ok = (rc == 0 and params_ok and names == ["suspend", "boot", "job", "idle", "job", "idle", "suspend"]
          and worst <= 0.01 and rel_e <= 0.001)
    c.check(ok, f"{len(phases)} phases, worst per-phase mean error {worst * 100:.3f}% (<=1%), "
                f"energy {measured} J vs closed form {closed} J ({rel_e * 100:.4f}% <=0.1%)")


def test_determinism(tmp_path, criterion):
    c = criterion(10, "selftest logs are reproducible")
    a, b = tmp_path / "a.eplg", tmp_path / "b.eplg"
    ra, _ = selftest(a, seed=42)
    rb, _ = selftest(b, seed=42)
    same = a.read_bytes() == b.read_bytes()
    other, _ = selftest(tmp_path / "c.eplg", seed=43)
    differs = (tmp_path / "c.eplg").read_bytes() != a.read_bytes()
    c.check(same and differs and ra.ok and rb.ok,
            f"seed 42 twice: {a.stat().st_size} bytes, identical={same}; seed 43 differs={differs}")
