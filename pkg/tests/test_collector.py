import threading
import time

import pytest

from energyprobe import wire
from energyprobe.collector.service import ClockMap, Collector, CollectorError, NoSession, Subscription
from energyprobe.collector.sessionlog import LogFormatError, SessionLogWriter, read_header, read_log
from energyprobe.core import ProbeKind
from energyprobe.link import Link, link_pair
from energyprobe.selftest import run_pipeline
from energyprobe.sim.board import run
from energyprobe.sim.profiles import Constant, Square

from helpers import make_scenario

TOKEN = "s3cret"


class SpyLink(Link):
    """Records every byte the collector sends to the board."""

    def __init__(self, inner):
        self.inner, self.sent = inner, bytearray()

    def send(self, data):
        self.sent += data
        self.inner.send(data)

    def recv(self, n=65536):
        return self.inner.recv(n)

    def close(self):
        self.inner.close()


@pytest.fixture
def live(tmp_path):
    """A collector attached to a real-time simulator with two probes."""
    sc = make_scenario([Constant(40.0), Constant(60.0), Square(0.2, 0.5, 10, 50), Constant(5.0)], 30.0)
    host, dev = link_pair()
    stop = threading.Event()
    th = threading.Thread(target=run, args=(sc, dev), kwargs={"accel": 1.0, "stop_event": stop}, daemon=True)
    th.start()
    spy = SpyLink(host)
    col = Collector(spy, tmp_path / "live.eplg", admin_token=TOKEN)
    col.start()
    yield col, spy
    stop.set()
    th.join(5)
    dev.close()
    col.close()


def _wait_for(pred, timeout=5.0):
    deadline = time.monotonic() + timeout
    while time.monotonic() < deadline:
        if pred():
            return True
        time.sleep(0.01)
    return False


def test_pipeline_six_probes(tmp_path):
    sc = make_scenario([Constant(10.0 * (i + 1)) for i in range(6)], 10.0)
    pr = run_pipeline(sc, tmp_path / "s.eplg")
    m = pr.collector.metrics
    assert pr.collector.board_ended
    assert all(abs(m.samples[i] - 10000) <= 10 for i in range(6))
    assert sum(m.drops.values()) == 0 and m.corruption == 0
    meta, recs = read_log(tmp_path / "s.eplg")
    assert sum(r.frame.frame_type == wire.FrameType.SAMPLE for r in recs) == sum(m.samples.values())
    assert meta["board_serial"] == "SIM-TEST" and meta["topology"]["probes"][0]["kind"] == "UsbC"
    times = [r.host_time_ns for r in recs]
    assert times == sorted(times)


def test_one_corrupted_byte(tmp_path):
    sc = make_scenario([Constant(10.0), Constant(20.0)], 1.0)
    clean = run_pipeline(sc, tmp_path / "a.eplg").collector.metrics
    pr = run_pipeline(sc, tmp_path / "b.eplg", corrupt_offsets=[20_000])
    m = pr.collector.metrics
    assert pr.flipped == 1
    assert m.corruption == 1
    assert sum(m.samples.values()) == sum(clean.samples.values()) - 1
    assert sum(m.drops.values()) == 1


def test_empty_stream_gives_header_only_log(tmp_path):
    host, dev = link_pair()
    dev.close()
    col = Collector(host, tmp_path / "e.eplg")
    with pytest.raises(CollectorError):
        col.start(timeout=2)
    col.close()
    meta, recs = read_log(tmp_path / "e.eplg")
    assert recs == [] and meta["topology"] is None
    assert (tmp_path / "e.eplg.metrics.json").exists()


def test_query_windows(tmp_path):
    sc = make_scenario([Square(0.1, 0.5, 10.0, 50.0), Constant(1.0)], 1.0)
    col = run_pipeline(sc, tmp_path / "q.eplg").collector
    everything = col.query(0, 0, 2**63)
    assert len(everything) == col.metrics.samples[0] == 1000
    assert col.query(0, 5, 5) == []
    assert col.query(7, 0, 2**63) is None
    # samples around the falling edge at board time 50 ms
    edge = col.clock_map.to_host(50_000)
    before = col.query(0, edge - 3_000_000, edge)
    after = col.query(0, edge + 1_000_000, edge + 4_000_000)
    assert [s.power_mW for _, s in before] == [50000] * 3
    assert [s.power_mW for _, s in after] == [10000] * 3
    straddle = col.query(0, edge, edge + 1_000_000)
    assert len(straddle) == 1 and 10000 < straddle[0][1].power_mW < 50000


def test_clock_map_midpoint_and_monotone():
    cm = ClockMap.from_round_trip(1_000, 3_000, 5)
    assert cm.to_host(5) == 2_000
    assert cm.to_host(6) - cm.to_host(5) == 1_000
    drifted = ClockMap(0, drift_ppm=50.0)
    ts = [drifted.to_host(t) for t in range(0, 10_000_000, 999_983)]
    assert all(b > a for a, b in zip(ts, ts[1:]))


def test_subscribe_without_session(tmp_path):
    col = Collector(link_pair()[0], tmp_path / "n.eplg")
    with pytest.raises(NoSession):
        col.subscribe()


def test_subscription_overflow_ends_consumer():
    sub = Subscription(None, maxsize=2)
    assert sub.offer(1) and sub.offer(2)
    assert not sub.offer(3) and sub.overflowed
    assert sub.get() is Subscription.END


def test_subscribe_filter(live):
    col, _ = live
    sub = col.subscribe({3})
    assert col.tag(0x01).ok
    got = []
    for item in sub:
        got.append(item)
        if len(got) >= 40:
            break
    col.unsubscribe(sub)
    kinds = {(k, rec.probe_id if k == "S" else None) for k, _, rec in got}
    assert kinds <= {("S", 3), ("T", None)}
    assert ("T", None) in kinds


def test_subscriber_receives_everything(live):
    col, _ = live
    sub = col.subscribe()
    start = col.metrics.samples[0]
    n = 0
    for kind, _, rec in sub:
        n += kind == "S" and rec.probe_id == 0
        if n >= 300:
            break
    assert col.metrics.samples[0] - start >= 0.99 * n


def test_power_requires_token(live):
    col, spy = live
    before = bytes(spy.sent)
    res = col.power(1, False, None, "tester")
    assert not res.ok and res.status is None
    assert col.power(1, False, "wrong", "tester").status is None
    assert bytes(spy.sent) == before
    assert col.metrics.power_refusals == 2


def test_power_off_zeroes_channel(live):
    col, _ = live
    res = col.power(1, False, TOKEN)
    assert res.ok
    n = col.metrics.samples[1]
    assert _wait_for(lambda: col.metrics.samples[1] > n + 20)
    _, last = col.query(1, 0, 2**63)[-1]
    assert last.power_mW == 0
    assert col.power(1, True, TOKEN).ok


def test_power_unknown_channel(live):
    col, _ = live
    res = col.power(11, False, TOKEN)
    assert not res.ok and res.status.code == wire.StatusCode.UNKNOWN_CHANNEL


def test_tag_edges(live):
    col, _ = live
    for state in (0x01, 0x03, 0x02, 0x00):
        assert col.tag(state).ok
    res = col.tag(0x00)
    assert not res.ok and res.status is None and "no edge" in res.reason
    assert _wait_for(lambda: len(col.tags()) == 4)
    assert [t.gpio_state for _, t in col.tags()] == [0x01, 0x03, 0x02, 0x00]
    assert not col.tag(0x1FF).ok


def test_close_finalizes_live_session(live, tmp_path):
    col, _ = live
    time.sleep(0.05)
    col.close()
    assert col.finished.is_set() and not col.board_ended
    meta, recs = read_log(tmp_path / "live.eplg", strict=False)
    assert meta["board_serial"] == "SIM-TEST" and recs


def test_log_round_trip(tmp_path):
    frames = [wire.encode_message(m) for m in (wire.Status(0, "x"), wire.Ping(), wire.Status(1, "y"))]
    w = SessionLogWriter(tmp_path / "r.eplg", {"k": 1})
    for t, f in zip((30, 10, 40), frames):
        w.append(t, f)
    w.close()
    meta, recs = read_log(tmp_path / "r.eplg")
    assert meta == {"k": 1}
    assert [r.host_time_ns for r in recs] == [30, 30, 40]  # clamped non-decreasing
    assert [r.frame.raw for r in recs] == frames


def test_torn_tail(tmp_path):
    p = tmp_path / "t.eplg"
    w = SessionLogWriter(p, {})
    w.append(1, wire.encode_message(wire.Ping()))
    w.append(2, wire.encode_message(wire.Status(0, "abc")))
    w.close()
    p.write_bytes(p.read_bytes()[:-3])
    assert len(read_log(p, strict=False)[1]) == 1
    with pytest.raises(LogFormatError):
        read_log(p, strict=True)


@pytest.mark.parametrize("blob", [b"", b"XXXX\x01\x00\x00\x00\x00\x00", b"EPLG\x02\x00\x00\x00\x00\x00",
                                  b"EPLG\x01\x00\x09\x00\x00\x00{}"])
def test_bad_headers(blob):
    with pytest.raises(LogFormatError):
        read_header(blob)


def test_coax_kind_round_trips_through_metadata(tmp_path):
    sc = make_scenario([Constant(1.0)], 0.1, kind=ProbeKind.Coax25x55)
    col = run_pipeline(sc, tmp_path / "k.eplg").collector
    assert col.topology.probes[0].kind is ProbeKind.Coax25x55
