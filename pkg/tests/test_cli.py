import os
import socket
import subprocess
import sys
import time

import pytest

from energyprobe.cli import EXIT_CHECK, EXIT_IO, EXIT_OK, EXIT_USER, main
from energyprobe.selftest import run_pipeline
from energyprobe.sim.profiles import Constant

from helpers import make_scenario


@pytest.fixture(scope="module")
def small_log(tmp_path_factory):
    path = tmp_path_factory.mktemp("cli") / "s.eplg"
    sc = make_scenario([Constant(100.0), Constant(20.0)], 3.0, tags=[(1.0, 1), (2.0, 0)])
    run_pipeline(sc, path)
    return path


def _free_port():
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        return s.getsockname()[1]


def test_selftest_passes(capsys):
    assert main(["selftest"]) == EXIT_OK
    out = capsys.readouterr().out
    for line in ("rate OK (1000±1% SPS", "resolution OK (1 mW)", "energy OK (<0.05%", "selftest PASS"):
        assert line in out


def test_selftest_with_corruption(capsys):
    assert main(["selftest", "--corrupt", "2"]) == EXIT_OK
    assert "resync OK (2 resync events)" in capsys.readouterr().out


def test_selftest_rejects_impossible_topology(capsys):
    assert main(["selftest", "--scenario", "invalid_seven_per_bus"]) == EXIT_CHECK
    err = capsys.readouterr().err
    assert "topology" in err and "bus 0 exceeds 6 probes" in err


def test_report_reference_block(small_log, capsys):
    assert main(["report", "--log", str(small_log)]) == EXIT_OK
    out = capsys.readouterr().out
    row = next(line for line in out.splitlines() if line.startswith("0\t1000.000\t"))
    assert row.split("\t")[2:5] == ["20.0x", "1", "100x"]


def test_report_regions_and_csv(small_log, tmp_path, capsys):
    assert main(["report", "--log", str(small_log), "--probe", "0", "--region-bit", "0", "--csv", str(tmp_path)]) == 0
    out = capsys.readouterr().out.splitlines()
    k = out.index(next(line for line in out if line.startswith("# regions bit=0 probe=0")))
    fields = out[k + 2].split("\t")
    assert float(fields[4]) == pytest.approx(100.0, abs=0.2) and fields[6] == "1000"
    assert (tmp_path / "s.csv").exists() and (tmp_path / "s.tags.csv").exists()


@pytest.mark.parametrize("argv", [["--probe", "12"], ["--region-bit", "9"]])
def test_report_user_errors(small_log, argv, capsys):
    assert main(["report", "--log", str(small_log), *argv]) == EXIT_USER
    assert capsys.readouterr().err.startswith("energyprobe: ")


def test_report_missing_or_bad_log(tmp_path, capsys):
    assert main(["report", "--log", str(tmp_path / "none.eplg")]) == EXIT_USER
    bad = tmp_path / "bad.eplg"
    bad.write_bytes(b"not a log")
    assert main(["report", "--log", str(bad)]) == EXIT_USER
    assert "bad session log" in capsys.readouterr().err


def test_power_needs_env_token(monkeypatch, capsys):
    monkeypatch.delenv("ENERGYPROBE_ADMIN_TOKEN", raising=False)
    assert main(["power", "--api", "127.0.0.1:1", "--channel", "0", "--state", "off"]) == EXIT_USER
    assert "ENERGYPROBE_ADMIN_TOKEN" in capsys.readouterr().err


def test_tag_bad_hex():
    assert main(["tag", "--api", "127.0.0.1:1", "--state", "xyz"]) == EXIT_USER


def test_unreachable_api():
    assert main(["topology", "--api", f"127.0.0.1:{_free_port()}"]) == EXIT_IO


def test_simulate_record_report_processes(tmp_path):
    board, api = f"127.0.0.1:{_free_port()}", f"127.0.0.1:{_free_port()}"
    env = dict(os.environ, ENERGYPROBE_ADMIN_TOKEN="t0k")
    cli = [sys.executable, "-m", "energyprobe"]
    sim = subprocess.Popen(cli + ["simulate", "demo", "--listen", board, "--accel", "5"],
                           stderr=subprocess.PIPE, text=True)
    log = tmp_path / "demo.eplg"
    rec = subprocess.Popen(cli + ["record", "--board", board, "--log", str(log), "--api", api],
                           stderr=subprocess.PIPE, text=True, env=env)
    try:
        deadline = time.monotonic() + 10
        while time.monotonic() < deadline:
            r = subprocess.run(cli + ["topology", "--api", api], capture_output=True, text=True)
            if r.returncode == 0:
                break
            time.sleep(0.1)
        assert r.stdout.splitlines()[0] == "P 0 0 0 UsbC laptop-usbc"
        power = subprocess.run(cli + ["power", "--api", api, "--channel", "1", "--state", "off"],
                               capture_output=True, text=True, env=env)
        live = subprocess.run(cli + ["live", "--api", api, "--probes", "2"], capture_output=True, text=True, timeout=20)
        assert rec.wait(20) == EXIT_OK
        assert sim.wait(20) == EXIT_OK
    finally:
        for p in (sim, rec):
            if p.poll() is None:
                p.kill()
    # live streams until the board ends the session, then exits cleanly
    assert live.returncode == 0 and live.stdout
    assert all(line.split()[2] == "2" for line in live.stdout.splitlines() if line.startswith("S "))
    assert power.returncode == 0 and power.stdout.strip() == "STATUS 0 channel 1 off"
    r = subprocess.run(cli + ["report", "--log", str(log), "--region-bit", "0"], capture_output=True, text=True)
    assert r.returncode == 0
    assert "20.0x" in r.stdout and "100x" in r.stdout and "# regions bit=0 probe=0" in r.stdout
