"""energyprobe command line.

Exit codes: 0 success, 1 user error, 2 invariant/acceptance failure,
3 I/O or connection failure.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
import tempfile
import time
from importlib import resources
from pathlib import Path

from . import analysis
from .collector.api import DEFAULT_API_ADDR, ApiClient, ApiServer, parse_status_code
from .collector.service import ADMIN_TOKEN_ENV, Collector, CollectorError
from .collector.sessionlog import LogFormatError
from .link import connect, listen
from .sim.board import run
from .sim.profiles import NodeLifecycle
from .sim.scenario import ScenarioError, load_scenario

EXIT_OK, EXIT_USER, EXIT_CHECK, EXIT_IO = 0, 1, 2, 3
BOARD_ENV = "ENERGYPROBE_BOARD"
API_ENV = "ENERGYPROBE_API"
DEFAULT_BOARD_ADDR = "127.0.0.1:7700"

log = logging.getLogger("energyprobe")


class UserError(Exception):
    pass


def builtin_scenarios() -> list[str]:
    root = resources.files("energyprobe") / "scenarios"
    return sorted(f.name[:-5] for f in root.iterdir() if f.name.endswith(".yaml"))


def resolve_scenario(name: str):
    """A file path, or the name of a scenario shipped with the package (e.g. ``demo``)."""
    if Path(name).exists():
        return load_scenario(name)
    if name in builtin_scenarios():
        with resources.as_file(resources.files("energyprobe") / "scenarios" / f"{name}.yaml") as path:
            return load_scenario(path)
    raise UserError(f"no such scenario file: {name} (built in: {', '.join(builtin_scenarios())})")


def _board_default() -> str:
    return os.environ.get(BOARD_ENV, DEFAULT_BOARD_ADDR)


def _api_default() -> str:
    return os.environ.get(API_ENV, DEFAULT_API_ADDR)


# -- simulate / record ----------------------------------------------------------


def cmd_simulate(args) -> int:
    sc = resolve_scenario(args.scenario)
    listener = listen(args.listen)
    print(f"simulator listening on {listener.bound}", file=sys.stderr, flush=True)
    try:
        link = listener.accept()
        report = run(sc, link, autostart=args.autostart, accel=args.accel)
        link.close()
    finally:
        listener.close()
    for line in report.lines():
        print(line, file=sys.stderr)
    return EXIT_OK


def _connect_retry(addr: str, wait_s: float):
    deadline = time.monotonic() + wait_s
    while True:
        try:
            return connect(addr)
        except OSError:
            if time.monotonic() >= deadline:
                raise
            time.sleep(0.1)


def cmd_record(args) -> int:
    link = _connect_retry(args.board, args.connect_wait)
    col = Collector(link, args.log)
    server = None
    try:
        col.start(divider=args.rate_divider)
        if args.api:
            server = ApiServer(args.api, col)
            server.serve_in_background()
            print(f"api listening on {server.address}", file=sys.stderr, flush=True)
        print(f"recording {col.topology.board_serial} -> {args.log}", file=sys.stderr, flush=True)
        col.wait()
    except KeyboardInterrupt:
        print("interrupted", file=sys.stderr)
    finally:
        col.close()
        if server is not None:
            server.shutdown()
            server.server_close()
    m = col.metrics.as_dict()
    print(f"session closed: {col.writer.records if col.writer else 0} records, "
          f"{sum(m['samples'].values())} samples, {m['drops_total']} drops, "
          f"{m['corruption']} corruption events", file=sys.stderr)
    return EXIT_OK if col.board_ended else EXIT_IO


# -- report ---------------------------------------------------------------------


def _row(*cells) -> str:
    return "\t".join(str(c) for c in cells)


def render_report(session: analysis.Session, probes: list[int], region_bit: int | None = None,
                  csv_dir: str | None = None, scenario=None) -> list[str]:
    out = ["# session"]
    out.append(_row("log", session.path))
    out.append(_row("board_serial", session.metadata.get("board_serial", "")))
    out.append(_row("records", session.records))
    out.append(_row("tags", len(session.tags)))
    corr = session.corruption
    out.append(_row("corruption", "unknown" if corr is None else corr))
    summaries = {pid: analysis.summarize(session, pid) for pid in probes}

    out.append("# summary")
    out.append(_row("probe", "duration_s", "samples", "effective_sps", "min_W", "mean_W", "max_W",
                    "energy_J", "drops", "flag"))
    for pid, s in summaries.items():
        flag = "empty" if s.empty else "-"
        out.append(_row(pid, f"{s.duration_s:.6f}", s.samples, f"{s.effective_sps:.3f}",
                        f"{s.min_power_W:.3f}", f"{s.mean_power_W:.3f}", f"{s.max_power_W:.3f}",
                        f"{s.energy_J:.6f}", s.drops, flag))

    out.append(f"# reference (socket wattmeter baseline: {analysis.REFERENCE_SPS:g} SPS, "
               f"{analysis.REFERENCE_RESOLUTION_mW} mW resolution)")
    out.append(_row("probe", "effective_sps", "rate_ratio", "resolution_mW", "resolution_ratio",
                    "rate_claim", "resolution_claim"))
    for pid, s in summaries.items():
        res = analysis.power_resolution_mW(session.get(pid))
        if res is None:
            out.append(_row(pid, "-", "-", "-", "-", "n/a", "n/a"))
            continue
        c = analysis.compare_reference(s, res)
        out.append(_row(pid, f"{c.effective_sps:.3f}", f"{c.rate_ratio:.1f}x", c.resolution_mW,
                        f"{c.resolution_ratio:g}x", "PASS" if c.rate_claim_ok else "FAIL",
                        "PASS" if c.resolution_claim_ok else "FAIL"))

    if region_bit is not None:
        for pid in probes:
            s = session.get(pid)
            rep = analysis.regions(session.tags, s.host_ns, s.power_mW, region_bit)
            out.append(f"# regions bit={region_bit} probe={pid} "
                       f"alignment_tolerance_ms={rep.alignment_tolerance_ns / 1e6:g}")
            out.append(_row("probe", "start_ns", "end_ns", "duration_s", "energy_J", "mean_W", "samples", "flag"))
            for iv in rep.intervals:
                out.append(_row(pid, iv.start_ns, iv.end_ns, f"{(iv.end_ns - iv.start_ns) / 1e9:.6f}",
                                f"{iv.energy_J:.6f}", f"{iv.mean_power_W:.3f}", iv.sample_count,
                                "unclosed" if iv.unclosed else "-"))
            out.append(_row("total", "", "", "", f"{rep.total_energy_J:.6f}", "", "", ""))

    if scenario is not None:
        out += _phase_block(session, scenario, probes)

    if csv_dir is not None:
        d = Path(csv_dir)
        d.mkdir(parents=True, exist_ok=True)
        stem = session.path.stem if session.path else "session"
        path = d / f"{stem}.csv"
        n = analysis.export_csv(session, probes, path)
        out.append("# csv")
        out.append(_row("samples", path, n))
        out.append(_row("tags", analysis.tags_path_for(path), len(session.tags)))
    return out


def _phase_block(session, scenario, probes) -> list[str]:
    out = []
    for setup in scenario.probes:
        pid = setup.descriptor.probe_id
        if pid not in probes:
            continue
        s = session.get(pid)
        prof = setup.profile
        if isinstance(prof, NodeLifecycle):
            phases = prof.phases(scenario.duration_s)
            out.append(f"# phases probe={pid}")
            out.append(_row("phase", "start_s", "end_s", "expected_W", "mean_W", "rel_error", "samples"))
            for st in analysis.phase_stats(s, session.clock, phases):
                out.append(_row(st.name, f"{st.start_s:g}", f"{st.end_s:g}", f"{st.expected_W:g}",
                                f"{st.mean_W:.4f}", f"{st.rel_error * 100:.4f}%", st.samples))
        got = analysis.board_window_energy(s, session.clock, 0.0, scenario.duration_s).joules
        want = prof.energy(0.0, scenario.duration_s)
        rel = abs(got - want) / abs(want) if want else abs(got)
        out.append(f"# closed-form energy probe={pid}")
        out.append(_row("measured_J", "closed_form_J", "rel_error"))
        out.append(_row(f"{got:.6f}", f"{want:.6f}", f"{rel * 100:.5f}%"))
    return out


def cmd_report(args) -> int:
    try:
        session = analysis.load_session(args.log)
    except FileNotFoundError:
        raise UserError(f"no such log: {args.log}") from None
    known = session.probe_ids()
    if args.probe is not None:
        if args.probe not in known:
            raise UserError(f"probe {args.probe} not in session (known: {known})")
        probes = [args.probe]
    else:
        probes = known
    if args.region_bit is not None and not 0 <= args.region_bit <= 7:
        raise UserError("--region-bit must be 0..7")
    scenario = resolve_scenario(args.scenario) if args.scenario else None
    for line in render_report(session, probes, args.region_bit, args.csv, scenario):
        print(line)
    return EXIT_OK


# -- API clients ----------------------------------------------------------------


def _client_call(addr: str, line: str, echo: bool = True) -> int:
    client = ApiClient(addr, timeout=None if line.startswith("SUBSCRIBE") else 15.0)
    try:
        term = "ERR 504 no response"
        for text in client.request(line):
            if text == "OK" or text.startswith("ERR "):
                term = text
                break
            if echo:
                print(text, flush=True)
    finally:
        client.close()
    if term == "OK":
        return EXIT_OK
    print(term, file=sys.stderr)
    code = parse_status_code(term)
    return EXIT_USER if code in (400, 403, 404, 409) else EXIT_IO


def cmd_live(args) -> int:
    try:
        return _client_call(args.api, f"SUBSCRIBE probes={args.probes}")
    except KeyboardInterrupt:
        return EXIT_OK


def cmd_power(args) -> int:
    token = os.environ.get(ADMIN_TOKEN_ENV)
    if not token:
        raise UserError(f"set {ADMIN_TOKEN_ENV} to use power control")
    return _client_call(args.api, f"POWER channel={args.channel} state={args.state} token={token}")


def cmd_tag(args) -> int:
    try:
        state = int(args.state, 16)
    except ValueError:
        raise UserError("--state must be hexadecimal, e.g. 0x01") from None
    return _client_call(args.api, f"TAG state={state:02x}")


def cmd_topology(args) -> int:
    return _client_call(args.api, "TOPOLOGY")


# -- selftest -------------------------------------------------------------------


def cmd_selftest(args) -> int:
    from .selftest import selftest

    scenario = None
    if args.scenario:
        try:
            scenario = resolve_scenario(args.scenario)
        except ScenarioError as e:
            print("selftest FAIL: topology/scenario validation", file=sys.stderr)
            for v in e.violations:
                print(f"  {v}", file=sys.stderr)
            return EXIT_CHECK
    with tempfile.TemporaryDirectory() as tmp:
        log_path = Path(args.log) if args.log else Path(tmp) / "selftest.eplg"
        result, pr = selftest(log_path, scenario=scenario, seed=args.seed, corrupt=args.corrupt,
                              divider=args.divider)
    for c in result.checks:
        print(c.line())
    if result.ok:
        print("selftest PASS")
        return EXIT_OK
    print("selftest FAIL: " + ", ".join(c.name for c in result.failed()), file=sys.stderr)
    return EXIT_CHECK


# -- entry point ----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="energyprobe", description="Energy probe board simulator, collector and analysis")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="serve a simulated board for one connection")
    s.add_argument("scenario", help="scenario YAML file or built-in name (demo, lifecycle, full12, ramp)")
    s.add_argument("--listen", default=None, help=f"HOST:PORT, unix:PATH or - for stdio (default ${BOARD_ENV} or {DEFAULT_BOARD_ADDR})")
    s.add_argument("--accel", type=float, default=None, help="time acceleration; 0 = as fast as possible (default from scenario)")
    s.add_argument("--autostart", action="store_true", help="stream without waiting for START")
    s.set_defaults(func=cmd_simulate)

    r = sub.add_parser("record", help="collect one board session into a log")
    r.add_argument("--board", default=None, help=f"board address or serial device (default ${BOARD_ENV})")
    r.add_argument("--log", required=True, help="session log path")
    r.add_argument("--api", default=None, help="serve the client API on HOST:PORT")
    r.add_argument("--rate-divider", type=int, default=None, help="forward every k-th sample")
    r.add_argument("--connect-wait", type=float, default=5.0, help="seconds to retry connecting")
    r.set_defaults(func=cmd_record)

    rp = sub.add_parser("report", help="summarize a session log")
    rp.add_argument("--log", required=True)
    rp.add_argument("--probe", type=int, default=None)
    rp.add_argument("--region-bit", type=int, default=None)
    rp.add_argument("--csv", default=None, metavar="DIR", help="also export CSV files into DIR")
    rp.add_argument("--scenario", default=None, help="scenario file: adds per-phase and closed-form energy checks")
    rp.set_defaults(func=cmd_report)

    lv = sub.add_parser("live", help="stream live samples from a collector")
    lv.add_argument("--api", default=None)
    lv.add_argument("--probes", default="all", help="comma list of probe ids or 'all'")
    lv.set_defaults(func=cmd_live)

    pw = sub.add_parser("power", help=f"switch a channel (admin; token from ${ADMIN_TOKEN_ENV})")
    pw.add_argument("--api", default=None)
    pw.add_argument("--channel", type=int, required=True)
    pw.add_argument("--state", choices=["on", "off"], required=True)
    pw.set_defaults(func=cmd_power)

    tg = sub.add_parser("tag", help="drive the GPIO tag lines")
    tg.add_argument("--api", default=None)
    tg.add_argument("--state", required=True, help="8-bit mask in hex")
    tg.set_defaults(func=cmd_tag)

    tp = sub.add_parser("topology", help="print the board topology")
    tp.add_argument("--api", default=None)
    tp.set_defaults(func=cmd_topology)

    st = sub.add_parser("selftest", help="run simulate -> record -> report in-process and check invariants")
    st.add_argument("--seed", type=int, default=1)
    st.add_argument("--corrupt", type=int, default=0, metavar="N", help="flip N bytes of the board stream")
    st.add_argument("--scenario", default=None)
    st.add_argument("--divider", type=int, default=1)
    st.add_argument("--log", default=None, help="keep the session log at this path")
    st.set_defaults(func=cmd_selftest)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "listen", "x") is None:
        args.listen = _board_default()
    if getattr(args, "board", "x") is None:
        args.board = _board_default()
    if getattr(args, "api", "x") is None and args.command not in ("record",):
        args.api = _api_default()
    try:
        return args.func(args)
    except UserError as e:
        print(f"energyprobe: {e}", file=sys.stderr)
        return EXIT_USER
    except ScenarioError as e:
        print(f"energyprobe: invalid scenario: {e}", file=sys.stderr)
        return EXIT_USER
    except LogFormatError as e:
        print(f"energyprobe: bad session log: {e}", file=sys.stderr)
        return EXIT_USER
    except (OSError, CollectorError) as e:
        print(f"energyprobe: {e}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
