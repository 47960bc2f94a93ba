"""Line-delimited client API served by the collector.

Requests (one UTF-8 line each)::

    HELLO
    TOPOLOGY
    QUERY probe=<id> from=<ns> to=<ns>
    SUBSCRIBE probes=<id,id,...|all>
    TAG state=<hex>
    POWER channel=<id> state=<on|off> token=<str>
    METRICS

Every response is zero or more record lines followed by exactly one
terminator, ``OK`` or ``ERR <code> <message>``.  Record lines, fields in
this order, separated by single spaces:

    H <protocol_version> <board_serial> <session:active|ended|none> <probe_count>
    P <probe_id> <bus> <position> <kind> <label>
    S <host_time_ns> <probe_id> <seq> <voltage_mV> <current_mA> <power_mW> <avg_count>
    T <host_time_ns> <gpio_state as 0xNN>
    STATUS <code> <detail>
    M <name> <value>

Error codes: 400 bad request, 403 refused (admin tier), 404 unknown probe,
409 no session / no edge, 502 board reported an error, 503 subscriber
dropped after buffer overflow, 504 board did not answer.
"""

from __future__ import annotations

import logging
import socketserver
import threading

from ..link import parse_tcp
from .service import Collector, CollectorError, NoSession

log = logging.getLogger(__name__)

PROTOCOL_VERSION = 1
DEFAULT_API_ADDR = "127.0.0.1:7701"


class RequestError(Exception):
    def __init__(self, code: int, msg: str):
        super().__init__(msg)
        self.code = code
        self.msg = msg


def parse_request(line: str) -> tuple[str, dict[str, str]]:
    parts = line.strip().split()
    if not parts:
        raise RequestError(400, "empty request")
    verb = parts[0].upper()
    args = {}
    for p in parts[1:]:
        k, sep, v = p.partition("=")
        if not sep or not k:
            raise RequestError(400, f"expected key=value, got {p!r}")
        args[k.lower()] = v
    return verb, args


def _int(args: dict, key: str, base: int = 10) -> int:
    if key not in args:
        raise RequestError(400, f"missing {key}=")
    try:
        return int(args[key], base)
    except ValueError:
        raise RequestError(400, f"{key} must be an integer") from None


def format_sample(host_ns: int, s) -> str:
    return f"S {host_ns} {s.probe_id} {s.seq} {s.voltage_mV} {s.current_mA} {s.power_mW} {s.avg_count}"


def format_tag(host_ns: int, t) -> str:
    return f"T {host_ns} 0x{t.gpio_state:02x}"


def _clean(text: str) -> str:
    return " ".join(text.split())


class ApiHandler(socketserver.StreamRequestHandler):
    server: "ApiServer"

    def handle(self) -> None:
        peer = "%s:%s" % self.client_address[:2] if isinstance(self.client_address, tuple) else "local"
        for raw in self.rfile:
            try:
                line = raw.decode("utf-8")
            except UnicodeDecodeError:
                self._send(["ERR 400 request is not UTF-8"])
                continue
            if not line.strip():
                continue
            try:
                self._dispatch(line, peer)
            except RequestError as e:
                self._send([f"ERR {e.code} {_clean(e.msg)}"])
            except NoSession as e:
                self._send([f"ERR 409 {_clean(str(e))}"])
            except CollectorError as e:
                self._send([f"ERR 504 {_clean(str(e))}"])
            except (BrokenPipeError, ConnectionResetError):
                return

    def _send(self, lines) -> None:
        self.wfile.write("".join(f"{x}\n" for x in lines).encode("utf-8"))
        self.wfile.flush()

    def _dispatch(self, line: str, peer: str) -> None:
        verb, args = parse_request(line)
        c = self.server.collector
        if verb == "HELLO":
            state = "active" if c.active else ("ended" if c.finished.is_set() else "none")
            serial = c.topology.board_serial if c.topology else "-"
            n = len(c.topology.probes) if c.topology else 0
            self._send([f"H {PROTOCOL_VERSION} {_clean(serial) or '-'} {state} {n}", "OK"])
        elif verb == "TOPOLOGY":
            if c.topology is None:
                raise NoSession("no session")
            rows = [f"P {p.probe_id} {p.bus} {p.position_on_bus} {p.kind.name} {_clean(p.label) or '-'}"
                    for p in c.topology.probes]
            self._send(rows + ["OK"])
        elif verb == "QUERY":
            probe = _int(args, "probe")
            t0, t1 = _int(args, "from"), _int(args, "to")
            if t0 > t1:
                raise RequestError(400, "from must not exceed to")
            if c.topology is None:
                raise NoSession("no session")
            rows = c.query(probe, t0, t1)
            if rows is None:
                raise RequestError(404, f"unknown probe {probe}")
            self._send([format_sample(t, s) for t, s in rows] + ["OK"])
        elif verb == "SUBSCRIBE":
            spec = args.get("probes", "all")
            probes = None
            if spec != "all":
                try:
                    probes = {int(x) for x in spec.split(",") if x}
                except ValueError:
                    raise RequestError(400, "probes must be 'all' or a comma list of ids") from None
            self._stream(c.subscribe(probes))
        elif verb == "TAG":
            if "state" not in args:
                raise RequestError(400, "missing state=")
            state = _int(args, "state", 16)
            res = c.tag(state, peer)
            if res.status is None:
                raise RequestError(409, res.reason)
            self._status_reply(res)
        elif verb == "POWER":
            channel = _int(args, "channel")
            st = args.get("state", "").lower()
            if st not in ("on", "off"):
                raise RequestError(400, "state must be on or off")
            res = c.power(channel, st == "on", args.get("token"), peer)
            if res.status is None:
                raise RequestError(403, res.reason)
            self._status_reply(res)
        elif verb == "METRICS":
            rows = []
            for k, v in c.metrics.as_dict().items():
                if isinstance(v, dict):
                    rows += [f"M {k}.{pid} {n}" for pid, n in v.items()]
                else:
                    rows.append(f"M {k} {v}")
            self._send(rows + ["OK"])
        else:
            raise RequestError(400, f"unknown verb {verb}")

    def _status_reply(self, res) -> None:
        st = res.status
        lines = [f"STATUS {st.code} {_clean(st.detail)}".rstrip()]
        lines.append("OK" if res.ok else f"ERR 502 board status {st.code}")
        self._send(lines)

    def _stream(self, sub) -> None:
        c = self.server.collector
        try:
            for kind, t, rec in sub:
                self.wfile.write(((format_sample(t, rec) if kind == "S" else format_tag(t, rec)) + "\n").encode())
            if sub.overflowed:
                self._send(["ERR 503 subscriber dropped: buffer overflow"])
            else:
                self._send(["OK"])
        finally:
            c.unsubscribe(sub)


class ApiServer(socketserver.ThreadingMixIn, socketserver.TCPServer):
    daemon_threads = True
    allow_reuse_address = True

    def __init__(self, addr: str, collector: Collector):
        tcp = parse_tcp(addr)
        if tcp is None:
            raise ValueError(f"API address must be HOST:PORT, got {addr!r}")
        self.collector = collector
        super().__init__(tcp, ApiHandler)

    @property
    def address(self) -> str:
        host, port = self.server_address[:2]
        return f"{host}:{port}"

    def serve_in_background(self) -> threading.Thread:
        t = threading.Thread(target=self.serve_forever, daemon=True, name="collector-api")
        t.start()
        return t


class ApiClient:
    """Blocking client used by the CLI verbs."""

    def __init__(self, addr: str, timeout: float | None = 10.0):
        import socket

        tcp = parse_tcp(addr)
        if tcp is None:
            raise ValueError(f"API address must be HOST:PORT, got {addr!r}")
        self.sock = socket.create_connection(tcp, timeout=timeout)
        self.rfile = self.sock.makefile("rb")

    def request(self, line: str):
        """Yield response lines; the terminator (OK / ERR ...) is the last one."""
        self.sock.sendall((line.rstrip("\n") + "\n").encode("utf-8"))
        for raw in self.rfile:
            text = raw.decode("utf-8").rstrip("\n")
            yield text
            if text == "OK" or text.startswith("ERR "):
                return
        yield "ERR 504 connection closed"

    def call(self, line: str) -> tuple[list[str], str]:
        lines = list(self.request(line))
        return lines[:-1], lines[-1]

    def close(self) -> None:
        self.rfile.close()
        self.sock.close()


def parse_status_code(terminator: str) -> int | None:
    if terminator == "OK":
        return None
    parts = terminator.split(maxsplit=2)
    try:
        return int(parts[1])
    except (IndexError, ValueError):
        return 0

