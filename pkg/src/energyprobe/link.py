"""Byte-stream endpoints shared by the simulator and the collector.

Address forms accepted by ``connect`` and ``listen``:

* ``HOST:PORT`` -- TCP
* ``unix:PATH`` -- Unix domain socket
* ``-`` -- stdin/stdout (listen only)
* anything else -- a character device such as ``/dev/ttyACM0`` (connect only)
"""

from __future__ import annotations

import os
import socket
import sys


class Link:
    """Minimal blocking duplex byte pipe."""

    def send(self, data: bytes) -> None:
        raise NotImplementedError

    def recv(self, n: int = 65536) -> bytes:
        """Up to *n* bytes; ``b""`` once the peer has gone away."""
        raise NotImplementedError

    def close(self) -> None:
        pass


class SocketLink(Link):
    def __init__(self, sock: socket.socket):
        self.sock = sock

    def send(self, data: bytes) -> None:
        self.sock.sendall(data)

    def recv(self, n: int = 65536) -> bytes:
        try:
            return self.sock.recv(n)
        except (ConnectionResetError, OSError):
            return b""

    def close(self) -> None:
        try:
            self.sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self.sock.close()


class FdLink(Link):
    """Raw file descriptors: stdio pairs or a serial device opened read/write."""

    def __init__(self, rfd: int, wfd: int, owns: bool = False):
        self.rfd, self.wfd, self.owns = rfd, wfd, owns

    def send(self, data: bytes) -> None:
        view = memoryview(data)
        while view:
            n = os.write(self.wfd, view)
            view = view[n:]

    def recv(self, n: int = 65536) -> bytes:
        try:
            return os.read(self.rfd, n)
        except OSError:
            return b""

    def close(self) -> None:
        if self.owns:
            for fd in {self.rfd, self.wfd}:
                try:
                    os.close(fd)
                except OSError:
                    pass


def link_pair() -> tuple[SocketLink, SocketLink]:
    a, b = socket.socketpair()
    return SocketLink(a), SocketLink(b)


def parse_tcp(addr: str) -> tuple[str, int] | None:
    host, sep, port = addr.rpartition(":")
    if not sep or not port.isdigit():
        return None
    return host or "127.0.0.1", int(port)


def connect(addr: str, timeout: float | None = 10.0) -> Link:
    if addr.startswith("unix:"):
        s = socket.socket(socket.AF_UNIX, socket.SOCK_STREAM)
        s.settimeout(timeout)
        s.connect(addr[5:])
        s.settimeout(None)
        return SocketLink(s)
    tcp = parse_tcp(addr)
    if tcp is not None:
        s = socket.create_connection(tcp, timeout=timeout)
        s.settimeout(None)
        s.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        return SocketLink(s)
    fd = os.open(addr, os.O_RDWR | os.O_NOCTTY)
    if os.isatty(fd):
        import tty

        tty.setraw(fd)
    return FdLink(fd, fd, owns=True)


def listen(addr: str) -> "Listener":
    return Listener(addr)


class Listener:
    def __init__(self, addr: str):
        self.addr = addr
        if addr == "-":
            self.sock = None
            return
        if addr.startswith("unix:"):
            path = addr[5:]
            if os.path.exists(path):
                os.unlink(path)
            self.sock = socket.socket(socket.AF_UNIX, socket.SOCK_STREAM)
            self.sock.bind(path)
        else:
            tcp = parse_tcp(addr)
            if tcp is None:
                raise ValueError(f"cannot listen on {addr!r}; use HOST:PORT, unix:PATH or -")
            self.sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
            self.sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
            self.sock.bind(tcp)
        self.sock.listen(1)

    @property
    def bound(self) -> str:
        if self.sock is None:
            return "-"
        name = self.sock.getsockname()
        if isinstance(name, tuple):
            return f"{name[0]}:{name[1]}"
        return f"unix:{name}"

    def accept(self) -> Link:
        if self.sock is None:
            return FdLink(sys.stdin.fileno(), sys.stdout.fileno())
        conn, _ = self.sock.accept()
        if conn.family != socket.AF_UNIX:
            conn.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        return SocketLink(conn)

    def close(self) -> None:
        if self.sock is not None:
            self.sock.close()
