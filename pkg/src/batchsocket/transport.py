"""Local stream-socket transport for control frames.

Endpoints are either filesystem paths (AF_UNIX) or loopback ``host:port``
(AF_INET). Accepted spellings::

    unix:/tmp/run/broadcast.sock
    /tmp/run/broadcast.sock
    tcp:127.0.0.1:5555
    127.0.0.1:5555
"""

from __future__ import annotations

import os
import socket
import threading
import time
from typing import Callable

from .wire import ControlMessage, FrameDecoder, encode_message


class TransportError(OSError):
    pass


def parse_endpoint(spec: str) -> tuple[str, object]:
    spec = spec.strip()
    if spec.startswith("unix:"):
        return ("unix", spec[5:])
    if spec.startswith("tcp:"):
        spec = spec[4:]
        host, sep, port = spec.rpartition(":")
        if not sep:
            raise ValueError(f"tcp endpoint needs host:port, got {spec!r}")
        return ("tcp", (host, int(port)))
    if "/" in spec:
        return ("unix", spec)
    host, sep, port = spec.rpartition(":")
    if sep and port.isdigit():
        return ("tcp", (host, int(port)))
    raise ValueError(f"cannot parse endpoint {spec!r}")


def _new_socket(family: str) -> socket.socket:
    if family == "unix":
        return socket.socket(socket.AF_UNIX, socket.SOCK_STREAM)
    sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
    sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
    return sock


def create_listener(endpoint: str, backlog: int = 64) -> socket.socket:
    family, addr = parse_endpoint(endpoint)
    sock = _new_socket(family)
    if family == "unix":
        try:
            os.unlink(addr)  # stale socket file from a previous run
        except FileNotFoundError:
            pass
    else:
        sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
    sock.bind(addr)
    sock.listen(backlog)
    return sock


def connect_endpoint(endpoint: str, timeout: float = 5.0, retry_for: float = 0.0) -> socket.socket:
    """Dial an endpoint, optionally retrying while the listener comes up."""
    family, addr = parse_endpoint(endpoint)
    deadline = time.monotonic() + retry_for
    while True:
        sock = _new_socket(family)
        sock.settimeout(timeout)
        try:
            sock.connect(addr)
            sock.settimeout(None)
            return sock
        except (ConnectionRefusedError, FileNotFoundError, socket.timeout) as exc:
            sock.close()
            if time.monotonic() >= deadline:
                raise TransportError(f"cannot connect to {endpoint}: {exc}") from exc
            time.sleep(0.02)


class FramedConnection:
    """A stream socket with locked frame sends (safe from multiple threads)."""

    def __init__(self, sock: socket.socket):
        self.sock = sock
        self._send_lock = threading.Lock()
        self._closed = False

    def send(self, msg: ControlMessage) -> None:
        data = encode_message(msg)
        with self._send_lock:
            self.sock.sendall(data)

    def close(self) -> None:
        if self._closed:
            return
        self._closed = True
        try:
            self.sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self.sock.close()

    @property
    def closed(self) -> bool:
        return self._closed


class ReaderThread(threading.Thread):
    """Decodes frames off a connection and hands them to a callback.

    ``on_close`` fires exactly once, after the peer disconnects or the socket
    errors (including a local ``conn.close()``).
    """

    def __init__(
        self,
        conn: FramedConnection,
        on_message: Callable[[ControlMessage], None],
        on_close: Callable[[], None],
        name: str = "frame-reader",
    ):
        super().__init__(name=name, daemon=True)
        self.conn = conn
        self._on_message = on_message
        self._on_close = on_close

    def run(self) -> None:
        decoder = FrameDecoder()
        sock = self.conn.sock
        try:
            while True:
                data = sock.recv(65536)
                if not data:
                    break
                for msg in decoder.feed(data):
                    self._on_message(msg)
        except (OSError, ValueError):
            pass
        finally:
            self._on_close()
