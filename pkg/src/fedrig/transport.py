"""Byte-stream transports carrying wire-protocol frames.

Two endpoint kinds:

* ``host:port``     — a TCP connection, optionally TLS-wrapped.
* ``mem://name``    — an in-process queue pair registered in a global
                      table; same framing bytes, no sockets. Used by the
                      in-process spawn mode and by tests.

Each connection is read by one reader and written by one writer at a
time; distinct connections are independent.
"""

from __future__ import annotations

import queue
import socket
import ssl
import threading
from dataclasses import dataclass

from .protocol import HEADER_SIZE, Message, decode_message, encode_message, frame_size

__all__ = [
    "Connection",
    "ConnectionClosed",
    "Listener",
    "TlsClient",
    "TlsServer",
    "connect",
    "listen",
    "request",
]

DEFAULT_DIAL_TIMEOUT = 5.0


class ConnectionClosed(ConnectionError):
    """The peer closed the stream (possibly mid-frame)."""


@dataclass(frozen=True)
class TlsServer:
    cert_file: str
    key_file: str


@dataclass(frozen=True)
class TlsClient:
    # ca_file is the peer certificate to trust; None disables verification
    # (traffic is still encrypted).
    ca_file: str | None = None


def _is_mem(endpoint: str) -> bool:
    return endpoint.startswith("mem://")


class Connection:
    """Base class; see TcpConnection and MemConnection."""

    def send_message(self, message: Message) -> None:
        raise NotImplementedError

    def recv_message(self, timeout: float | None = None) -> Message:
        raise NotImplementedError

    def close(self) -> None:
        raise NotImplementedError

    def __enter__(self) -> "Connection":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


class TcpConnection(Connection):
    def __init__(self, sock: socket.socket) -> None:
        self._sock = sock
        self._send_lock = threading.Lock()

    def send_message(self, message: Message) -> None:
        data = encode_message(message)
        with self._send_lock:
            self._sock.sendall(data)

    def _recv_exactly(self, n: int) -> bytes:
        chunks = []
        remaining = n
        while remaining:
            chunk = self._sock.recv(min(remaining, 1 << 20))
            if not chunk:
                raise ConnectionClosed(f"peer closed with {remaining} bytes outstanding")
            chunks.append(chunk)
            remaining -= len(chunk)
        return b"".join(chunks)

    def recv_message(self, timeout: float | None = None) -> Message:
        self._sock.settimeout(timeout)
        header = self._recv_exactly(HEADER_SIZE)
        payload = self._recv_exactly(frame_size(header) - HEADER_SIZE)
        return decode_message(header + payload)

    def close(self) -> None:
        try:
            self._sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self._sock.close()


class MemConnection(Connection):
    _CLOSE = object()

    def __init__(self, inbox: queue.Queue, outbox: queue.Queue) -> None:
        self._inbox = inbox
        self._outbox = outbox
        self._closed = False

    def send_message(self, message: Message) -> None:
        if self._closed:
            raise ConnectionClosed("connection already closed")
        self._outbox.put(encode_message(message))

    def recv_message(self, timeout: float | None = None) -> Message:
        try:
            frame = self._inbox.get(timeout=timeout)
        except queue.Empty:
            raise TimeoutError("recv timed out") from None
        if frame is self._CLOSE:
            self._inbox.put(frame)  # keep EOF visible to later reads
            raise ConnectionClosed("peer closed")
        return decode_message(frame)

    def close(self) -> None:
        if not self._closed:
            self._closed = True
            self._outbox.put(self._CLOSE)


class Listener:
    def accept(self, timeout: float | None = None) -> Connection:
        raise NotImplementedError

    def close(self) -> None:
        raise NotImplementedError

    @property
    def endpoint(self) -> str:
        raise NotImplementedError


class TcpListener(Listener):
    def __init__(self, host: str, port: int, backlog: int, tls: TlsServer | None) -> None:
        self._sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        self._sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        self._sock.bind((host, port))
        self._sock.listen(backlog)
        self._host, self._port = self._sock.getsockname()[:2]
        self._ctx: ssl.SSLContext | None = None
        if tls is not None:
            self._ctx = ssl.SSLContext(ssl.PROTOCOL_TLS_SERVER)
            self._ctx.load_cert_chain(tls.cert_file, tls.key_file)

    def accept(self, timeout: float | None = None) -> Connection:
        self._sock.settimeout(timeout)
        conn, _ = self._sock.accept()
        conn.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        if self._ctx is not None:
            conn = self._ctx.wrap_socket(conn, server_side=True)
        return TcpConnection(conn)

    def close(self) -> None:
        self._sock.close()

    @property
    def endpoint(self) -> str:
        return f"{self._host}:{self._port}"


_MEM_REGISTRY: dict[str, "MemListener"] = {}
_MEM_LOCK = threading.Lock()


class MemListener(Listener):
    def __init__(self, name: str) -> None:
        self._name = name
        self._pending: queue.Queue = queue.Queue()
        self._closed = False
        with _MEM_LOCK:
            if name in _MEM_REGISTRY:
                raise OSError(f"mem endpoint {name!r} already bound")
            _MEM_REGISTRY[name] = self

    def accept(self, timeout: float | None = None) -> Connection:
        try:
            pair = self._pending.get(timeout=timeout)
        except queue.Empty:
            raise TimeoutError("accept timed out") from None
        if pair is None:
            raise OSError("listener closed")
        client_to_server, server_to_client = pair
        return MemConnection(inbox=client_to_server, outbox=server_to_client)

    def close(self) -> None:
        if self._closed:
            return
        self._closed = True
        with _MEM_LOCK:
            _MEM_REGISTRY.pop(self._name, None)
        self._pending.put(None)

    def _dial(self) -> Connection:
        if self._closed:
            raise ConnectionRefusedError(f"mem endpoint {self._name!r} is closed")
        client_to_server: queue.Queue = queue.Queue()
        server_to_client: queue.Queue = queue.Queue()
        self._pending.put((client_to_server, server_to_client))
        return MemConnection(inbox=server_to_client, outbox=client_to_server)

    @property
    def endpoint(self) -> str:
        return f"mem://{self._name}"


def listen(endpoint: str, *, tls: TlsServer | None = None, backlog: int = 128) -> Listener:
    """Bind a listener. TLS ("cert/key" pair) is only valid for TCP endpoints."""
    if _is_mem(endpoint):
        if tls is not None:
            raise ValueError("TLS is not applicable to mem:// endpoints")
        return MemListener(endpoint[len("mem://") :])
    host, _, port = endpoint.rpartition(":")
    return TcpListener(host or "127.0.0.1", int(port), backlog, tls)


def connect(
    endpoint: str,
    *,
    tls: TlsClient | None = None,
    timeout: float = DEFAULT_DIAL_TIMEOUT,
) -> Connection:
    """Dial an endpoint and return a connection ready for framing."""
    if _is_mem(endpoint):
        name = endpoint[len("mem://") :]
        with _MEM_LOCK:
            listener = _MEM_REGISTRY.get(name)
        if listener is None:
            raise ConnectionRefusedError(f"no mem endpoint {name!r}")
        return listener._dial()
    host, _, port = endpoint.rpartition(":")
    sock = socket.create_connection((host or "127.0.0.1", int(port)), timeout=timeout)
    sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
    if tls is not None:
        ctx = ssl.SSLContext(ssl.PROTOCOL_TLS_CLIENT)
        if tls.ca_file:
            ctx.load_verify_locations(tls.ca_file)
            ctx.check_hostname = False  # self-signed per-component certs
            ctx.verify_mode = ssl.CERT_REQUIRED
        else:
            ctx.check_hostname = False
            ctx.verify_mode = ssl.CERT_NONE
        sock = ctx.wrap_socket(sock, server_hostname=host or "127.0.0.1")
    return TcpConnection(sock)


def request(
    endpoint: str,
    message: Message,
    *,
    tls: TlsClient | None = None,
    dial_timeout: float = DEFAULT_DIAL_TIMEOUT,
    reply_timeout: float | None = 30.0,
) -> Message:
    """One-shot exchange: dial, send one message, wait for one reply, close."""
    with connect(endpoint, tls=tls, timeout=dial_timeout) as conn:
        conn.send_message(message)
        return conn.recv_message(timeout=reply_timeout)
