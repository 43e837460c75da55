"""TCP transport: node-side listeners and host-side synchronous channels.

Each node listens on two ports, one for control messages and one (message
port + 1) for bulk data packages. The listener decodes every inbound frame
and hands it to the request handler on a worker thread, so slow requests on
one connection never hold up others. The host side is strictly synchronous:
a :class:`Channel` has at most one request in flight.
"""

from __future__ import annotations

import itertools
import logging
import os
import socket
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from typing import Callable, Optional

from .errors import (
    AggregateError,
    BusyError,
    ConnectError,
    HaoclError,
    HandshakeError,
    ProtocolError,
    RemoteError,
    RequestTimeout,
    StartupError,
    TransportError,
    WireError,
)
from .wire import (
    RESPONSE_KINDS,
    DataPackage,
    ErrorBody,
    FrameBuffer,
    Kind,
    Message,
    encode,
)

log = logging.getLogger(__name__)

RECV_SIZE = 1 << 18
CONNECT_RETRIES = 10
CONNECT_INTERVAL = 0.2
HANDSHAKE_TIMEOUT = 5.0
DEFAULT_REQUEST_TIMEOUT = 60.0


def request_timeout() -> float:
    """Request timeout in seconds, overridable through HAOCL_REQ_TIMEOUT_MS."""
    raw = os.environ.get("HAOCL_REQ_TIMEOUT_MS")
    if raw:
        return int(raw) / 1000.0
    return DEFAULT_REQUEST_TIMEOUT


@dataclass(frozen=True)
class Endpoint:
    host: str
    message_port: int
    data_port: int = 0

    def __post_init__(self):
        if not self.data_port:
            object.__setattr__(self, "data_port", self.message_port + 1)
        for p in (self.message_port, self.data_port):
            if not 1 <= p <= 65535:
                raise ValueError(f"port {p} outside 1..65535")
        if self.message_port == self.data_port:
            raise ValueError("message and data ports must differ")

    @classmethod
    def parse(cls, text: str) -> "Endpoint":
        host, _, port = text.rpartition(":")
        if not host or not port.isdigit():
            raise ValueError(f"expected <host>:<port>, got {text!r}")
        return cls(host, int(port))

    def __str__(self):
        return f"{self.host}:{self.message_port}"


Handler = Callable[[Message], Optional[Message]]


# -- server side --------------------------------------------------------------

class _Connection:
    def __init__(self, sock, addr, port_kind):
        self.sock = sock
        self.addr = addr
        self.port_kind = port_kind
        self.write_lock = threading.Lock()

    def send(self, msg: Message):
        data = encode(msg)
        with self.write_lock:
            self.sock.sendall(data)

    def close(self):
        try:
            self.sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self.sock.close()


class Listener:
    """Serves one endpoint (message + data port) until stopped.

    ``handler`` may be invoked concurrently. Its return value (if any) is sent
    back on the originating connection with the request's call_id. A Shutdown
    frame stops accepting, drains in-flight handlers, then closes everything.
    """

    def __init__(self, endpoint: Endpoint, handler: Handler, workers: int = 64,
                 on_stop: Optional[Callable[[], None]] = None):
        self.endpoint = endpoint
        self.handler = handler
        self.on_stop = on_stop
        self._pool = ThreadPoolExecutor(max_workers=workers, thread_name_prefix="haocl-h")
        self._socks = []
        self._conns: set[_Connection] = set()
        self._conns_lock = threading.Lock()
        self._stopping = threading.Event()
        self._stopped = threading.Event()
        self._threads = []

    def start(self) -> "Listener":
        for port, kind in ((self.endpoint.message_port, "message"), (self.endpoint.data_port, "data")):
            s = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
            s.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
            try:
                s.bind((self.endpoint.host, port))
                s.listen(64)
            except OSError as exc:
                s.close()
                for other in self._socks:
                    other.close()
                raise StartupError(f"cannot bind {kind} port {port}: {exc}") from exc
            self._socks.append(s)
            t = threading.Thread(target=self._accept_loop, args=(s, kind), daemon=True,
                                 name=f"haocl-accept-{port}")
            self._threads.append(t)
        for t in self._threads:
            t.start()
        log.debug("serving %s (data port %d)", self.endpoint, self.endpoint.data_port)
        return self

    @property
    def stopping(self):
        return self._stopping.is_set()

    def _accept_loop(self, lsock, kind):
        while not self._stopping.is_set():
            try:
                sock, addr = lsock.accept()
            except OSError:
                break
            sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            conn = _Connection(sock, addr, kind)
            with self._conns_lock:
                if self._stopping.is_set():
                    conn.close()
                    break
                self._conns.add(conn)
            threading.Thread(target=self._read_loop, args=(conn,), daemon=True,
                             name=f"haocl-conn-{kind}").start()

    def _read_loop(self, conn: _Connection):
        frames = FrameBuffer()
        try:
            while True:
                data = conn.sock.recv(RECV_SIZE)
                if not data:
                    break
                frames.feed(data)
                while True:
                    call_id = frames.peek_call_id()
                    try:
                        msg = frames.next()
                    except WireError as exc:
                        log.warning("malformed frame from %s: %s", conn.addr, exc)
                        conn.send(Message(Kind.ERROR_REPLY, call_id or 0, ErrorBody(exc.code, str(exc))))
                        continue
                    if msg is None:
                        break
                    self._submit(conn, msg)
        except OSError as exc:
            if not self._stopping.is_set():
                log.info("connection %s reset: %s", conn.addr, exc)
        finally:
            with self._conns_lock:
                self._conns.discard(conn)
            conn.close()

    def _submit(self, conn, msg):
        if msg.kind == Kind.SHUTDOWN:
            threading.Thread(target=self.stop, daemon=True, name="haocl-stop").start()
            return
        if self._stopping.is_set():
            conn.send(msg.error("shutting-down", "node is shutting down"))
            return
        try:
            self._pool.submit(self._dispatch, conn, msg)
        except RuntimeError:
            conn.send(msg.error("shutting-down", "node is shutting down"))

    def _dispatch(self, conn, msg):
        try:
            reply = self.handler(msg)
        except Exception as exc:
            log.exception("handler failed on %s", msg.kind.name)
            reply = msg.error(getattr(exc, "code", "internal"), str(exc))
        if reply is None:
            return
        if reply.call_id != msg.call_id:
            reply = replace(reply, call_id=msg.call_id)
        try:
            conn.send(reply)
        except OSError as exc:
            log.info("could not reply to %s: %s", conn.addr, exc)

    def stop(self):
        """Stop accepting, let in-flight handlers finish, close every connection."""
        if self._stopping.is_set():
            self._stopped.wait()
            return
        self._stopping.set()
        for s in self._socks:
            try:
                s.shutdown(socket.SHUT_RDWR)
            except OSError:
                pass
            s.close()
        self._pool.shutdown(wait=True)
        if self.on_stop is not None:
            self.on_stop()
        with self._conns_lock:
            conns = list(self._conns)
            self._conns.clear()
        for c in conns:
            c.close()
        self._stopped.set()

    def wait(self, timeout=None) -> bool:
        return self._stopped.wait(timeout)

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.stop()


def serve(endpoint: Endpoint, handler: Handler, **kw) -> Listener:
    """Bind both ports of ``endpoint`` and start dispatching frames to ``handler``."""
    return Listener(endpoint, handler, **kw).start()


# -- host side ----------------------------------------------------------------

_session_ids = itertools.count()


class Channel:
    """A synchronous message + data connection pair to one node."""

    def __init__(self, peer: Endpoint, msg_sock, data_sock, timeout=None, tracer=None):
        self.peer = peer
        self.session_id = next(_session_ids)
        self.next_call_id = 1
        self.timeout = request_timeout() if timeout is None else timeout
        self.tracer = tracer
        self._socks = {"message": msg_sock, "data": data_sock}
        self._bufs = {"message": FrameBuffer(), "data": FrameBuffer()}
        self._lock = threading.Lock()
        self.closed = False

    def _take_call_id(self):
        cid = self.next_call_id
        self.next_call_id += 1
        return cid

    def _send(self, port, msg):
        if self.closed:
            raise TransportError(f"channel to {self.peer} is closed", self.peer)
        if self.tracer is not None:
            self.tracer(self.peer, msg)
        try:
            self._socks[port].sendall(encode(msg))
        except OSError as exc:
            self._fail()
            raise TransportError(f"send to {self.peer} failed: {exc}", self.peer) from exc

    def _recv(self, port, timeout) -> Message:
        buf = self._bufs[port]
        sock = self._socks[port]
        deadline = time.monotonic() + timeout
        while True:
            try:
                msg = buf.next()
            except WireError as exc:
                self._fail()
                raise ProtocolError(f"undecodable reply from {self.peer}: {exc}", self.peer) from exc
            if msg is not None:
                return msg
            remaining = deadline - time.monotonic()
            if remaining <= 0:
                self._fail()
                raise RequestTimeout(f"no reply from {self.peer} within {timeout:.1f}s", self.peer)
            sock.settimeout(remaining)
            try:
                data = sock.recv(RECV_SIZE)
            except socket.timeout:
                continue
            except OSError as exc:
                self._fail()
                raise TransportError(f"connection to {self.peer} failed: {exc}", self.peer) from exc
            if not data:
                self._fail()
                raise TransportError(f"connection to {self.peer} closed by peer", self.peer)
            buf.feed(data)

    def _check(self, reply: Message, expected_kind, call_ids) -> Message:
        if reply.call_id not in call_ids:
            self._fail()
            raise ProtocolError(
                f"reply call_id {reply.call_id} from {self.peer} does not match request", self.peer
            )
        if reply.kind == Kind.ERROR_REPLY:
            err = BusyError if reply.body.code == "busy" else RemoteError
            raise err(reply.body.code, reply.body.message, self.peer)
        if reply.kind != expected_kind:
            self._fail()
            raise ProtocolError(f"expected {expected_kind.name}, got {reply.kind.name}", self.peer)
        return reply

    def request(self, msg: Message, timeout=None) -> Message:
        """Send a request and block for its correlated response."""
        if msg.kind not in RESPONSE_KINDS:
            raise ValueError(f"{msg.kind.name} is not a request kind")
        port = "data" if msg.kind == Kind.DATA_TRANSFER else "message"
        with self._lock:
            msg = replace(msg, call_id=self._take_call_id())
            self._send(port, msg)
            reply = self._recv(port, self.timeout if timeout is None else timeout)
            return self._check(reply, RESPONSE_KINDS[msg.kind], {msg.call_id})

    def send_data(self, packages: list[DataPackage], timeout=None) -> Message:
        """Write every package on the data connection; wait for the final DataAck."""
        if not packages:
            raise ValueError("no packages to send")
        with self._lock:
            ids = []
            for pkg in packages:
                m = Message(Kind.DATA_TRANSFER, self._take_call_id(), pkg)
                ids.append(m.call_id)
                self._send("data", m)
            reply = self._recv("data", self.timeout if timeout is None else timeout)
            if reply.kind == Kind.ERROR_REPLY:
                return self._check(reply, Kind.DATA_ACK, set(ids))
            return self._check(reply, Kind.DATA_ACK, {ids[-1]})

    def shutdown(self, wait=True, timeout=None):
        """Ask the node to drain and exit; optionally wait for it to hang up."""
        with self._lock:
            self._send("message", Message(Kind.SHUTDOWN, self._take_call_id()))
            if wait:
                try:
                    self._recv("message", self.timeout if timeout is None else timeout)
                except TransportError:
                    pass
            self._fail()

    def _fail(self):
        self.closed = True
        for s in self._socks.values():
            try:
                s.close()
            except OSError:
                pass

    def close(self):
        self._fail()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def _open(host, port, retries, interval, endpoint):
    last = None
    for attempt in range(retries + 1):
        try:
            s = socket.create_connection((host, port), timeout=max(interval, 1.0))
            s.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            return s
        except OSError as exc:
            last = exc
            if attempt < retries:
                time.sleep(interval)
    raise ConnectError(f"cannot connect to {endpoint} (port {port}): {last}", endpoint)


def connect(endpoint: Endpoint, retries=CONNECT_RETRIES, interval=CONNECT_INTERVAL,
            handshake_timeout=HANDSHAKE_TIMEOUT, timeout=None, tracer=None) -> Channel:
    """Open both connections to a node and confirm it answers a Ping."""
    msg_sock = _open(endpoint.host, endpoint.message_port, retries, interval, endpoint)
    try:
        data_sock = _open(endpoint.host, endpoint.data_port, retries, interval, endpoint)
    except ConnectError:
        msg_sock.close()
        raise
    chan = Channel(endpoint, msg_sock, data_sock, timeout=timeout, tracer=tracer)
    try:
        chan.request(Message(Kind.PING), timeout=handshake_timeout)
    except HaoclError as exc:
        chan.close()
        raise HandshakeError(f"handshake with {endpoint} failed: {exc}", endpoint) from exc
    return chan


def broadcast(chans: list[Channel], msg: Message) -> list[Message]:
    """Send ``msg`` to each channel in order and collect the responses.

    On any failure raises :class:`AggregateError` naming the failed endpoints;
    its ``results`` holds the successful responses (``None`` for failures).
    """
    results, failures = [], []
    for chan in chans:
        try:
            results.append(chan.request(msg))
        except HaoclError as exc:
            results.append(None)
            failures.append((chan.peer, exc))
    if failures:
        raise AggregateError(failures, results)
    return results
