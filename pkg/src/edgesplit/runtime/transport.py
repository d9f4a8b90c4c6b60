"""TCP mesh with non-blocking sends and a buffer-keyed mailbox.

One connection per (src, dst) direction keeps messages on a channel in send
order. Each inbound connection gets a reader thread that parks frames in the
mailbox; each outbound peer gets a sender thread draining a queue, so ``send``
returns immediately and ``flush`` blocks until every queued frame is written.
"""

from __future__ import annotations

import json
import logging
import queue
import socket
import threading
import time

from ..errors import PeerUnreachable, ProtocolError, Timeout
from . import wire

log = logging.getLogger(__name__)


def parse_endpoints(obj) -> dict:
    eps = {}
    for rank, addr in obj.items():
        host, _, port = str(addr).rpartition(":")
        if not host or not port.isdigit():
            raise ValueError(f"bad endpoint {addr!r} for rank {rank}")
        eps[int(rank)] = (host, int(port))
    return eps


def load_endpoints(path) -> dict:
    with open(path, encoding="utf-8") as fh:
        return parse_endpoints(json.load(fh))


def dump_endpoints(eps: dict) -> str:
    return json.dumps({str(r): f"{h}:{p}" for r, (h, p) in sorted(eps.items())}, indent=1) + "\n"


class Mailbox:
    """Messages keyed by (src, buffer id, seq), with per-peer liveness."""

    def __init__(self):
        self._cond = threading.Condition()
        self._msgs = {}
        self._connected = set()
        self._closed = {}  # src -> reason
        self._errors = []

    def put(self, key, data) -> None:
        with self._cond:
            if key in self._msgs:
                self._errors.append(ProtocolError(f"duplicate message {key}"))
            self._msgs[key] = data
            self._cond.notify_all()

    def connected(self, src: int) -> None:
        with self._cond:
            self._connected.add(src)
            self._cond.notify_all()

    def closed(self, src: int, reason: str) -> None:
        with self._cond:
            self._closed[src] = reason
            self._cond.notify_all()

    def error(self, exc: Exception) -> None:
        with self._cond:
            self._errors.append(exc)
            self._cond.notify_all()

    def take(self, key, connect_deadline: float, deadline: float):
        src = key[0]
        with self._cond:
            while True:
                if self._errors:
                    raise self._errors[0]
                if key in self._msgs:
                    return self._msgs.pop(key)
                now = time.monotonic()
                if src in self._closed:
                    raise PeerUnreachable(f"rank {src} went away before sending {key[1:]}: {self._closed[src]}")
                if src not in self._connected and now >= connect_deadline:
                    raise PeerUnreachable(f"rank {src} never connected")
                if now >= deadline:
                    raise Timeout(f"no message {key} from rank {src} before the deadline")
                limit = deadline if src in self._connected else min(deadline, connect_deadline)
                self._cond.wait(max(0.0, min(limit - now, 0.5)))

    def pending(self) -> list:
        with self._cond:
            return sorted(self._msgs)


class _Outbound(threading.Thread):
    def __init__(self, transport: "Transport", dst: int):
        super().__init__(name=f"send-{transport.rank}->{dst}", daemon=True)
        self.t = transport
        self.dst = dst
        self.q = queue.Queue()
        self.error = None
        self.sock = None

    def _connect(self):
        host, port = self.t.endpoints[self.dst]
        deadline = time.monotonic() + self.t.connect_timeout
        delay = 0.01
        while True:
            try:
                s = socket.create_connection((host, port), timeout=self.t.connect_timeout)
                s.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
                s.settimeout(None)
                s.sendall(wire.hello(self.t.rank, self.dst))
                return s
            except OSError as exc:
                if time.monotonic() + delay > deadline:
                    raise PeerUnreachable(f"cannot connect to rank {self.dst} at {host}:{port}: {exc}") from None
                time.sleep(delay)
                delay = min(delay * 2, 0.2)

    def run(self):
        while True:
            item = self.q.get()
            try:
                if item is None:
                    return
                if self.error is None:
                    if self.sock is None:
                        self.sock = self._connect()
                    for part in item:
                        self.sock.sendall(part)
            except PeerUnreachable as exc:
                self.error = exc
            except OSError as exc:
                self.error = PeerUnreachable(f"lost connection to rank {self.dst}: {exc}")
            finally:
                self.q.task_done()


class Transport:
    def __init__(self, rank: int, endpoints: dict, listen_sock=None, allowed=None,
                 connect_timeout: float = 10.0, timeout: float = 30.0):
        self.rank = rank
        self.endpoints = endpoints
        self.connect_timeout = connect_timeout
        self.timeout = timeout
        self.allowed = allowed  # set of (src, buffer id) or None for any
        self.mailbox = Mailbox()
        self._out = {}
        self._readers = []
        self._stop = threading.Event()
        if listen_sock is None:
            host, port = endpoints[rank]
            listen_sock = socket.create_server((host, port), reuse_port=False)
        self.listener = listen_sock
        self.started = time.monotonic()
        self._acceptor = threading.Thread(target=self._accept_loop, name=f"accept-{rank}", daemon=True)
        self._acceptor.start()

    # inbound -----------------------------------------------------------

    def _accept_loop(self):
        self.listener.settimeout(0.2)
        while not self._stop.is_set():
            try:
                conn, _ = self.listener.accept()
            except socket.timeout:
                continue
            except OSError:
                return
            conn.settimeout(None)
            t = threading.Thread(target=self._reader, args=(conn,), daemon=True)
            t.start()
            self._readers.append(t)

    def _reader(self, conn):
        src = None
        fh = conn.makefile("rb")
        try:
            msg = wire.read_frame(fh)
            if msg is None or msg.buffer != wire.HELLO or msg.dst != self.rank:
                raise ProtocolError("connection did not start with a greeting for this rank")
            src = msg.src
            self.mailbox.connected(src)
            while True:
                msg = wire.read_frame(fh)
                if msg is None:
                    self.mailbox.closed(src, "connection closed")
                    return
                if msg.src != src or msg.dst != self.rank:
                    raise ProtocolError(f"frame {msg.src}->{msg.dst} on channel from rank {src}")
                if self.allowed is not None and (src, msg.buffer) not in self.allowed:
                    raise ProtocolError(f"unexpected buffer id {msg.buffer} from rank {src}")
                self.mailbox.put((src, msg.buffer, msg.seq), msg.data)
        except ProtocolError as exc:
            self.mailbox.error(exc)
        except OSError as exc:
            if src is not None:
                self.mailbox.closed(src, str(exc))
        finally:
            fh.close()
            conn.close()

    def wait(self, src: int, buffer: int, seq: int, timeout: float | None = None):
        now = time.monotonic()
        deadline = now + (self.timeout if timeout is None else timeout)
        return self.mailbox.take((src, buffer, seq), self.started + self.connect_timeout, deadline)

    # outbound ----------------------------------------------------------

    def send(self, dst: int, buffer: int, seq: int, data) -> None:
        ob = self._out.get(dst)
        if ob is None:
            ob = self._out[dst] = _Outbound(self, dst)
            ob.start()
        if ob.error is not None:
            raise ob.error
        arr = wire.np.ascontiguousarray(data, dtype=wire.F32)
        ob.q.put((wire.encode_header(self.rank, dst, buffer, seq, arr.shape), arr.tobytes()))

    def flush(self, timeout: float | None = None) -> None:
        deadline = time.monotonic() + (self.timeout if timeout is None else timeout)
        for ob in self._out.values():
            with ob.q.all_tasks_done:
                while ob.q.unfinished_tasks:
                    if time.monotonic() > deadline:
                        raise Timeout(f"sends to rank {ob.dst} not drained before the deadline")
                    ob.q.all_tasks_done.wait(0.05)
            if ob.error is not None:
                raise ob.error

    def close(self) -> None:
        for ob in self._out.values():
            ob.q.put(None)
        for ob in self._out.values():
            ob.join(timeout=5)
            if ob.sock is not None:
                try:
                    ob.sock.shutdown(socket.SHUT_WR)
                except OSError:
                    pass
                ob.sock.close()
        self._stop.set()
        self.listener.close()
