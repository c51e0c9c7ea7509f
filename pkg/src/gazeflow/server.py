"""Newline-delimited JSON broadcast server for live session data.

Clients connect over TCP and may send one subscription line first, e.g.
``{"subscribe": ["event", "decision"]}``; without one (within
``subscribe_timeout_s``) they receive every message type. Each client has
its own writer thread and byte-bounded queue. A client whose queue grows
past the bound is disconnected; the broadcaster never waits on a client.
"""

from __future__ import annotations

import json
import logging
import socket
import threading
import time
from collections import deque
from dataclasses import asdict, dataclass
from typing import Dict, FrozenSet, List, Optional

from .ingest import parse_address
from .wire import MESSAGE_TYPES, WireMessage

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ServerConfig:
    bind_address: str = "127.0.0.1:0"
    client_buffer_bytes: int = 1 << 20
    subscribe_timeout_s: float = 0.25
    send_buffer_bytes: Optional[int] = None

    def __post_init__(self):
        if self.client_buffer_bytes <= 0:
            raise ValueError("client_buffer_bytes must be positive")


@dataclass
class ServerStats:
    clients_connected: int = 0
    clients_disconnected_slow: int = 0
    clients_disconnected_error: int = 0
    messages_broadcast: int = 0
    bad_subscriptions: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


def parse_subscription(line: bytes) -> Optional[FrozenSet[str]]:
    """Message types named in a subscribe line; raises ValueError if malformed."""
    d = json.loads(line)
    if not isinstance(d, dict) or not isinstance(d.get("subscribe"), list):
        raise ValueError("expected {\"subscribe\": [...]}")
    types = frozenset(d["subscribe"])
    unknown = types - set(MESSAGE_TYPES)
    if unknown:
        raise ValueError(f"unknown message types {sorted(unknown)}")
    return types


class _Client:
    def __init__(self, server: "BroadcastServer", conn: socket.socket, peer,
                 types: Optional[FrozenSet[str]]):
        self.server = server
        self.conn = conn
        self.peer = peer
        self.types = types
        self.queue: deque = deque()
        self.queued_bytes = 0
        self.cond = threading.Condition()
        self.closing = False
        self.dead = False
        self.thread = threading.Thread(target=self._write_loop, name=f"client-{peer}", daemon=True)

    def wants(self, msg_type: str) -> bool:
        return self.types is None or msg_type in self.types

    def offer(self, line: bytes, limit: int) -> bool:
        """Queue a line; False if that would exceed the client's bound."""
        with self.cond:
            if self.dead:
                return True
            if self.queued_bytes + len(line) > limit:
                return False
            self.queue.append(line)
            self.queued_bytes += len(line)
            self.cond.notify()
            return True

    def _write_loop(self) -> None:
        while True:
            with self.cond:
                while not self.queue and not self.closing and not self.dead:
                    self.cond.wait()
                if self.dead or (self.closing and not self.queue):
                    break
                chunk = b"".join(self.queue)
                self.queue.clear()
                self.queued_bytes = 0
            try:
                self.conn.sendall(chunk)
            except OSError as exc:
                if not self.dead:
                    log.info("client %s dropped: %s", self.peer, exc)
                    self.server._drop(self, slow=False)
                break
        self._shutdown()

    def _shutdown(self) -> None:
        try:
            self.conn.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self.conn.close()

    def kill(self) -> None:
        with self.cond:
            self.dead = True
            self.queue.clear()
            self.queued_bytes = 0
            self.cond.notify()
        # unblock a writer stuck in sendall
        try:
            self.conn.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass

    def finish(self) -> None:
        with self.cond:
            self.closing = True
            self.cond.notify()


class BroadcastServer:
    """Fan-out of WireMessages to any number of read-only TCP clients."""

    def __init__(self, config: ServerConfig = ServerConfig()):
        self.config = config
        host, port = parse_address(config.bind_address)
        self._sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        self._sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        try:
            self._sock.bind((host, port))
            self._sock.listen(16)
        except OSError:
            self._sock.close()
            raise
        self._sock.settimeout(0.1)
        self.address = self._sock.getsockname()
        self._lock = threading.Lock()
        self._clients: List[_Client] = []
        self._seq = 0
        self._stats = ServerStats()
        self._closed = threading.Event()
        self._accept_thread = threading.Thread(target=self._accept_loop, name="server-accept",
                                               daemon=True)
        self._accept_thread.start()

    @property
    def stats(self) -> ServerStats:
        with self._lock:
            return ServerStats(**asdict(self._stats))

    @property
    def client_count(self) -> int:
        with self._lock:
            return len(self._clients)

    def wait_for_clients(self, n: int, timeout: float = 5.0) -> bool:
        deadline = time.monotonic() + timeout
        while time.monotonic() < deadline:
            if self.client_count >= n:
                return True
            time.sleep(0.005)
        return self.client_count >= n

    # -- connections -------------------------------------------------------

    def _accept_loop(self) -> None:
        while not self._closed.is_set():
            try:
                conn, peer = self._sock.accept()
            except socket.timeout:
                continue
            except OSError:
                break
            threading.Thread(target=self._handshake, args=(conn, peer), daemon=True).start()

    def _handshake(self, conn: socket.socket, peer) -> None:
        if self.config.send_buffer_bytes:
            conn.setsockopt(socket.SOL_SOCKET, socket.SO_SNDBUF, self.config.send_buffer_bytes)
        types = self._read_subscription(conn, peer)
        conn.settimeout(None)
        client = _Client(self, conn, peer, types)
        with self._lock:
            if self._closed.is_set():
                conn.close()
                return
            self._clients.append(client)
            self._stats.clients_connected += 1
        client.thread.start()

    def _read_subscription(self, conn: socket.socket, peer) -> Optional[FrozenSet[str]]:
        deadline = time.monotonic() + self.config.subscribe_timeout_s
        buf = b""
        while b"\n" not in buf:
            left = deadline - time.monotonic()
            if left <= 0:
                return None
            conn.settimeout(left)
            try:
                chunk = conn.recv(4096)
            except (socket.timeout, OSError):
                return None
            if not chunk:
                break
            buf += chunk
        line = buf.split(b"\n", 1)[0].strip()
        if not line:
            return None
        try:
            return parse_subscription(line)
        except ValueError as exc:
            log.warning("client %s: ignoring bad subscription: %s", peer, exc)
            with self._lock:
                self._stats.bad_subscriptions += 1
            return None

    def _drop(self, client: _Client, slow: bool) -> None:
        with self._lock:
            if client not in self._clients:
                return
            self._clients.remove(client)
            if slow:
                self._stats.clients_disconnected_slow += 1
            else:
                self._stats.clients_disconnected_error += 1
        client.kill()

    # -- broadcasting --------------------------------------------------------

    def broadcast(self, msg_type: str, payload: dict) -> int:
        """Send to every subscribed client; returns the message's seq."""
        if msg_type not in MESSAGE_TYPES:
            raise ValueError(f"unknown message type {msg_type!r}")
        with self._lock:
            self._seq += 1
            seq = self._seq
            self._stats.messages_broadcast += 1
            clients = list(self._clients)
        line = WireMessage(msg_type, payload, seq).to_line()
        limit = self.config.client_buffer_bytes
        for c in clients:
            if c.wants(msg_type) and not c.offer(line, limit):
                log.warning("client %s too slow, disconnecting", c.peer)
                self._drop(c, slow=True)
        return seq

    def close(self, drain_timeout_s: float = 2.0) -> ServerStats:
        """Stop accepting, let clients drain their queues, then disconnect."""
        if not self._closed.is_set():
            self._closed.set()
            self._accept_thread.join()
            self._sock.close()
            with self._lock:
                clients = list(self._clients)
                self._clients.clear()
            for c in clients:
                c.finish()
            deadline = time.monotonic() + drain_timeout_s
            for c in clients:
                c.thread.join(max(0.0, deadline - time.monotonic()))
                if c.thread.is_alive():
                    c.kill()
                    c.thread.join(0.5)
        return self.stats

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
