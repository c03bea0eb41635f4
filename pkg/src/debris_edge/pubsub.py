"""Topic-based publish/subscribe broker over a line-oriented TCP protocol.

Wire frames are newline-terminated UTF-8 text:

    client -> broker:  "SUB <topic>" | "PUB <topic> <payload>" | "PING"
    broker -> client:  "OK" | "ERR <reason>" | "MSG <topic> <payload>" | "PONG"

Topics match by exact byte equality (no wildcards) and nothing is
retained: a subscriber sees only messages published after its SUB was
acknowledged.  Delivery is at-most-once; each client has a bounded
outbound queue and when it fills the oldest queued MSG is dropped and
counted (control replies are never dropped).
"""

from __future__ import annotations

import queue
import socket
import threading
import time
from collections import deque

MAX_TOPIC_BYTES = 255
MAX_PAYLOAD_BYTES = 64 * 1024
DEFAULT_QUEUE_CAPACITY = 1024
DEFAULT_PORT = 1883


class BrokerError(Exception):
    """Server rejected a request (the ERR reason is the message)."""


def validate_topic(topic: str) -> str:
    if not topic:
        raise ValueError("empty topic")
    if len(topic.encode("utf-8")) > MAX_TOPIC_BYTES:
        raise ValueError("topic exceeds 255 bytes")
    if any(c.isspace() for c in topic):
        raise ValueError("whitespace in topic")
    return topic


def validate_payload(payload: str) -> str:
    # \r is banned along with \n: the reader strips a trailing \r, so a
    # payload containing one would not round-trip through the wire.
    if "\n" in payload or "\r" in payload:
        raise ValueError("newline in payload")
    if len(payload.encode("utf-8")) > MAX_PAYLOAD_BYTES:
        raise ValueError("payload exceeds 64 KiB")
    return payload


class _Outbox:
    """Per-client outbound frame queue; MSG frames count against capacity."""

    __slots__ = ("frames", "msg_count", "drops", "closed", "draining", "cond")

    def __init__(self, lock: threading.Lock):
        self.frames: deque[tuple[bool, str]] = deque()
        self.msg_count = 0
        self.drops = 0
        self.closed = False
        self.draining = False
        self.cond = threading.Condition(lock)


class BrokerCore:
    """Transport-free broker state machine.

    All mutations happen under one lock, so the delivery set seen by a
    publish is a consistent snapshot of the subscription table.  The
    socket layer feeds decoded lines in and pulls reply/MSG frames out;
    tests can drive the same surface directly.
    """

    def __init__(self, queue_capacity: int = DEFAULT_QUEUE_CAPACITY):
        if queue_capacity < 1:
            raise ValueError("queue capacity must be at least 1")
        self.queue_capacity = queue_capacity
        self._lock = threading.Lock()
        self._next_id = 0
        self.subs: dict[str, set[int]] = {}
        self._queues: dict[int, _Outbox] = {}

    def connect(self) -> int:
        with self._lock:
            cid = self._next_id
            self._next_id += 1
            self._queues[cid] = _Outbox(self._lock)
            return cid

    def disconnect(self, client_id: int):
        """Drop the client's queue and every subscription it holds."""
        with self._lock:
            box = self._queues.pop(client_id, None)
            if box is None:
                return
            box.closed = True
            box.cond.notify_all()
            for topic in [t for t, ids in self.subs.items() if client_id in ids]:
                self.subs[topic].discard(client_id)
                if not self.subs[topic]:
                    del self.subs[topic]

    def handle_line(self, client_id: int, line: str):
        """Process one decoded frame; replies land in the sender's queue."""
        with self._lock:
            box = self._queues.get(client_id)
            if box is None or box.closed:
                return
            self._enqueue_control(box, self._dispatch(client_id, line))

    def _dispatch(self, client_id: int, line: str) -> str:
        if line == "PING":
            return "PONG"
        if line.startswith("SUB "):
            topic = line[4:]
            try:
                validate_topic(topic)
            except ValueError as exc:
                return f"ERR {exc}"
            self.subs.setdefault(topic, set()).add(client_id)
            return "OK"
        if line.startswith("PUB "):
            rest = line[4:]
            if " " not in rest:
                return "ERR malformed frame (want: PUB <topic> <payload>)"
            topic, payload = rest.split(" ", 1)
            try:
                validate_topic(topic)
                validate_payload(payload)
            except ValueError as exc:
                return f"ERR {exc}"
            frame = f"MSG {topic} {payload}"
            for sub_id in self.subs.get(topic, ()):
                self._enqueue_msg(self._queues[sub_id], frame)
            return "OK"
        return "ERR unknown command"

    def _enqueue_control(self, box: _Outbox, frame: str):
        box.frames.append((False, frame))
        box.cond.notify_all()

    def _enqueue_msg(self, box: _Outbox, frame: str):
        if box.msg_count >= self.queue_capacity:
            # Drop the oldest queued MSG; control frames ahead of it stay.
            held = []
            while True:
                is_msg, old = box.frames.popleft()
                if is_msg:
                    break
                held.append((False, old))
            box.frames.extendleft(reversed(held))
            box.msg_count -= 1
            box.drops += 1
        box.frames.append((True, frame))
        box.msg_count += 1
        box.cond.notify_all()

    def drain(self, client_id: int) -> list[str]:
        """Pop every queued frame without blocking."""
        with self._lock:
            box = self._queues.get(client_id)
            if box is None:
                return []
            out = [frame for _, frame in box.frames]
            box.frames.clear()
            box.msg_count = 0
            return out

    def wait_frames(self, client_id: int, timeout: float | None = None):
        """Block until frames are queued; [] on timeout, None when done.

        None means the client disconnected or a drain was requested and
        its queue is empty, i.e. the writer serving it should exit.
        """
        deadline = None if timeout is None else time.monotonic() + timeout
        with self._lock:
            while True:
                box = self._queues.get(client_id)
                if box is None:
                    return None
                if box.frames:
                    out = [frame for _, frame in box.frames]
                    box.frames.clear()
                    box.msg_count = 0
                    return out
                if box.closed or box.draining:
                    return None
                if deadline is None:
                    box.cond.wait()
                else:
                    remaining = deadline - time.monotonic()
                    if remaining <= 0 or not box.cond.wait(remaining):
                        return []

    def begin_drain(self):
        """Writers flush what is queued, then see None (graceful stop)."""
        with self._lock:
            for box in self._queues.values():
                box.draining = True
                box.cond.notify_all()

    def drop_count(self, client_id: int) -> int:
        with self._lock:
            box = self._queues.get(client_id)
            return 0 if box is None else box.drops

    def idle(self) -> bool:
        """True when no client or subscription state remains."""
        with self._lock:
            return not self.subs and not self._queues


# --- socket layer ----------------------------------------------------------------

# One frame can carry a max-size payload plus topic and verb.
_MAX_LINE_BYTES = MAX_PAYLOAD_BYTES + MAX_TOPIC_BYTES + 16


class Broker:
    """Threaded TCP front end for BrokerCore: one reader and one writer
    thread per client connection."""

    def __init__(self, host: str = "127.0.0.1", port: int = DEFAULT_PORT,
                 queue_capacity: int = DEFAULT_QUEUE_CAPACITY):
        self.core = BrokerCore(queue_capacity)
        self._host = host
        self._port = port
        self._listener = None
        self._running = False
        self._lock = threading.Lock()
        self._conns: dict[int, socket.socket] = {}
        self._threads: list[threading.Thread] = []
        self.address: tuple[str, int] | None = None

    def start(self) -> "Broker":
        sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        try:
            sock.bind((self._host, self._port))
        except OSError:
            sock.close()
            raise
        sock.listen(128)
        self._listener = sock
        self.address = sock.getsockname()[:2]
        self._running = True
        accept = threading.Thread(target=self._accept_loop, daemon=True)
        accept.start()
        self._threads.append(accept)
        return self

    def _accept_loop(self):
        while True:
            try:
                conn, _ = self._listener.accept()
            except OSError:
                break
            if not self._running:
                conn.close()
                break
            cid = self.core.connect()
            with self._lock:
                self._conns[cid] = conn
            for target in (self._reader, self._writer):
                t = threading.Thread(target=target, args=(conn, cid), daemon=True)
                t.start()
                with self._lock:
                    self._threads.append(t)

    def _reader(self, conn: socket.socket, cid: int):
        buf = b""
        try:
            while True:
                chunk = conn.recv(65536)
                if not chunk:
                    break
                buf += chunk
                while b"\n" in buf:
                    raw, buf = buf.split(b"\n", 1)
                    self.core.handle_line(cid, raw.rstrip(b"\r").decode("utf-8"))
                if len(buf) > _MAX_LINE_BYTES:
                    break  # unterminated oversize frame: drop the client
        except (OSError, UnicodeDecodeError):
            pass
        finally:
            self.core.disconnect(cid)

    def _writer(self, conn: socket.socket, cid: int):
        try:
            while True:
                frames = self.core.wait_frames(cid)
                if frames is None:
                    break
                conn.sendall(("\n".join(frames) + "\n").encode("utf-8"))
        except OSError:
            self.core.disconnect(cid)
        finally:
            if self.core.wait_frames(cid, timeout=0) is None:
                # fully done with this client: close to unblock its reader
                try:
                    conn.shutdown(socket.SHUT_RDWR)
                except OSError:
                    pass
                conn.close()
                with self._lock:
                    self._conns.pop(cid, None)

    def stop(self):
        """Flush queued frames to connected clients, then shut down."""
        self._running = False
        if self._listener is not None:
            # a plain close does not wake a blocked accept(); shut the
            # listener down and poke it with a throwaway connection
            try:
                self._listener.shutdown(socket.SHUT_RDWR)
            except OSError:
                pass
            try:
                socket.create_connection(self.address, timeout=0.2).close()
            except OSError:
                pass
            self._listener.close()
        self.core.begin_drain()
        with self._lock:
            threads = list(self._threads)
        for t in threads:
            t.join(timeout=5)
        with self._lock:
            leftovers = list(self._conns.items())
            self._conns.clear()
        for cid, conn in leftovers:
            conn.close()
            self.core.disconnect(cid)

    def __enter__(self) -> "Broker":
        return self

    def __exit__(self, *exc):
        self.stop()


def start_broker(bind_address=None, queue_capacity: int = DEFAULT_QUEUE_CAPACITY) -> Broker:
    """Start a broker; bind_address is "host:port" or a (host, port) pair.

    Port 0 binds an ephemeral port (read it back from broker.address).
    Raises OSError when the port cannot be bound.
    """
    if bind_address is None:
        host, port = "127.0.0.1", DEFAULT_PORT
    elif isinstance(bind_address, str):
        host, _, port_text = bind_address.rpartition(":")
        if not host:
            raise ValueError(f"bind address {bind_address!r} is not host:port")
        port = int(port_text)
    else:
        host, port = bind_address
    return Broker(host, int(port), queue_capacity).start()


class BrokerClient:
    """Blocking client; safe for one requesting thread at a time.

    A background reader splits incoming frames into control replies
    (consumed by subscribe/publish/ping) and MSG deliveries (buffered
    for next_message).
    """

    def __init__(self, host: str, port: int, timeout: float = 5.0):
        self._timeout = timeout
        self._sock = socket.create_connection((host, port), timeout=timeout)
        self._replies: queue.Queue = queue.Queue()
        self._messages: queue.Queue = queue.Queue()
        self._req_lock = threading.Lock()
        self._closed = False
        self._reader_thread = threading.Thread(target=self._read_loop, daemon=True)
        self._reader_thread.start()

    def _read_loop(self):
        buf = b""
        try:
            while True:
                chunk = self._sock.recv(65536)
                if not chunk:
                    break
                buf += chunk
                while b"\n" in buf:
                    raw, buf = buf.split(b"\n", 1)
                    frame = raw.rstrip(b"\r").decode("utf-8")
                    if frame.startswith("MSG "):
                        topic, _, payload = frame[4:].partition(" ")
                        self._messages.put((topic, payload))
                    else:
                        self._replies.put(frame)
        except OSError:
            pass
        finally:
            self._replies.put(None)
            self._messages.put(None)

    def _request(self, frame: str) -> str:
        with self._req_lock:
            if self._closed:
                raise BrokerError("client is closed")
            self._sock.sendall((frame + "\n").encode("utf-8"))
            try:
                reply = self._replies.get(timeout=self._timeout)
            except queue.Empty:
                raise TimeoutError("no broker reply within timeout") from None
        if reply is None:
            self._replies.put(None)  # keep the closed marker for later calls
            raise BrokerError("connection closed by broker")
        if reply.startswith("ERR"):
            raise BrokerError(reply[4:] or "rejected")
        return reply

    def subscribe(self, topic: str):
        self._request(f"SUB {topic}")

    def publish(self, topic: str, payload: str):
        self._request(f"PUB {topic} {payload}")

    def ping(self):
        if self._request("PING") != "PONG":
            raise BrokerError("unexpected ping reply")

    def next_message(self, timeout: float | None = None) -> tuple[str, str]:
        """Oldest undelivered (topic, payload); TimeoutError when none arrives."""
        try:
            item = self._messages.get(timeout=timeout)
        except queue.Empty:
            raise TimeoutError("no message within timeout") from None
        if item is None:
            self._messages.put(None)
            raise BrokerError("connection closed by broker")
        return item

    def close(self):
        self._closed = True
        try:
            self._sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self._sock.close()
        self._reader_thread.join(timeout=5)

    def __enter__(self) -> "BrokerClient":
        return self

    def __exit__(self, *exc):
        self.close()
