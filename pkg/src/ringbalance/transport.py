"""Point-to-point frame transport between ring neighbours.

Two implementations share one interface (``send(to, frame)``, ``recv(from_)``):

* :class:`InMemoryHub` wires ``n`` endpoints together with unbounded FIFO
  queues. It is used by the virtual-clock simulator and by threaded tests.
* :class:`TcpTransport` speaks the wire format below over sockets.

Wire format, all integers little-endian::

    magic     4 bytes   b"RBA1"
    msg_type  1 byte    0=CHUNK 1=SCALAR 2=CONTROL
    sender    4 bytes   unsigned rank
    length    8 bytes   unsigned payload length
    payload   length bytes (CHUNK/SCALAR: float64 little-endian values)
"""

from __future__ import annotations

import enum
import logging
import socket
import struct
import threading
import time
from collections import Counter, deque
from dataclasses import dataclass

import numpy as np

from .core import RingBalanceError

log = logging.getLogger(__name__)

MAGIC = b"RBA1"
HEADER = struct.Struct("<4sBIQ")


class TransportClosed(RingBalanceError):
    pass


class FrameCorrupt(RingBalanceError):
    pass


class MsgType(enum.IntEnum):
    CHUNK = 0
    SCALAR = 1
    CONTROL = 2


@dataclass(frozen=True)
class Frame:
    msg_type: MsgType
    sender_rank: int
    payload: bytes = b""

    @classmethod
    def of_values(cls, msg_type: MsgType, sender_rank: int, values) -> "Frame":
        return cls(msg_type, sender_rank, np.asarray(values, dtype="<f8").tobytes())

    def values(self) -> np.ndarray:
        if len(self.payload) % 8:
            raise FrameCorrupt(f"payload of {len(self.payload)} bytes is not float64-aligned")
        return np.frombuffer(self.payload, dtype="<f8").astype(np.float64)


def encode_frame(frame: Frame) -> bytes:
    return HEADER.pack(MAGIC, int(frame.msg_type), frame.sender_rank, len(frame.payload)) + frame.payload


def decode_header(header: bytes) -> tuple[MsgType, int, int]:
    if len(header) != HEADER.size:
        raise FrameCorrupt(f"header is {len(header)} bytes, expected {HEADER.size}")
    magic, msg_type, sender, length = HEADER.unpack(header)
    if magic != MAGIC:
        raise FrameCorrupt(f"bad magic {magic!r}")
    try:
        kind = MsgType(msg_type)
    except ValueError:
        raise FrameCorrupt(f"unknown msg_type {msg_type}") from None
    return kind, sender, length


def decode_frame(data: bytes) -> Frame:
    kind, sender, length = decode_header(data[: HEADER.size])
    payload = data[HEADER.size :]
    if len(payload) != length:
        raise FrameCorrupt(f"declared {length} payload bytes, got {len(payload)}")
    return Frame(kind, sender, bytes(payload))


class _Channel:
    """One direction of one (sender, receiver) pair."""

    def __init__(self):
        self.items: deque[Frame] = deque()
        self.cond = threading.Condition()
        self.closed = False


class InMemoryHub:
    """Registry that connects ``n`` in-process endpoints pairwise.

    ``log`` records every send as ``(src, dst, msg_type, nbytes)`` in order,
    which makes message interleavings comparable across runs.
    """

    def __init__(self, n: int, timeout: float | None = 30.0):
        if n < 1:
            raise ValueError("n must be positive")
        self.n = n
        self.timeout = timeout
        self._lock = threading.Lock()
        self._channels: dict[tuple[int, int], _Channel] = {}
        self.log: list[tuple[int, int, str, int]] = []

    def channel(self, src: int, dst: int) -> _Channel:
        with self._lock:
            ch = self._channels.get((src, dst))
            if ch is None:
                ch = self._channels[(src, dst)] = _Channel()
            return ch

    def endpoint(self, rank: int) -> "InMemoryTransport":
        if not 0 <= rank < self.n:
            raise ValueError(f"rank {rank} outside [0, {self.n})")
        return InMemoryTransport(self, rank)

    def endpoints(self) -> list["InMemoryTransport"]:
        return [self.endpoint(r) for r in range(self.n)]


class InMemoryTransport:
    def __init__(self, hub: InMemoryHub, rank: int):
        self.hub = hub
        self.rank = rank
        self.n = hub.n
        self.sent: Counter = Counter()
        self.received: Counter = Counter()

    def send(self, to: int, frame: Frame) -> None:
        ch = self.hub.channel(self.rank, to)
        with ch.cond:
            if ch.closed:
                raise TransportClosed(f"channel {self.rank}->{to} is closed")
            ch.items.append(frame)
            ch.cond.notify()
        with self.hub._lock:
            self.hub.log.append((self.rank, to, frame.msg_type.name, len(frame.payload)))
        self.sent[frame.msg_type] += 1
        self.sent[(to, frame.msg_type)] += 1

    def recv(self, from_: int) -> Frame:
        ch = self.hub.channel(from_, self.rank)
        with ch.cond:
            ch.cond.wait_for(lambda: ch.items or ch.closed, timeout=self.hub.timeout)
            if not ch.items:
                reason = "closed" if ch.closed else "timed out"
                raise TransportClosed(f"recv {from_}->{self.rank}: {reason}")
            frame = ch.items.popleft()
        self.received[frame.msg_type] += 1
        self.received[(from_, frame.msg_type)] += 1
        return frame

    def close(self) -> None:
        """Close every channel this endpoint sends on or receives from."""
        for peer in range(self.n):
            for key in ((self.rank, peer), (peer, self.rank)):
                ch = self.hub.channel(*key)
                with ch.cond:
                    ch.closed = True
                    ch.cond.notify_all()


def parse_address(text: str) -> tuple[str, int]:
    host, _, port = text.rpartition(":")
    return host or "127.0.0.1", int(port)


class TcpTransport:
    """Ring-only TCP transport: one outgoing socket to ``next``, one incoming from ``prev``.

    ``addresses[r]`` is where rank ``r`` listens.
    """

    def __init__(self, rank: int, addresses: list[tuple[str, int]], connect_timeout: float = 30.0):
        self.rank = rank
        self.n = len(addresses)
        if self.n < 2:
            raise ValueError("ring requires n >= 2")
        self.addresses = addresses
        self.connect_timeout = connect_timeout
        self.next = (rank + 1) % self.n
        self.prev = (rank - 1) % self.n
        self._out: socket.socket | None = None
        self._in: socket.socket | None = None
        self._listener: socket.socket | None = None
        self.sent: Counter = Counter()
        self.received: Counter = Counter()

    def connect(self) -> "TcpTransport":
        host, port = self.addresses[self.rank]
        listener = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        listener.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        listener.bind((host, port))
        listener.listen(1)
        listener.settimeout(self.connect_timeout)
        self._listener = listener

        accepted: dict[str, socket.socket] = {}

        def accept():
            try:
                conn, _ = listener.accept()
                accepted["sock"] = conn
            except OSError as exc:
                log.debug("rank %d accept failed: %s", self.rank, exc)

        acceptor = threading.Thread(target=accept, daemon=True)
        acceptor.start()

        deadline = time.monotonic() + self.connect_timeout
        while True:
            try:
                out = socket.create_connection(self.addresses[self.next], timeout=self.connect_timeout)
                break
            except OSError:
                if time.monotonic() > deadline:
                    raise TransportClosed(f"rank {self.rank} could not reach rank {self.next}")
                time.sleep(0.05)
        out.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        out.settimeout(None)
        self._out = out
        self._write(Frame(MsgType.CONTROL, self.rank, b"hello"))

        acceptor.join(self.connect_timeout)
        if "sock" not in accepted:
            raise TransportClosed(f"rank {self.rank}: no connection from rank {self.prev}")
        self._in = accepted["sock"]
        self._in.settimeout(None)
        hello = self._read()
        if hello.msg_type != MsgType.CONTROL or hello.sender_rank != self.prev:
            raise FrameCorrupt(f"unexpected handshake {hello}")
        return self

    def _write(self, frame: Frame) -> None:
        try:
            self._out.sendall(encode_frame(frame))
        except OSError as exc:
            raise TransportClosed(str(exc)) from exc

    def _read_exact(self, size: int, *, at_boundary: bool) -> bytes:
        buf = bytearray()
        while len(buf) < size:
            try:
                chunk = self._in.recv(size - len(buf))
            except OSError as exc:
                raise TransportClosed(str(exc)) from exc
            if not chunk:
                if at_boundary and not buf:
                    raise TransportClosed(f"rank {self.prev} closed the connection")
                raise FrameCorrupt(f"stream ended after {len(buf)} of {size} bytes")
            buf += chunk
        return bytes(buf)

    def _read(self) -> Frame:
        kind, sender, length = decode_header(self._read_exact(HEADER.size, at_boundary=True))
        payload = self._read_exact(length, at_boundary=False) if length else b""
        return Frame(kind, sender, payload)

    def send(self, to: int, frame: Frame) -> None:
        if to != self.next:
            raise ValueError(f"rank {self.rank} can only send to {self.next}, not {to}")
        self._write(frame)
        self.sent[frame.msg_type] += 1

    def recv(self, from_: int) -> Frame:
        if from_ != self.prev:
            raise ValueError(f"rank {self.rank} can only receive from {self.prev}, not {from_}")
        frame = self._read()
        self.received[frame.msg_type] += 1
        return frame

    def close(self) -> None:
        for s in (self._out, self._in, self._listener):
            if s is not None:
                try:
                    s.close()
                except OSError:
                    pass
