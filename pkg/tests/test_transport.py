import socket
import struct
import threading

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from ringbalance.transport import (
    HEADER,
    MAGIC,
    Frame,
    FrameCorrupt,
    InMemoryHub,
    MsgType,
    TcpTransport,
    TransportClosed,
    decode_frame,
    encode_frame,
    parse_address,
)


def free_ports(k):
    socks = [socket.socket() for _ in range(k)]
    for s in socks:
        s.bind(("127.0.0.1", 0))
    ports = [s.getsockname()[1] for s in socks]
    for s in socks:
        s.close()
    return ports


def tcp_ring(n):
    addrs = [("127.0.0.1", p) for p in free_ports(n)]
    transports = [TcpTransport(r, addrs, connect_timeout=10) for r in range(n)]
    errors = []

    def connect(t):
        try:
            t.connect()
        except Exception as exc:  # pragma: no cover - reported below
            errors.append(exc)

    threads = [threading.Thread(target=connect, args=(t,)) for t in transports]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert not errors, errors
    return transports


class TestCodec:
    def test_header_layout(self):
        data = encode_frame(Frame(MsgType.SCALAR, 3, struct.pack("<d", 1.5)))
        assert data[:4] == b"RBA1"
        assert data[4] == 1
        assert data[5:9] == (3).to_bytes(4, "little")
        assert data[9:17] == (8).to_bytes(8, "little")
        assert struct.unpack("<d", data[17:]) == (1.5,)
        assert HEADER.size == 17

    def test_wrong_magic(self):
        data = bytearray(encode_frame(Frame(MsgType.CHUNK, 0, b"")))
        data[:4] = b"XXXX"
        with pytest.raises(FrameCorrupt):
            decode_frame(bytes(data))

    def test_bad_type_and_length(self):
        good = encode_frame(Frame(MsgType.CHUNK, 0, b"\x00" * 8))
        with pytest.raises(FrameCorrupt):
            decode_frame(good[:4] + b"\x07" + good[5:])
        with pytest.raises(FrameCorrupt):
            decode_frame(good[:-1])

    @given(
        st.sampled_from(list(MsgType)),
        st.integers(0, 2**32 - 1),
        st.lists(st.floats(allow_nan=False), max_size=50),
    )
    def test_round_trip(self, kind, sender, values):
        frame = Frame.of_values(kind, sender, values)
        back = decode_frame(encode_frame(frame))
        assert back == frame
        np.testing.assert_array_equal(back.values(), np.asarray(values, dtype=np.float64))

    def test_parse_address(self):
        assert parse_address("10.0.0.1:5000") == ("10.0.0.1", 5000)
        assert parse_address(":7") == ("127.0.0.1", 7)


class TestInMemory:
    def test_fifo_across_types(self):
        a, b = InMemoryHub(2).endpoints()
        a.send(1, Frame(MsgType.CHUNK, 0, b"c"))
        a.send(1, Frame(MsgType.SCALAR, 0, b"s"))
        assert b.recv(0).msg_type == MsgType.CHUNK
        assert b.recv(0).msg_type == MsgType.SCALAR

    def test_ping_pong_counts(self):
        a, b = InMemoryHub(2).endpoints()

        def pong():
            for _ in range(1000):
                f = b.recv(0)
                b.send(0, Frame(MsgType.SCALAR, 1, f.payload))

        t = threading.Thread(target=pong)
        t.start()
        for i in range(1000):
            a.send(1, Frame.of_values(MsgType.SCALAR, 0, [i]))
            assert a.recv(1).values()[0] == i
        t.join()
        assert a.sent[MsgType.SCALAR] == 1000 and b.received[MsgType.SCALAR] == 1000
        assert b.sent[MsgType.SCALAR] == 1000 and a.received[MsgType.SCALAR] == 1000

    def test_close_wakes_receiver(self):
        hub = InMemoryHub(2)
        a, b = hub.endpoints()
        result = []

        def waiter():
            try:
                b.recv(0)
            except TransportClosed as exc:
                result.append(exc)

        t = threading.Thread(target=waiter)
        t.start()
        a.close()
        t.join(5)
        assert result
        with pytest.raises(TransportClosed):
            a.send(1, Frame(MsgType.CONTROL, 0))

    def test_timeout(self):
        a, b = InMemoryHub(2, timeout=0.05).endpoints()
        with pytest.raises(TransportClosed):
            b.recv(0)


class TestTcp:
    def test_fifo_and_values(self):
        t0, t1 = tcp_ring(2)
        try:
            t0.send(1, Frame.of_values(MsgType.CHUNK, 0, [1.0, 2.0, 3.0]))
            t0.send(1, Frame.of_values(MsgType.SCALAR, 0, [9.5]))
            f = t1.recv(0)
            assert f.msg_type == MsgType.CHUNK and f.sender_rank == 0
            np.testing.assert_array_equal(f.values(), [1.0, 2.0, 3.0])
            assert t1.recv(0).values()[0] == 9.5
            assert t0.sent[MsgType.CHUNK] == 1 and t1.received[MsgType.SCALAR] == 1
        finally:
            t0.close()
            t1.close()

    def test_ring_only(self):
        ts = tcp_ring(3)
        try:
            with pytest.raises(ValueError):
                ts[0].send(2, Frame(MsgType.CONTROL, 0))
            with pytest.raises(ValueError):
                ts[0].recv(1)
        finally:
            for t in ts:
                t.close()

    def test_peer_close(self):
        t0, t1 = tcp_ring(2)
        t0.close()
        with pytest.raises(TransportClosed):
            t1.recv(0)
        t1.close()

    def test_corrupt_stream(self):
        t0, t1 = tcp_ring(2)
        try:
            t0._out.sendall(b"JUNK" + bytes(13))
            with pytest.raises(FrameCorrupt):
                t1.recv(0)
        finally:
            t0.close()
            t1.close()

    def test_truncated_payload(self):
        t0, t1 = tcp_ring(2)
        data = encode_frame(Frame.of_values(MsgType.CHUNK, 0, [1.0, 2.0]))
        t0._out.sendall(data[:-4])
        t0.close()
        with pytest.raises(FrameCorrupt):
            t1.recv(0)
        t1.close()

    def test_magic_constant(self):
        assert MAGIC == b"RBA1"
