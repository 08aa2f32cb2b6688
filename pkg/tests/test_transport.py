import socket
import struct

import pytest
from hypothesis import given, strategies as st

from ringweave.errors import ProtocolError, TransportError
from ringweave.transport import HEADER_SIZE, Frame, Link, MsgType, decode_frames, encode_frame


@pytest.fixture
def pair():
    a, b = socket.socketpair()
    left, right = Link(a, peer_rank=1), Link(b, peer_rank=0)
    yield left, right
    left.close()
    right.close()


def test_header_layout():
    frame = Frame(MsgType.CHUNK, collective_id=0x0102030405060708, phase_step=3, chunk_index=0x0a0b,
                  dtype_code=1, payload=b"xyz")
    raw = encode_frame(frame)
    assert HEADER_SIZE == 22
    assert raw == (b"\x02" + bytes([8, 7, 6, 5, 4, 3, 2, 1]) + b"\x03\x00" + b"\x0b\x0a" + b"\x01"
                   + struct.pack("<Q", 3) + b"xyz")


def test_send_updates_counters(pair):
    left, right = pair
    left.send_frame(Frame(MsgType.CHUNK, 1, 0, 0, 1, bytes(240)))
    stats = left.snapshot_stats(MsgType.CHUNK)
    assert (stats.frames_sent, stats.payload_bytes_sent) == (1, 240)
    right.recv_frame()
    stats = right.snapshot_stats()
    assert (stats.frames_received, stats.payload_bytes_received) == (1, 240)


def test_zero_length_payload(pair):
    left, right = pair
    left.send_frame(Frame(MsgType.CHUNK, 5, 1, 2, 3))
    got = right.recv_frame()
    assert got.payload_len == 0 and got.collective_id == 5


def test_counters_reset(pair):
    left, _ = pair
    left.send_frame(Frame(MsgType.BYE))
    left.reset_stats()
    assert left.snapshot_stats().frames_sent == 0


frames = st.builds(
    Frame,
    msg_type=st.sampled_from(list(MsgType)),
    collective_id=st.integers(0, 2**64 - 1),
    phase_step=st.integers(0, 2**16 - 1),
    chunk_index=st.integers(0, 2**16 - 1),
    dtype_code=st.integers(0, 4),
    payload=st.binary(max_size=300),
)


@given(st.lists(frames, max_size=10))
def test_concatenated_frames_reparse(seq):
    assert decode_frames(b"".join(encode_frame(f) for f in seq)) == seq


@given(st.lists(frames, min_size=1, max_size=10))
def test_loopback_roundtrip_is_fifo(seq):
    a, b = socket.socketpair()
    left, right = Link(a), Link(b)
    try:
        for f in seq:
            left.send_frame(f)
        assert [right.recv_frame() for _ in seq] == seq
    finally:
        left.close()
        right.close()


def test_large_payload_roundtrip(pair):
    import threading

    left, right = pair
    payload = bytes(range(256)) * 4096
    t = threading.Thread(target=left.send_frame, args=(Frame(MsgType.CHUNK, payload=payload),))
    t.start()
    assert right.recv_frame().payload == payload
    t.join()


def test_unknown_msg_type(pair):
    left, right = pair
    left.sock.sendall(b"\x09" + bytes(HEADER_SIZE - 1))
    with pytest.raises(ProtocolError):
        right.recv_frame()


def test_truncated_stream(pair):
    left, right = pair
    left.sock.sendall(encode_frame(Frame(MsgType.CHUNK, payload=b"abcdef"))[:-2])
    left.sock.shutdown(socket.SHUT_WR)
    with pytest.raises(ProtocolError):
        right.recv_frame()


def test_truncated_buffer():
    raw = encode_frame(Frame(MsgType.PLAN, payload=b"abc"))
    with pytest.raises(ProtocolError):
        decode_frames(raw[:10])
    with pytest.raises(ProtocolError):
        decode_frames(raw[:-1])


def test_peer_closed_names_rank(pair):
    left, right = pair
    left.close()
    with pytest.raises(TransportError) as info:
        right.recv_frame()
    assert info.value.peer_rank == 0
