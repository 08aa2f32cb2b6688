"""Length-delimited frames over a TCP stream, with per-link counters.

Wire layout (little-endian, 22-byte header)::

    msg_type:u8 | collective_id:u64 | phase_step:u16 | chunk_index:u16 |
    dtype_code:u8 | payload_len:u64 | payload
"""
from __future__ import annotations

import enum
import socket
import struct
import threading
from dataclasses import dataclass, field

from .errors import ProtocolError, TransportError

HEADER = struct.Struct("<BQHHBQ")
HEADER_SIZE = HEADER.size

RAW_DTYPE = 0


class MsgType(enum.IntEnum):
    HANDSHAKE = 1
    CHUNK = 2
    READY = 3
    PLAN = 4
    BYE = 5


@dataclass(frozen=True)
class Frame:
    msg_type: MsgType
    collective_id: int = 0
    phase_step: int = 0
    chunk_index: int = 0
    dtype_code: int = RAW_DTYPE
    payload: bytes = b""

    @property
    def payload_len(self) -> int:
        return len(self.payload)

    def header(self) -> bytes:
        return HEADER.pack(int(self.msg_type), self.collective_id, self.phase_step,
                           self.chunk_index, self.dtype_code, len(self.payload))


def encode_frame(frame: Frame) -> bytes:
    return frame.header() + bytes(frame.payload)


def decode_header(raw: bytes) -> tuple[MsgType, int, int, int, int, int]:
    msg_type, cid, step, chunk, dtype_code, plen = HEADER.unpack(raw)
    try:
        msg_type = MsgType(msg_type)
    except ValueError:
        raise ProtocolError(f"unknown msg_type {msg_type}") from None
    return msg_type, cid, step, chunk, dtype_code, plen


def decode_frames(data: bytes) -> list[Frame]:
    """Split a byte string holding back-to-back frames."""
    frames, pos = [], 0
    while pos < len(data):
        if len(data) - pos < HEADER_SIZE:
            raise ProtocolError("truncated frame header")
        msg_type, cid, step, chunk, dtype_code, plen = decode_header(data[pos:pos + HEADER_SIZE])
        pos += HEADER_SIZE
        if len(data) - pos < plen:
            raise ProtocolError(f"truncated payload: expected {plen} bytes, have {len(data) - pos}")
        frames.append(Frame(msg_type, cid, step, chunk, dtype_code, bytes(data[pos:pos + plen])))
        pos += plen
    return frames


@dataclass
class LinkStats:
    frames_sent: int = 0
    frames_received: int = 0
    payload_bytes_sent: int = 0
    payload_bytes_received: int = 0


@dataclass
class _Counters:
    total: LinkStats = field(default_factory=LinkStats)
    by_type: dict = field(default_factory=lambda: {t: LinkStats() for t in MsgType})


class Link:
    """One direction-agnostic TCP connection to a ring neighbour.

    Counters are kept per message type so tests can isolate CHUNK traffic
    from the control frames of the negotiation cycle.
    """

    def __init__(self, sock: socket.socket, peer_rank: int | None = None):
        self.sock = sock
        self.peer_rank = peer_rank
        self._counters = _Counters()
        self._lock = threading.Lock()
        self.closed = False
        try:
            sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        except OSError:
            pass

    def _bump(self, msg_type: MsgType, nbytes: int, sent: bool):
        with self._lock:
            for s in (self._counters.total, self._counters.by_type[msg_type]):
                if sent:
                    s.frames_sent += 1
                    s.payload_bytes_sent += nbytes
                else:
                    s.frames_received += 1
                    s.payload_bytes_received += nbytes

    def send_frame(self, frame: Frame) -> None:
        payload = frame.payload
        try:
            if len(payload) < 65536:
                self.sock.sendall(frame.header() + bytes(payload))
            else:
                self.sock.sendall(frame.header())
                self.sock.sendall(payload)
        except OSError as exc:
            raise TransportError(f"send to rank {self.peer_rank} failed: {exc}", self.peer_rank) from exc
        self._bump(frame.msg_type, len(payload), sent=True)

    def _recv_exact(self, n: int, into: memoryview | None = None, at_boundary: bool = False) -> memoryview:
        buf = into if into is not None else memoryview(bytearray(n))
        got = 0
        while got < n:
            try:
                k = self.sock.recv_into(buf[got:], n - got)
            except socket.timeout as exc:
                raise TransportError(f"timed out waiting for rank {self.peer_rank}", self.peer_rank) from exc
            except OSError as exc:
                raise TransportError(f"recv from rank {self.peer_rank} failed: {exc}", self.peer_rank) from exc
            if k == 0:
                if got == 0 and at_boundary:
                    raise TransportError(f"rank {self.peer_rank} closed the connection", self.peer_rank)
                raise ProtocolError(f"truncated stream from rank {self.peer_rank}: got {got} of {n} bytes")
            got += k
        return buf

    def recv_header(self) -> tuple[MsgType, int, int, int, int, int]:
        return decode_header(self._recv_exact(HEADER_SIZE, at_boundary=True).tobytes())

    def recv_payload_into(self, header, out: memoryview) -> None:
        """Read the payload announced by ``header`` straight into ``out``."""
        plen = header[5]
        if out.nbytes != plen:
            raise ProtocolError(f"payload length {plen} does not match expected {out.nbytes} bytes")
        if plen:
            self._recv_exact(plen, out)
        self._bump(header[0], plen, sent=False)

    def recv_frame(self) -> Frame:
        header = self.recv_header()
        msg_type, cid, step, chunk, dtype_code, plen = header
        payload = self._recv_exact(plen).tobytes() if plen else b""
        self._bump(msg_type, plen, sent=False)
        return Frame(msg_type, cid, step, chunk, dtype_code, payload)

    def snapshot_stats(self, msg_type: MsgType | None = None) -> LinkStats:
        with self._lock:
            src = self._counters.total if msg_type is None else self._counters.by_type[msg_type]
            return LinkStats(**vars(src))

    def reset_stats(self) -> None:
        with self._lock:
            self._counters = _Counters()

    def close(self) -> None:
        if self.closed:
            return
        self.closed = True
        try:
            self.sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self.sock.close()


def send_frame(link: Link, frame: Frame) -> None:
    link.send_frame(frame)


def recv_frame(link: Link) -> Frame:
    return link.recv_frame()


def snapshot_stats(link: Link, msg_type: MsgType | None = None) -> LinkStats:
    return link.snapshot_stats(msg_type)
