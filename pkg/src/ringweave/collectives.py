"""Ring allreduce and pipelined ring broadcast over the two neighbour links.

Chunk schedule for rank ``r`` in a ring of ``n``:

* scatter-reduce step ``s``: send chunk ``(r - s) % n``, receive and add
  chunk ``(r - s - 1) % n``; afterwards ``r`` owns reduced chunk ``(r + 1) % n``.
* allgather step ``s``: send chunk ``(r + 1 - s) % n``, receive and overwrite
  chunk ``(r - s) % n``.

Each step's send runs on the context's sender thread while this thread
receives, so a ring of any size never stalls on full socket buffers.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .errors import ContractError, ProtocolError, UnsupportedOperationError
from .runtime import RingContext
from .tensor import DType, elementwise_add_into, scale_in_place
from .transport import Frame, MsgType


class ReduceOp(enum.Enum):
    SUM = 1
    AVERAGE = 2


@dataclass(frozen=True)
class ChunkPartition:
    total_len: int
    n: int
    boundaries: tuple[int, ...]

    def bounds(self, chunk: int) -> tuple[int, int]:
        return self.boundaries[chunk], self.boundaries[chunk + 1]

    def sizes(self) -> list[int]:
        return [b - a for a, b in zip(self.boundaries, self.boundaries[1:])]


def make_partition(total_len: int, n: int) -> ChunkPartition:
    if n < 1:
        raise ContractError(f"ring size must be >= 1, got {n}")
    if total_len < 0:
        raise ContractError(f"length must be >= 0, got {total_len}")
    base, extra = divmod(total_len, n)
    boundaries = [0]
    for c in range(n):
        boundaries.append(boundaries[-1] + base + (1 if c < extra else 0))
    return ChunkPartition(total_len, n, tuple(boundaries))


def _check_buffer(buf: np.ndarray, dtype: DType | None) -> DType:
    actual = DType.of(buf)
    if dtype is not None and dtype != actual:
        raise ContractError(f"buffer holds {actual.name}, caller declared {dtype.name}")
    if buf.ndim != 1 or not buf.flags.c_contiguous:
        raise ContractError("collective buffers must be flat and contiguous")
    return actual


def _bytes(view: np.ndarray) -> memoryview:
    return memoryview(view).cast("B")


def _expect_chunk(header, collective_id: int, step: int, chunk: int, dtype: DType, nbytes: int, peer: int):
    msg_type, cid, got_step, got_chunk, dtype_code, plen = header
    if msg_type != MsgType.CHUNK:
        raise ProtocolError(f"expected CHUNK from rank {peer}, got {msg_type.name}")
    if cid != collective_id:
        raise ProtocolError(f"rank {peer} is running collective {cid}, this rank expects {collective_id}")
    if got_step != step or got_chunk != chunk:
        raise ProtocolError(f"out-of-order chunk from rank {peer}: step {got_step} chunk {got_chunk}, "
                            f"expected step {step} chunk {chunk}")
    if dtype_code != dtype.code:
        raise ProtocolError(f"dtype disagreement with rank {peer}: code {dtype_code} vs {dtype.code}")
    if plen != nbytes:
        raise ProtocolError(f"length disagreement with rank {peer}: {plen} bytes vs {nbytes} expected")


def ring_allreduce(ctx: RingContext, buf: np.ndarray, dtype: DType | None = None,
                   op: ReduceOp = ReduceOp.SUM, collective_id: int | None = None) -> None:
    """Reduce ``buf`` in place across every rank of the ring.

    All ranks must call this with the same collective id, dtype, length and
    op. On return every rank holds bitwise-identical results.
    """
    ctx.check_open()
    dtype = _check_buffer(buf, dtype)
    if op is ReduceOp.AVERAGE and not dtype.is_float:
        raise UnsupportedOperationError(f"Average requires a float dtype, got {dtype.name}")
    if collective_id is None:
        collective_id = ctx.next_collective_id()
    n, r = ctx.size, ctx.rank
    if n == 1:
        return
    part = make_partition(buf.size, n)
    width = dtype.byte_width
    scratch = np.empty(max(part.sizes()), dtype=dtype.numpy)
    send_link, recv_link = ctx.send_link, ctx.recv_link
    pred = ctx.predecessor

    for s in range(n - 1):
        sa, sb = part.bounds((r - s) % n)
        recv_chunk = (r - s - 1) % n
        ra, rb = part.bounds(recv_chunk)
        pending = ctx.sender.submit(send_link.send_frame, Frame(
            MsgType.CHUNK, collective_id, s, (r - s) % n, dtype.code, _bytes(buf[sa:sb])))
        header = recv_link.recv_header()
        _expect_chunk(header, collective_id, s, recv_chunk, dtype, (rb - ra) * width, pred)
        incoming = scratch[:rb - ra]
        recv_link.recv_payload_into(header, _bytes(incoming))
        elementwise_add_into(buf[ra:rb], incoming, dtype)
        pending.result()

    for s in range(n - 1):
        step = n - 1 + s
        send_chunk = (r + 1 - s) % n
        recv_chunk = (r - s) % n
        sa, sb = part.bounds(send_chunk)
        ra, rb = part.bounds(recv_chunk)
        pending = ctx.sender.submit(send_link.send_frame, Frame(
            MsgType.CHUNK, collective_id, step, send_chunk, dtype.code, _bytes(buf[sa:sb])))
        header = recv_link.recv_header()
        _expect_chunk(header, collective_id, step, recv_chunk, dtype, (rb - ra) * width, pred)
        recv_link.recv_payload_into(header, _bytes(buf[ra:rb]))
        pending.result()

    if op is ReduceOp.AVERAGE:
        scale_in_place(buf, 1.0 / n)


def ring_broadcast(ctx: RingContext, buf: np.ndarray, dtype: DType | None = None,
                   root_rank: int = 0, collective_id: int | None = None) -> None:
    """Copy root's ``buf`` to every rank by forwarding chunks around the ring.

    The buffer is cut into ``n`` chunks so downstream ranks start forwarding
    before the root has finished sending. The rank just before the root
    only receives.
    """
    ctx.check_open()
    dtype = _check_buffer(buf, dtype)
    n, r = ctx.size, ctx.rank
    if not 0 <= root_rank < n:
        raise ContractError(f"root rank {root_rank} outside [0, {n})")
    if collective_id is None:
        collective_id = ctx.next_collective_id()
    if n == 1:
        return
    part = make_partition(buf.size, n)
    width = dtype.byte_width
    distance = (r - root_rank) % n
    forwards = distance != n - 1
    pending = []
    for c in range(n):
        a, b = part.bounds(c)
        if distance != 0:
            header = ctx.recv_link.recv_header()
            _expect_chunk(header, collective_id, c, c, dtype, (b - a) * width, ctx.predecessor)
            ctx.recv_link.recv_payload_into(header, _bytes(buf[a:b]))
        if forwards:
            pending.append(ctx.sender.submit(ctx.send_link.send_frame, Frame(
                MsgType.CHUNK, collective_id, c, c, dtype.code, _bytes(buf[a:b]))))
    for p in pending:
        p.result()
