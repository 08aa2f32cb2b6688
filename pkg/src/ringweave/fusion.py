"""Negotiation, tensor fusion and the per-process progress loop.

Application threads only enqueue work. One background thread per process
owns both ring links and runs a cycle every ``cycle_ms``:

1. Rank 0 sends a READY frame listing its pending tensors; each rank keeps
   the entries it also has pending and forwards the survivors, so what
   returns to rank 0 is the set of globally ready tensors.
2. Rank 0 packs that list, in its own submission order, into fusion plans
   and forwards a PLAN frame around the ring.
3. Every rank executes the plans in collective-id order.

READY payload: ``count:u32`` then per tensor
``name_len:u16 | name | dtype_code:u8 | len:u64 | op_code:u8 | root:u32``.
PLAN payload: ``count:u32`` then per plan
``collective_id:u64 | dtype_code:u8 | op_code:u8 | root:u32 | members:u32``
followed by members ``name_len:u16 | name | offset:u64 | len:u64``.
The shutdown vote travels in the frame's ``phase_step`` field.
"""
from __future__ import annotations

import hashlib
import logging
import struct
import threading
import time
from concurrent.futures import Future
from dataclasses import dataclass, field

import numpy as np

from . import runtime
from .collectives import ReduceOp, ring_allreduce, ring_broadcast
from .errors import ContextClosedError, ProtocolError, RingweaveError, UnsupportedOperationError, UsageError
from .runtime import RingContext
from .tensor import DType, Tensor
from .timeline import Category, Timeline
from .transport import Frame, MsgType

log = logging.getLogger(__name__)

OP_SUM = 1
OP_AVERAGE = 2
OP_BROADCAST = 3
_OP_CODES = {ReduceOp.SUM: OP_SUM, ReduceOp.AVERAGE: OP_AVERAGE}
_REDUCE_OPS = {v: k for k, v in _OP_CODES.items()}

_U16 = struct.Struct("<H")
_U32 = struct.Struct("<I")
_READY_TAIL = struct.Struct("<BQBI")
_PLAN_HEAD = struct.Struct("<QBBII")
_MEMBER_TAIL = struct.Struct("<QQ")


@dataclass(frozen=True)
class TensorMeta:
    name: str
    dtype: DType
    length: int
    op_code: int
    root: int = 0

    @property
    def nbytes(self) -> int:
        return self.length * self.dtype.byte_width


@dataclass(frozen=True)
class FusionPlan:
    collective_id: int
    dtype: DType
    op_code: int
    tensor_names: tuple[str, ...]
    offsets: tuple[int, ...]
    lengths: tuple[int, ...]
    root: int = 0

    @property
    def total_elements(self) -> int:
        return sum(self.lengths)

    @property
    def nbytes(self) -> int:
        return self.total_elements * self.dtype.byte_width

    @property
    def is_broadcast(self) -> bool:
        return self.op_code == OP_BROADCAST

    @property
    def label(self) -> str:
        if len(self.tensor_names) == 1:
            return self.tensor_names[0]
        return f"fused.{self.collective_id}[{len(self.tensor_names)}]"


def _pack_name(name: str) -> bytes:
    raw = name.encode()
    return _U16.pack(len(raw)) + raw


def _unpack_name(data: bytes, pos: int) -> tuple[str, int]:
    (n,) = _U16.unpack_from(data, pos)
    pos += 2
    return bytes(data[pos:pos + n]).decode(), pos + n


def encode_ready(metas: list[TensorMeta]) -> bytes:
    parts = [_U32.pack(len(metas))]
    for m in metas:
        parts.append(_pack_name(m.name))
        parts.append(_READY_TAIL.pack(m.dtype.code, m.length, m.op_code, m.root))
    return b"".join(parts)


def decode_ready(data: bytes) -> list[TensorMeta]:
    try:
        (count,) = _U32.unpack_from(data, 0)
        pos, out = 4, []
        for _ in range(count):
            name, pos = _unpack_name(data, pos)
            code, length, op_code, root = _READY_TAIL.unpack_from(data, pos)
            pos += _READY_TAIL.size
            out.append(TensorMeta(name, DType.from_code(code), length, op_code, root))
    except (struct.error, UnicodeDecodeError, RingweaveError) as exc:
        raise ProtocolError(f"malformed READY payload: {exc}") from exc
    return out


def encode_plans(plans: list[FusionPlan]) -> bytes:
    parts = [_U32.pack(len(plans))]
    for p in plans:
        parts.append(_PLAN_HEAD.pack(p.collective_id, p.dtype.code, p.op_code, p.root, len(p.tensor_names)))
        for name, off, length in zip(p.tensor_names, p.offsets, p.lengths):
            parts.append(_pack_name(name))
            parts.append(_MEMBER_TAIL.pack(off, length))
    return b"".join(parts)


def decode_plans(data: bytes) -> list[FusionPlan]:
    try:
        (count,) = _U32.unpack_from(data, 0)
        pos, plans = 4, []
        for _ in range(count):
            cid, code, op_code, root, members = _PLAN_HEAD.unpack_from(data, pos)
            pos += _PLAN_HEAD.size
            names, offsets, lengths = [], [], []
            for _ in range(members):
                name, pos = _unpack_name(data, pos)
                off, length = _MEMBER_TAIL.unpack_from(data, pos)
                pos += _MEMBER_TAIL.size
                names.append(name)
                offsets.append(off)
                lengths.append(length)
            plans.append(FusionPlan(cid, DType.from_code(code), op_code, tuple(names),
                                    tuple(offsets), tuple(lengths), root))
    except (struct.error, UnicodeDecodeError, RingweaveError) as exc:
        raise ProtocolError(f"malformed PLAN payload: {exc}") from exc
    return plans


def intersect_ready(incoming: list[TensorMeta], local: dict[str, TensorMeta]) -> list[TensorMeta]:
    """Keep the incoming entries this rank also has pending, in incoming order."""
    out = []
    for meta in incoming:
        mine = local.get(meta.name)
        if mine is None:
            continue
        if mine != meta:
            raise ProtocolError(
                f"tensor {meta.name!r} submitted with mismatched metadata across ranks: "
                f"{meta.dtype.name}[{meta.length}] op={meta.op_code} root={meta.root} vs "
                f"{mine.dtype.name}[{mine.length}] op={mine.op_code} root={mine.root}")
        out.append(meta)
    return out


def build_plans(ready: list[TensorMeta], fusion_bytes: int, first_id: int) -> list[FusionPlan]:
    """Greedy first-fit packing of ``ready`` (already in execution order).

    A plan extends while the next tensor has the same dtype and op and still
    fits under ``fusion_bytes``; anything else starts a new plan. Broadcasts
    always get a plan of their own, and a tensor larger than the buffer ends
    up alone.
    """
    plans: list[FusionPlan] = []
    group: list[TensorMeta] = []

    def flush():
        if not group:
            return
        offsets, off = [], 0
        for m in group:
            offsets.append(off)
            off += m.length
        head = group[0]
        plans.append(FusionPlan(first_id + len(plans), head.dtype, head.op_code,
                                tuple(m.name for m in group), tuple(offsets),
                                tuple(m.length for m in group), head.root))
        group.clear()

    group_bytes = 0
    for meta in ready:
        if meta.op_code == OP_BROADCAST:
            flush()
            group.append(meta)
            flush()
            continue
        fits = (group and group[0].dtype == meta.dtype and group[0].op_code == meta.op_code
                and group_bytes + meta.nbytes <= fusion_bytes)
        if not fits:
            flush()
            group_bytes = 0
        group.append(meta)
        group_bytes += meta.nbytes
    flush()
    return plans


class FusionBuffer:
    """Reusable staging area; allocated on first use, never resized."""

    def __init__(self, capacity: int):
        self.capacity = capacity
        self.storage: np.ndarray | None = None
        self.allocations = 0

    def view(self, dtype: DType, length: int) -> np.ndarray:
        nbytes = length * dtype.byte_width
        if nbytes > self.capacity:
            raise UsageError(f"{nbytes} bytes do not fit the {self.capacity}-byte fusion buffer")
        if self.storage is None:
            self.storage = np.empty(self.capacity, dtype=np.uint8)
            self.allocations += 1
        return self.storage[:nbytes].view(dtype.numpy)


@dataclass
class PendingTensor:
    tensor: Tensor
    meta: TensorMeta
    completion: Future
    seq: int


@dataclass
class EngineStats:
    cycles: int = 0
    plans_executed: int = 0
    fused_plans: int = 0
    plan_log: list = field(default_factory=list)


class FusionEngine:
    """Background progress loop that owns ``ctx``'s links.

    ``fusion_bytes=0`` disables fusion: every tensor then runs as its own
    collective, reduced in place.
    """

    def __init__(self, ctx: RingContext, fusion_bytes: int | None = None, cycle_ms: float | None = None,
                 timeline: Timeline | None = None):
        self.ctx = ctx
        self.fusion_bytes = ctx.config.fusion_bytes if fusion_bytes is None else fusion_bytes
        self.cycle_s = (ctx.config.cycle_ms if cycle_ms is None else cycle_ms) / 1000.0
        self.timeline = timeline if timeline is not None else Timeline(ctx.config.timeline_path, pid=ctx.rank)
        self.buffer = FusionBuffer(self.fusion_bytes)
        self.stats = EngineStats()
        self._pending: dict[str, PendingTensor] = {}
        self._lock = threading.Lock()
        self._seq = 0
        self._next_cid = 1
        self._closing = False
        self._stopped = False
        self._error: BaseException | None = None
        self._wake = threading.Event()
        self._thread = threading.Thread(target=self._run, name=f"ringweave-progress-{ctx.rank}", daemon=True)
        self._thread.start()

    @property
    def plan_log(self) -> list[tuple[int, tuple[str, ...]]]:
        return self.stats.plan_log

    def plan_log_digest(self) -> str:
        h = hashlib.sha256()
        for cid, names in self.stats.plan_log:
            h.update(f"{cid}:{','.join(names)};".encode())
        return h.hexdigest()

    # -- submission (any thread) -------------------------------------------

    def _enqueue(self, items: list[tuple[Tensor, TensorMeta]]) -> list[Future]:
        with self._lock:
            if self._error is not None:
                raise ContextClosedError(f"engine failed: {self._error}") from self._error
            if self._closing or self._stopped:
                raise ContextClosedError("shutdown in progress")
            names = [t.name for t, _ in items]
            if len(set(names)) != len(names):
                raise UsageError("duplicate tensor names within one submission")
            for name in names:
                if name in self._pending:
                    raise UsageError(f"tensor {name!r} is already in flight")
            futures = []
            for tensor, meta in items:
                fut: Future = Future()
                fut.set_running_or_notify_cancel()
                self._pending[tensor.name] = PendingTensor(tensor, meta, fut, self._seq)
                self._seq += 1
                futures.append(fut)
        return futures

    @staticmethod
    def _reduce_meta(tensor: Tensor, op: ReduceOp) -> TensorMeta:
        if op is ReduceOp.AVERAGE and not tensor.dtype.is_float:
            raise UnsupportedOperationError(f"Average requires a float dtype, got {tensor.dtype.name}")
        return TensorMeta(tensor.name, tensor.dtype, len(tensor), _OP_CODES[op])

    def submit_allreduce(self, tensor: Tensor, op: ReduceOp = ReduceOp.SUM) -> Future:
        return self._enqueue([(tensor, self._reduce_meta(tensor, op))])[0]

    def submit_allreduce_batch(self, tensors: list[Tensor], op: ReduceOp = ReduceOp.SUM) -> list[Future]:
        """Submit several tensors atomically, so one cycle sees all or none."""
        return self._enqueue([(t, self._reduce_meta(t, op)) for t in tensors])

    def submit_broadcast(self, tensor: Tensor, root: int = 0) -> Future:
        if not 0 <= root < self.ctx.size:
            raise UsageError(f"root rank {root} outside [0, {self.ctx.size})")
        return self._enqueue([(tensor, TensorMeta(tensor.name, tensor.dtype, len(tensor), OP_BROADCAST, root))])[0]

    # -- progress loop -------------------------------------------------------

    def _snapshot(self) -> tuple[list[TensorMeta], bool]:
        with self._lock:
            entries = sorted(self._pending.values(), key=lambda p: (p.seq, p.tensor.name))
            return [p.meta for p in entries], self._closing

    def _negotiate(self) -> tuple[list[FusionPlan], bool, int]:
        ctx = self.ctx
        n, r = ctx.size, ctx.rank
        if r == 0:
            if self._wake.wait(self._next_tick - time.monotonic()):
                self._wake.clear()
            self._next_tick = time.monotonic() + self.cycle_s
            t0 = self.timeline.now_us()
            metas, closing = self._snapshot()
            if n > 1:
                ctx.send_link.send_frame(Frame(MsgType.READY, phase_step=int(closing), payload=encode_ready(metas)))
                frame = self._expect(MsgType.READY)
                ready = intersect_ready(decode_ready(frame.payload), {m.name: m for m in metas})
                closing = closing and bool(frame.phase_step)
            else:
                ready = metas
            plans = build_plans(ready, self.fusion_bytes, self._next_cid)
            self._next_cid += len(plans)
            if n > 1:
                ctx.send_link.send_frame(Frame(MsgType.PLAN, phase_step=int(closing), payload=encode_plans(plans)))
            return plans, closing, t0

        frame = self._expect(MsgType.READY)
        t0 = self.timeline.now_us()
        metas, closing = self._snapshot()
        ready = intersect_ready(decode_ready(frame.payload), {m.name: m for m in metas})
        closing = closing and bool(frame.phase_step)
        ctx.send_link.send_frame(Frame(MsgType.READY, phase_step=int(closing), payload=encode_ready(ready)))
        frame = self._expect(MsgType.PLAN)
        if r != n - 1:
            ctx.send_link.send_frame(frame)
        return decode_plans(frame.payload), bool(frame.phase_step), t0

    def _expect(self, msg_type: MsgType) -> Frame:
        frame = self.ctx.recv_link.recv_frame()
        if frame.msg_type != msg_type:
            raise ProtocolError(f"expected {msg_type.name} from rank {self.ctx.predecessor}, "
                                f"got {frame.msg_type.name}")
        return frame

    def _run(self) -> None:
        self._next_tick = time.monotonic()
        try:
            while True:
                plans, closing, t0 = self._negotiate()
                self.stats.cycles += 1
                if plans:
                    self.timeline.begin("negotiate", Category.NEGOTIATE, t0)
                    self.timeline.end("negotiate", Category.NEGOTIATE)
                for plan in plans:
                    self.execute_plan(plan)
                if closing:
                    break
        except BaseException as exc:  # noqa: BLE001 - every failure must reach the waiters
            self._fail(exc)
            return
        self._finish()

    def _take(self, name: str) -> PendingTensor:
        with self._lock:
            try:
                return self._pending.pop(name)
            except KeyError:
                raise ProtocolError(f"plan names tensor {name!r} which is not pending on rank {self.ctx.rank}") from None

    def execute_plan(self, plan: FusionPlan) -> None:
        entries = [self._take(name) for name in plan.tensor_names]
        for entry, length in zip(entries, plan.lengths):
            if len(entry.tensor) != length or entry.tensor.dtype != plan.dtype:
                raise ProtocolError(f"plan disagrees with local tensor {entry.tensor.name!r}")
        try:
            self._execute(plan, entries)
        except BaseException as exc:
            for e in entries:
                if not e.completion.done():
                    e.completion.set_exception(exc)
            raise
        self.stats.plans_executed += 1
        if len(entries) > 1:
            self.stats.fused_plans += 1
        self.stats.plan_log.append((plan.collective_id, plan.tensor_names))
        for e in entries:
            e.completion.set_result(e.tensor)

    def _execute(self, plan: FusionPlan, entries: list[PendingTensor]) -> None:
        ctx, tl, label = self.ctx, self.timeline, plan.label
        if plan.is_broadcast:
            data = entries[0].tensor.data
            with tl.span(label, Category.BROADCAST), tl.span(label, Category.COMMUNICATE):
                ring_broadcast(ctx, data, plan.dtype, plan.root, plan.collective_id)
            return
        op = _REDUCE_OPS[plan.op_code]
        if len(entries) == 1 and plan.nbytes > self.buffer.capacity:
            with tl.span(label, Category.COMMUNICATE):
                ring_allreduce(ctx, entries[0].tensor.data, plan.dtype, op, plan.collective_id)
            return
        fused = self.buffer.view(plan.dtype, plan.total_elements)
        with tl.span(label, Category.MEMCPY_IN_FUSION_BUFFER):
            for e, off, length in zip(entries, plan.offsets, plan.lengths):
                fused[off:off + length] = e.tensor.data
        with tl.span(label, Category.COMMUNICATE):
            ring_allreduce(ctx, fused, plan.dtype, op, plan.collective_id)
        with tl.span(label, Category.MEMCPY_OUT_FUSION_BUFFER):
            for e, off, length in zip(entries, plan.offsets, plan.lengths):
                e.tensor.data[:] = fused[off:off + length]

    def _drain(self, exc: BaseException) -> None:
        with self._lock:
            self._stopped = True
            leftovers = list(self._pending.values())
            self._pending.clear()
        for p in leftovers:
            if not p.completion.done():
                p.completion.set_exception(exc)

    def _fail(self, exc: BaseException) -> None:
        log.error("rank %d: progress loop failed: %s", self.ctx.rank, exc)
        with self._lock:
            self._error = exc
        self._drain(exc)
        # Closing the sockets makes the failure visible to the neighbours.
        self.ctx.closed = True
        self.ctx.send_link.close()
        self.ctx.recv_link.close()
        self.ctx.sender.shutdown(wait=False)

    def _finish(self) -> None:
        self._drain(ContextClosedError("engine shut down before the tensor became ready on all ranks"))
        runtime.shutdown(self.ctx)

    # -- shutdown (application thread) ---------------------------------------

    def shutdown(self, timeout: float | None = None) -> None:
        """Stop the loop once every rank has asked to stop, then close the ring."""
        with self._lock:
            self._closing = True
        self._wake.set()
        self._thread.join(timeout)
        self.timeline.flush()
        if self._error is not None and not isinstance(self._error, ContextClosedError):
            raise self._error

    @property
    def error(self) -> BaseException | None:
        return self._error


def submit_allreduce(engine: FusionEngine, tensor: Tensor, op: ReduceOp = ReduceOp.SUM) -> Future:
    return engine.submit_allreduce(tensor, op)


def submit_broadcast(engine: FusionEngine, tensor: Tensor, root: int = 0) -> Future:
    return engine.submit_broadcast(tensor, root)
