"""ringweave: ring-allreduce collectives over TCP.

Typical worker, launched with ``ringrun -np 4 -- python train.py``::

    import ringweave as rw
    rw.init()
    params = rw.broadcast(params, root_rank=0, name="params")
    grads = rw.allreduce(grads, name="grads")      # averaged across ranks
    rw.shutdown()
"""
from __future__ import annotations

import itertools
from typing import Mapping

import numpy as np

from . import runtime
from .collectives import ReduceOp, make_partition, ring_allreduce, ring_broadcast
from .errors import (ConfigurationError, ContextClosedError, ProtocolError, RendezvousError, RingweaveError,
                     TransportError, UsageError)
from .fusion import FusionEngine
from .runtime import RingContext
from .tensor import DType, Tensor
from .timeline import Timeline

__version__ = "0.1.0"


class Communicator:
    """A live process handle: ring context plus its progress loop."""

    def __init__(self, ctx: RingContext, **engine_kwargs):
        self.ctx = ctx
        self.engine = FusionEngine(ctx, **engine_kwargs)
        self._auto = itertools.count()

    def rank(self) -> int:
        return self.ctx.rank

    def size(self) -> int:
        return self.ctx.size

    def local_rank(self) -> int:
        return self.ctx.local_rank

    def _tensor(self, array, name, kind) -> Tensor:
        data = np.array(array, copy=True).reshape(-1)
        return Tensor(name or f"{kind}.{next(self._auto)}", data)

    def allreduce(self, array, name: str | None = None, op: ReduceOp = ReduceOp.AVERAGE) -> np.ndarray:
        """Return the reduction of ``array`` over all ranks (input untouched)."""
        shape = np.shape(array)
        t = self._tensor(array, name, "allreduce")
        return self.engine.submit_allreduce(t, op).result().data.reshape(shape)

    def broadcast(self, array, root_rank: int = 0, name: str | None = None) -> np.ndarray:
        shape = np.shape(array)
        t = self._tensor(array, name, "broadcast")
        return self.engine.submit_broadcast(t, root_rank).result().data.reshape(shape)

    def shutdown(self) -> None:
        self.engine.shutdown()


_current: Communicator | None = None


def init(env: Mapping[str, str] | None = None, **engine_kwargs) -> Communicator:
    global _current
    if _current is not None and not _current.ctx.closed:
        return _current
    _current = Communicator(runtime.init(env), **engine_kwargs)
    return _current


def _require() -> Communicator:
    if _current is None:
        raise UsageError("ringweave.init() has not been called")
    return _current


def rank() -> int:
    return _require().rank()


def size() -> int:
    return _require().size()


def local_rank() -> int:
    return _require().local_rank()


def allreduce(array, name: str | None = None, op: ReduceOp = ReduceOp.AVERAGE) -> np.ndarray:
    return _require().allreduce(array, name, op)


def broadcast(array, root_rank: int = 0, name: str | None = None) -> np.ndarray:
    return _require().broadcast(array, root_rank, name)


def shutdown() -> None:
    global _current
    if _current is not None:
        _current.shutdown()
        _current = None


__all__ = [
    "Communicator", "ConfigurationError", "ContextClosedError", "DType", "FusionEngine", "ProtocolError",
    "ReduceOp", "RendezvousError", "RingContext", "RingweaveError", "Tensor", "Timeline", "TransportError",
    "UsageError", "allreduce", "broadcast", "init", "local_rank", "make_partition", "rank",
    "ring_allreduce", "ring_broadcast", "shutdown", "size",
]
