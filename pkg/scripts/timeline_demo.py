"""Produce a trace to open in chrome://tracing or ui.perfetto.dev:

    ringrun -np 4 --timeline /tmp/trace -- python scripts/timeline_demo.py

The merged file lands in /tmp/trace/timeline.json.
"""
import time

import numpy as np

import ringweave as rw
from ringweave.collectives import ReduceOp
from ringweave.tensor import Tensor

comm = rw.init()
comm.broadcast(np.zeros(1 << 16), root_rank=0, name="params")
for step in range(10):
    time.sleep(0.01)  # stand-in for the backward pass
    grads = [Tensor(f"layer{i}/grad", np.random.standard_normal(2048).astype(np.float32)) for i in range(40)]
    grads.append(Tensor("embedding/grad", np.ones(4 << 20, dtype=np.float32)))
    for fut in comm.engine.submit_allreduce_batch(grads, ReduceOp.AVERAGE):
        fut.result()
comm.shutdown()
