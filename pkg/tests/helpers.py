"""Shared pieces for multi-process tests: deterministic inputs and the oracle check."""
import hashlib

import numpy as np

from ringweave.collectives import ReduceOp
from ringweave.tensor import DType
from ringweave.train_bench import central_reduce_oracle

REL_TOL = {DType.F32: 1e-5, DType.F64: 1e-12}


def make_inputs(seed: int, n: int, length: int, dtype: DType) -> list[np.ndarray]:
    """Every rank regenerates all n inputs from the shared seed and keeps its own."""
    rng = np.random.default_rng(seed)
    if dtype.is_float:
        return [rng.standard_normal(length).astype(dtype.numpy) for _ in range(n)]
    return [rng.integers(-1000, 1000, size=length).astype(dtype.numpy) for _ in range(n)]


def expected(inputs, op: ReduceOp) -> np.ndarray:
    total = central_reduce_oracle(inputs)
    return total / len(inputs) if op is ReduceOp.AVERAGE else total


def check_against_oracle(out: np.ndarray, inputs, dtype: DType, op: ReduceOp) -> str | None:
    """None if ``out`` matches the oracle, otherwise a description of the miss.

    Floats are held to a relative bound scaled by the summed magnitudes,
    so near-cancelling sums of signed inputs are judged fairly.
    """
    ref = expected(inputs, op)
    if not dtype.is_float:
        if not np.array_equal(out, ref):
            return f"integer mismatch at {np.flatnonzero(out != ref)[:5]}"
        return None
    scale = expected([np.abs(a) for a in inputs], op)
    err = np.abs(out.astype(np.float64) - ref)
    bad = err > REL_TOL[dtype] * scale
    if bad.any():
        i = int(np.flatnonzero(bad)[0])
        return f"float mismatch at {i}: got {out[i]!r}, oracle {ref[i]!r}, rel {err[i] / scale[i]:.3g}"
    return None


def digest(arr: np.ndarray) -> str:
    return hashlib.sha256(arr.tobytes()).hexdigest()
