"""Flat typed buffers and the elementwise arithmetic used by reductions."""
from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .errors import ContractError, UnsupportedOperationError


class DType(enum.Enum):
    F32 = 1
    F64 = 2
    I32 = 3
    I64 = 4

    @property
    def code(self) -> int:
        """Wire dtype_code (RAW=0 is reserved for untyped payloads)."""
        return self.value

    @property
    def byte_width(self) -> int:
        return _WIDTHS[self]

    @property
    def numpy(self) -> np.dtype:
        return np.dtype(_NUMPY[self])

    @property
    def is_float(self) -> bool:
        return self in (DType.F32, DType.F64)

    @classmethod
    def from_code(cls, code: int) -> "DType":
        try:
            return cls(code)
        except ValueError:
            raise ContractError(f"unknown dtype code {code}") from None

    @classmethod
    def of(cls, array: np.ndarray) -> "DType":
        for dt, np_name in _NUMPY.items():
            if array.dtype == np.dtype(np_name):
                return dt
        raise UnsupportedOperationError(f"unsupported numpy dtype {array.dtype}")


_WIDTHS = {DType.F32: 4, DType.F64: 8, DType.I32: 4, DType.I64: 8}
_NUMPY = {DType.F32: "<f4", DType.F64: "<f8", DType.I32: "<i4", DType.I64: "<i8"}


@dataclass
class Tensor:
    """A named flat buffer; the unit the library reduces.

    ``data`` is always a 1-D contiguous numpy array. Collectives write their
    results back into it in place, so callers keep a reference and read it
    after the completion token resolves.
    """

    name: str
    data: np.ndarray

    def __post_init__(self):
        if not self.name:
            raise ContractError("tensor name must be non-empty")
        data = np.asarray(self.data)
        if data.ndim != 1:
            data = data.reshape(-1)
        if not data.flags.c_contiguous:
            data = np.ascontiguousarray(data)
        DType.of(data)  # validates the dtype
        self.data = data

    @classmethod
    def zeros(cls, name: str, length: int, dtype: DType) -> "Tensor":
        return cls(name, np.zeros(length, dtype=dtype.numpy))

    @property
    def dtype(self) -> DType:
        return DType.of(self.data)

    def __len__(self) -> int:
        return int(self.data.size)


def byte_size(t: Tensor) -> int:
    return len(t) * t.dtype.byte_width


def elementwise_add_into(dst: np.ndarray, src: np.ndarray, dtype: DType) -> None:
    """``dst += src`` for two equal-length slices of ``dtype``."""
    if dst.shape != src.shape:
        raise ContractError(f"length mismatch: dst has {dst.size} elements, src has {src.size}")
    if dst.dtype != dtype.numpy or src.dtype != dtype.numpy:
        raise ContractError(f"dtype mismatch: expected {dtype.name}, got {dst.dtype}/{src.dtype}")
    np.add(dst, src, out=dst)


def scale_in_place(t: Tensor | np.ndarray, factor: float) -> None:
    data = t.data if isinstance(t, Tensor) else t
    dtype = DType.of(data)
    if not dtype.is_float:
        raise UnsupportedOperationError(f"cannot scale integer tensor ({dtype.name}); averaging is float-only")
    if factor == 1.0:
        return
    np.multiply(data, data.dtype.type(factor), out=data)
