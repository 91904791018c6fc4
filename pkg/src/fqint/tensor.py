"""Integer tensor containers and exact integer primitives.

Every integer kernel in the package is built from the primitives here. They
operate on int64 numpy arrays, refuse floating-point operands, and detect
overflow instead of wrapping. When an arithmetic trace is active (see
:func:`arithmetic_trace`) each primitive call is recorded, which is how the
integer-only audit of the attention block is carried out.
"""
from __future__ import annotations

import contextlib
import contextvars
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from .errors import ArithmeticOverflow, ContractViolation, DimensionError

INT64_MAX = np.iinfo(np.int64).max
ACC_BITS = 64


def code_range(bit_width: int, signed: bool) -> tuple[int, int]:
    if signed:
        return -(1 << (bit_width - 1)), (1 << (bit_width - 1)) - 1
    return 0, (1 << bit_width) - 1


@dataclass(frozen=True)
class IntTensor:
    """Dense row-major integer tensor with a declared bit width.

    ``signed`` selects two's-complement range ``[-2^(b-1), 2^(b-1)-1]``;
    unsigned tensors hold ``[0, 2^b - 1]``.
    """

    data: np.ndarray
    bit_width: int
    signed: bool = True

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.dtype.kind not in "iub":
            raise ContractViolation(f"IntTensor requires integer data, got {data.dtype}")
        if not 1 <= self.bit_width <= ACC_BITS:
            raise ContractViolation(f"bit_width {self.bit_width} outside 1..64")
        data = data.astype(np.int64, copy=False)
        if data.size:
            lo, hi = code_range(self.bit_width, self.signed)
            if data.min() < lo or data.max() > hi:
                raise ArithmeticOverflow(
                    f"values [{data.min()}, {data.max()}] do not fit "
                    f"{'signed' if self.signed else 'unsigned'} {self.bit_width}-bit"
                )
        data = np.ascontiguousarray(data)
        data.setflags(write=False)
        object.__setattr__(self, "data", data)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def __len__(self) -> int:
        return len(self.data)

    def to_list(self):
        return self.data.tolist()


@dataclass(frozen=True)
class ScaledInt:
    """Integer payload with a real scale: ``value = scale * (codes - zero_point)``."""

    codes: IntTensor
    scale: float
    zero_point: int = 0

    def __post_init__(self):
        if not (np.isfinite(self.scale) and self.scale > 0):
            raise ContractViolation(f"scale must be positive and finite, got {self.scale}")

    def dequantize(self) -> np.ndarray:
        return self.scale * (self.codes.data - self.zero_point).astype(np.float64)


def as_float_tensor(x) -> np.ndarray:
    """Validate and convert to a float64 array; NaN and Inf are rejected."""
    arr = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise ContractViolation("float tensor contains NaN or Inf")
    return arr


def int_data(x) -> np.ndarray:
    """Raw int64 view of an IntTensor, or of an integer array-like."""
    if isinstance(x, IntTensor):
        return x.data
    arr = np.asarray(x)
    if arr.dtype.kind not in "iub":
        raise ContractViolation(f"expected integer operand, got {arr.dtype}")
    return arr.astype(np.int64, copy=False)


def bits_needed(x: np.ndarray) -> int:
    """Smallest signed width holding every element of ``x``."""
    if x.size == 0:
        return 2
    m = max(int(x.max()), -int(x.min()) - 1, 0)
    return max(2, m.bit_length() + 1)


# -- arithmetic trace ---------------------------------------------------------

@dataclass
class TraceEvent:
    op: str
    dtypes: tuple[str, ...]

    @property
    def is_integer(self) -> bool:
        return all(np.dtype(d).kind in "iub" for d in self.dtypes)


@dataclass
class ArithmeticTrace:
    events: list[TraceEvent] = field(default_factory=list)

    def record(self, op: str, *operands) -> None:
        self.events.append(TraceEvent(op, tuple(str(np.asarray(a).dtype) for a in operands)))

    @property
    def float_events(self) -> list[TraceEvent]:
        return [e for e in self.events if not e.is_integer]

    def assert_integer_only(self) -> None:
        bad = self.float_events
        if bad:
            ops = ", ".join(sorted({e.op for e in bad}))
            raise AssertionError(f"{len(bad)} floating-point operations in traced region: {ops}")


_active_trace: contextvars.ContextVar[ArithmeticTrace | None] = contextvars.ContextVar(
    "fqint_trace", default=None
)


@contextlib.contextmanager
def arithmetic_trace() -> Iterator[ArithmeticTrace]:
    """Record every primitive executed inside the block."""
    trace = ArithmeticTrace()
    token = _active_trace.set(trace)
    try:
        yield trace
    finally:
        _active_trace.reset(token)


def record(op: str, *operands) -> None:
    trace = _active_trace.get()
    if trace is not None:
        trace.record(op, *operands)


def _require_int(op: str, *operands) -> None:
    record(op, *operands)
    for a in operands:
        if np.asarray(a).dtype.kind not in "iub":
            raise ContractViolation(f"{op}: floating operand in integer kernel")


def _check_bound(op: str, bound: int) -> None:
    if bound > INT64_MAX:
        raise ArithmeticOverflow(f"{op}: worst-case magnitude {bound} exceeds int64")


def _absmax(x: np.ndarray) -> int:
    return int(np.abs(x).max()) if x.size else 0


# -- primitives ---------------------------------------------------------------

def widen_matmul(a, b) -> IntTensor:
    """Exact integer matrix product accumulated in int64.

    Supports batched operands with numpy ``matmul`` broadcasting. Operand codes
    must fit in 16 bits; the worst-case accumulator magnitude is checked before
    the product is formed.
    """
    x, y = int_data(a), int_data(b)
    _require_int("matmul", x, y)
    if x.ndim < 2 or y.ndim < 2 or x.shape[-1] != y.shape[-2]:
        raise DimensionError(f"matmul shapes {x.shape} x {y.shape} do not align")
    if bits_needed(x) > 17 or bits_needed(y) > 17:
        raise ContractViolation("widen_matmul operands must fit in 16 bits")
    _check_bound("matmul", _absmax(x) * _absmax(y) * x.shape[-1])
    return IntTensor(np.matmul(x, y), ACC_BITS)


def shift_left(x, k) -> IntTensor:
    """Multiply by ``2**k`` exactly; ``k`` is a scalar or broadcastable array."""
    v, kk = int_data(x), int_data(k)
    _require_int("shift_left", v, kk)
    if kk.size and kk.min() < 0:
        raise ContractViolation("shift amount must be non-negative")
    if v.size and kk.size:
        kmax = int(kk.max())
        if kmax >= 63 or (_absmax(v) << kmax) > INT64_MAX:
            raise ArithmeticOverflow("shift_left overflows int64")
    return IntTensor(np.left_shift(v, kk), ACC_BITS)


def round_half_even_shift(x, k) -> np.ndarray:
    """``round(x / 2**k)`` with ties to even; negative ``k`` shifts left."""
    v, kk = int_data(x), int_data(k)
    _require_int("round_shift", v, kk)
    kk = np.broadcast_to(kk, np.broadcast_shapes(v.shape, kk.shape))
    v = np.broadcast_to(v, kk.shape)
    if (kk < 0).any():
        neg = np.maximum(-kk, 0)
        if v.size and (_absmax(v) << int(neg.max())) > INT64_MAX:
            raise ArithmeticOverflow("round_shift left-shift overflows int64")
    pos = np.clip(kk, 0, 62)
    q = np.right_shift(v, pos)
    r = v - np.left_shift(q, pos)
    half = np.where(pos > 0, np.left_shift(np.int64(1), np.maximum(pos - 1, 0)), 0)
    up = (pos > 0) & ((r > half) | ((r == half) & (q & 1 == 1)))
    out = q + up
    return np.where(kk < 0, np.left_shift(v, np.maximum(-kk, 0)), out)


def div_round_half_even(num, den) -> np.ndarray:
    """Integer ``round(num / den)`` with ties to even, for ``den > 0``."""
    n, d = int_data(num), int_data(den)
    _require_int("div_round", n, d)
    if d.size and d.min() <= 0:
        raise ContractViolation("divisor must be positive")
    q, r = np.divmod(n, d)
    twice = 2 * r
    up = (twice > d) | ((twice == d) & (q & 1 == 1))
    return q + up


def clip_codes(x, lo: int, hi: int) -> np.ndarray:
    v = int_data(x)
    _require_int("clip", v)
    return np.clip(v, lo, hi)


def int_add(a, b) -> np.ndarray:
    x, y = int_data(a), int_data(b)
    _require_int("add", x, y)
    _check_bound("add", _absmax(x) + _absmax(y))
    return x + y


def int_sub(a, b) -> np.ndarray:
    x, y = int_data(a), int_data(b)
    _require_int("sub", x, y)
    _check_bound("sub", _absmax(x) + _absmax(y))
    return x - y


def int_mul(a, b) -> np.ndarray:
    x, y = int_data(a), int_data(b)
    _require_int("mul", x, y)
    _check_bound("mul", _absmax(x) * _absmax(y))
    return x * y


def int_sum(x, axis=-1, keepdims=False) -> np.ndarray:
    v = int_data(x)
    _require_int("sum", v)
    n = v.shape[axis] if v.ndim else 1
    _check_bound("sum", _absmax(v) * n)
    return v.sum(axis=axis, keepdims=keepdims)


def int_max(x, axis=-1, keepdims=False) -> np.ndarray:
    v = int_data(x)
    _require_int("max", v)
    return v.max(axis=axis, keepdims=keepdims)
