"""Integer-only Softmax with log2-coded attention output.

The exponential is decomposed as ``exp(x) = 2**-z * exp(p)`` with
``p in (-ln2, 0]`` and ``exp(p)`` replaced by a quadratic evaluated on integer
codes. The row is then inverted (``sum / exp``), coded by an integer log2 that
needs only the position of the leading one bit and the bit after it, and the
attention-times-value product becomes a left shift.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ArithmeticOverflow, CalibrationError, ContractViolation, DimensionError
from .quantizers import QuantParams
from .tensor import (
    INT64_MAX,
    IntTensor,
    ScaledInt,
    as_float_tensor,
    clip_codes,
    div_round_half_even,
    int_add,
    int_data,
    int_max,
    int_mul,
    int_sub,
    int_sum,
    record,
    round_half_even_shift,
    shift_left,
)

DEFAULT_ATTN_BITS = 4


@dataclass(frozen=True)
class IExpConstants:
    a: float = 0.3585
    b_poly: float = 1.353
    c: float = 0.344
    n: int = 30

    def poly(self, p):
        return self.a * (p + self.b_poly) ** 2 + self.c


@dataclass(frozen=True)
class IExpKernel:
    """i-exp constants folded for one input scale; evaluation is integer only."""

    q_ln2: int
    q_b: int
    q_c: int
    n: int
    out_scale: float

    @classmethod
    def fold(cls, s: float, consts: IExpConstants = IExpConstants()) -> "IExpKernel":
        if not s > 0:
            raise ContractViolation("input scale must be positive")
        q_ln2 = math.floor(-math.log(2) / s)
        if q_ln2 == 0:
            raise CalibrationError(f"scale {s} too coarse: ln2/s rounds to zero")
        q_b = math.floor(consts.b_poly / s)
        q_c = math.floor(consts.c / (consts.a * s * s))
        # the scale is metadata; flooring a*s^2 as written would zero it
        return cls(q_ln2, q_b, q_c, consts.n, consts.a * s * s / 2**consts.n)

    @property
    def peak(self) -> int:
        """Largest possible output code (at input 0, where ``q_p = 0``)."""
        return (self.q_b * self.q_b + self.q_c) << self.n

    def __call__(self, q) -> np.ndarray:
        v = int_data(q)
        record("i_exp", v)
        if v.size and v.max() > 0:
            raise ContractViolation("i_exp inputs must be non-positive")
        if self.peak > INT64_MAX:
            raise ArithmeticOverflow("i_exp output exceeds int64; reduce n or coarsen the scale")
        v = np.maximum(v, self.n * self.q_ln2)
        z = v // self.q_ln2            # both non-positive, so floor == trunc and z >= 0
        q_p = int_sub(v, int_mul(z, np.int64(self.q_ln2)))
        t = int_add(q_p, np.int64(self.q_b))
        q_l = int_add(int_mul(t, t), np.int64(self.q_c))
        return shift_left(q_l, self.n - z).data


def i_exp(q, s: float, consts: IExpConstants = IExpConstants()) -> ScaledInt:
    kernel = IExpKernel.fold(s, consts)
    out = kernel(q)
    return ScaledInt(IntTensor(out, 64), kernel.out_scale)


def i_log2(q) -> np.ndarray | int:
    """Integer log2: index of the leading one plus the bit right after it."""
    scalar = np.isscalar(q) or isinstance(q, int)
    v = int_data(np.atleast_1d(q))
    record("i_log2", v)
    if v.size and v.min() < 1:
        raise ContractViolation("i_log2 needs q >= 1")
    msb = np.zeros_like(v)
    t = v.copy()
    for s in (32, 16, 8, 4, 2, 1):
        big = t >= (np.int64(1) << s)
        msb += s * big
        t = np.where(big, t >> s, t)
    chi = np.where(msb > 0, (v >> np.maximum(msb - 1, 0)) & 1, 0)
    out = msb + chi
    return int(out[0]) if scalar else out


@dataclass(frozen=True)
class LogAttnCodes:
    """Log2-coded attention: stored code ``N - Attn_Q``, value ``2**code / 2**N``."""

    codes: IntTensor
    bit_width: int = DEFAULT_ATTN_BITS

    @property
    def N(self) -> int:
        return (1 << self.bit_width) - 1

    @property
    def exponents(self) -> np.ndarray:
        """``Attn_Q``: the attention value is ``2**-Attn_Q``."""
        return self.N - self.codes.data

    @property
    def scale(self) -> float:
        return 2.0 ** -self.N

    def dequantize(self) -> np.ndarray:
        return np.exp2(-self.exponents.astype(np.float64))

    @classmethod
    def from_exponents(cls, attn_q, bit_width: int = DEFAULT_ATTN_BITS) -> "LogAttnCodes":
        N = (1 << bit_width) - 1
        e = int_data(attn_q)
        if e.size and (e.min() < 0 or e.max() > N):
            raise ContractViolation(f"exponents must lie in [0, {N}]")
        return cls(IntTensor(N - e, bit_width, signed=False), bit_width)


@dataclass(frozen=True)
class LogIntSoftmax:
    """Log-Int-Softmax folded for one input scale."""

    kernel: IExpKernel
    bit_width: int = DEFAULT_ATTN_BITS
    pre_shift: int = 0      # logits are rounded onto a grid 2**pre_shift coarser first

    @classmethod
    def fold(cls, s: float, bit_width: int = DEFAULT_ATTN_BITS,
             consts: IExpConstants = IExpConstants(), pre_shift: int = 0) -> "LogIntSoftmax":
        if pre_shift < 0:
            raise ContractViolation("pre_shift must be non-negative")
        return cls(IExpKernel.fold(s * 2.0**pre_shift, consts), bit_width, pre_shift)

    def __call__(self, q) -> LogAttnCodes:
        v = int_data(q)
        if v.ndim == 0 or v.shape[-1] < 1:
            raise DimensionError("softmax rows must have length >= 1")
        if self.kernel.peak * v.shape[-1] > INT64_MAX:
            raise ArithmeticOverflow("row sum of i_exp outputs exceeds int64")
        shifted = int_sub(v, int_max(v, keepdims=True))
        if self.pre_shift:
            shifted = round_half_even_shift(shifted, self.pre_shift)
        q_exp = np.maximum(self.kernel(shifted), 1)
        total = int_sum(q_exp, keepdims=True)
        q_rev = div_round_half_even(total, q_exp)
        N = (1 << self.bit_width) - 1
        attn_q = clip_codes(i_log2(q_rev), 0, N)
        return LogAttnCodes(IntTensor(int_sub(np.int64(N), attn_q), self.bit_width, signed=False),
                            self.bit_width)


def log_int_softmax(q, s: float, bit_width: int = DEFAULT_ATTN_BITS,
                    consts: IExpConstants = IExpConstants()) -> LogAttnCodes:
    """Softmax over the last axis of integer logits ``s * q``, emitted as log2 codes."""
    return LogIntSoftmax.fold(s, bit_width, consts)(q)


def quantize_attention_log2(attn, bit_width: int = DEFAULT_ATTN_BITS) -> LogAttnCodes:
    """Float reference: ``clip(round(-log2(attn)), 0, 2^b - 1)``."""
    a = as_float_tensor(attn)
    if a.size and (a.min() < 0 or a.max() > 1):
        raise ContractViolation("attention values must lie in [0, 1]")
    N = (1 << bit_width) - 1
    with np.errstate(divide="ignore"):
        e = np.where(a > 0, np.rint(-np.log2(np.where(a > 0, a, 1.0))), N)
    return LogAttnCodes.from_exponents(np.clip(e, 0, N).astype(np.int64), bit_width)


def attn_value_product(attn: LogAttnCodes, v_q, v_params: QuantParams, base: int | None = None) -> ScaledInt:
    """``sum_j (V_Q[j] - zp_V) << (N - Attn_Q[j])`` at scale ``s_V / 2**N``.

    ``attn`` has shape ``(..., I, J)`` and ``v_q`` shape ``(..., J, D)``.
    ``base`` replaces ``N`` as the shift origin when ``N`` is too wide for
    int64 (8-bit codes give ``N = 255``); exponents beyond ``base`` are then
    clamped to it.
    """
    base = attn.N if base is None else min(base, attn.N)
    if base < 0:
        raise ContractViolation("shift base must be non-negative")
    v = int_data(v_q)
    if attn.codes.shape[-1] != v.shape[-2]:
        raise DimensionError(f"attention width {attn.codes.shape[-1]} != value rows {v.shape[-2]}")
    shifts = int_sub(np.int64(base), clip_codes(attn.exponents, 0, base))
    centered = int_sub(v, np.int64(v_params.zero_point))
    terms = shift_left(centered[..., None, :, :], shifts[..., :, :, None]).data
    out = int_sum(terms, axis=-2)
    return ScaledInt(IntTensor(out, 64), v_params.scale * 2.0 ** -base)
