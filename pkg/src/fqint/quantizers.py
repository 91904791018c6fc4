"""Uniform affine and log2 quantizers with MinMax calibration."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable

import numpy as np

from .errors import CalibrationError, ContractViolation
from .tensor import (
    IntTensor,
    as_float_tensor,
    clip_codes,
    code_range,
    int_data,
    int_mul,
    int_add,
    round_half_even_shift,
)

MULTIPLIER_BITS = 31


@dataclass(frozen=True)
class QuantParams:
    """Layer-wise affine parameters: ``x ~= scale * (code - zero_point)``."""

    scale: float
    zero_point: int
    bit_width: int
    signed: bool = False

    def __post_init__(self):
        if not (math.isfinite(self.scale) and self.scale > 0):
            raise ContractViolation(f"scale must be positive, got {self.scale}")
        lo, hi = self.qrange
        if not lo <= self.zero_point <= hi:
            raise ContractViolation(f"zero_point {self.zero_point} outside [{lo}, {hi}]")
        if self.signed and self.zero_point != 0:
            raise ContractViolation("signed (symmetric) params require zero_point 0")

    @property
    def qrange(self) -> tuple[int, int]:
        if self.signed:
            # symmetric: drop the most negative code so the range is balanced
            return -(1 << (self.bit_width - 1)) + 1, (1 << (self.bit_width - 1)) - 1
        return code_range(self.bit_width, False)

    def to_dict(self) -> dict:
        return {"scale": self.scale, "zero_point": self.zero_point,
                "bit_width": self.bit_width, "signed": self.signed}

    @classmethod
    def from_dict(cls, d: dict) -> "QuantParams":
        return cls(float(d["scale"]), int(d["zero_point"]), int(d["bit_width"]), bool(d["signed"]))


@dataclass(frozen=True)
class Log2Params:
    max_abs: float
    bit_width: int

    def __post_init__(self):
        if not self.max_abs > 0:
            raise ContractViolation("max_abs must be positive")


@dataclass
class MinMaxObserver:
    """Running min/max; ``merge`` is associative so shards can be reduced in any order."""

    min: float = math.inf
    max: float = -math.inf
    count: int = 0

    def update(self, x) -> "MinMaxObserver":
        arr = as_float_tensor(x)
        if arr.size:
            self.min = min(self.min, float(arr.min()))
            self.max = max(self.max, float(arr.max()))
            self.count += arr.size
        return self

    def merge(self, other: "MinMaxObserver") -> "MinMaxObserver":
        return MinMaxObserver(min(self.min, other.min), max(self.max, other.max),
                              self.count + other.count)

    def finalize(self, bit_width: int) -> QuantParams:
        if self.count == 0:
            raise CalibrationError("no samples observed")
        return minmax_params(self.min, self.max, bit_width)


def minmax_params(lo: float, hi: float, bit_width: int) -> QuantParams:
    qmax = (1 << bit_width) - 1
    if hi == lo:
        scale = 1.0
    else:
        scale = (hi - lo) / qmax
    zp = int(np.clip(np.rint(-lo / scale), 0, qmax))
    return QuantParams(scale, zp, bit_width)


def calibrate_minmax(samples: Iterable, bit_width: int) -> QuantParams:
    """Asymmetric layer-wise MinMax calibration over a stream of arrays."""
    if bit_width < 2:
        raise ContractViolation("bit_width must be >= 2")
    obs = MinMaxObserver()
    for x in samples:
        obs.update(x)
    return obs.finalize(bit_width)


def quantize_uniform(x, p: QuantParams) -> IntTensor:
    arr = as_float_tensor(x)
    lo, hi = p.qrange
    q = np.clip(np.rint(arr / p.scale) + p.zero_point, lo, hi).astype(np.int64)
    return IntTensor(q, p.bit_width, p.signed)


def dequantize_uniform(x_q, p: QuantParams) -> np.ndarray:
    return p.scale * (int_data(x_q) - p.zero_point).astype(np.float64)


def quantize_weight_symmetric(w, bit_width: int = 8, axis: int = 0) -> tuple[IntTensor, np.ndarray]:
    """Symmetric per-channel MinMax quantization (zero point 0), one scale per slice along ``axis``."""
    arr = as_float_tensor(w)
    qmax = (1 << (bit_width - 1)) - 1
    reduce_axes = tuple(i for i in range(arr.ndim) if i != axis % arr.ndim)
    amax = np.abs(arr).max(axis=reduce_axes) if arr.size else np.zeros(arr.shape[axis])
    scales = np.where(amax > 0, amax / qmax, 1.0)
    shape = [1] * arr.ndim
    shape[axis] = -1
    q = np.clip(np.rint(arr / scales.reshape(shape)), -qmax, qmax).astype(np.int64)
    return IntTensor(q, bit_width, signed=True), scales


def calibrate_log2(samples: Iterable, bit_width: int) -> Log2Params:
    m = 0.0
    seen = False
    for x in samples:
        arr = as_float_tensor(x)
        if arr.size:
            seen = True
            m = max(m, float(np.abs(arr).max()))
    if not seen:
        raise CalibrationError("no samples observed")
    return Log2Params(m if m > 0 else 1.0, bit_width)


def quantize_log2_signed(x, p: Log2Params) -> IntTensor:
    """Signed log2 code ``sign(x) * clip(round(-log2(|x|/max_abs)), 0, 2^(b-1)-1)``.

    Zero maps to the deepest positive bin. Exponent 0 carries no sign, so
    ``-max_abs`` and ``+max_abs`` share code 0.
    """
    arr = as_float_tensor(x)
    deepest = (1 << (p.bit_width - 1)) - 1
    mag = np.abs(arr) / p.max_abs
    with np.errstate(divide="ignore"):
        e = np.where(mag > 0, np.rint(-np.log2(np.where(mag > 0, mag, 1.0))), deepest)
    e = np.clip(e, 0, deepest).astype(np.int64)
    sign = np.where(arr < 0, -1, 1)
    return IntTensor(sign * e, p.bit_width, signed=True)


def dequantize_log2_signed(x_q, p: Log2Params) -> np.ndarray:
    q = int_data(x_q)
    sign = np.where(q < 0, -1.0, 1.0)
    return sign * p.max_abs * np.exp2(-np.abs(q).astype(np.float64))


# -- fixed-point requantization -----------------------------------------------

def fold_multiplier(m: float, bits: int = MULTIPLIER_BITS) -> tuple[int, int]:
    """Express ``m >= 0`` as ``mantissa * 2**-shift`` with a ``bits``-bit mantissa."""
    if m < 0 or not math.isfinite(m):
        raise ContractViolation(f"multiplier must be finite and non-negative, got {m}")
    if m == 0:
        return 0, 0
    frac, exp = math.frexp(m)
    mantissa = round(frac * (1 << bits))
    shift = bits - exp
    if mantissa == 1 << bits:
        mantissa >>= 1
        shift -= 1
    return mantissa, shift


def fold_multipliers(ms, bits: int = MULTIPLIER_BITS) -> tuple[np.ndarray, np.ndarray]:
    pairs = [fold_multiplier(float(m), bits) for m in np.ravel(ms)]
    shape = np.shape(ms)
    mant = np.array([p[0] for p in pairs], dtype=np.int64).reshape(shape)
    shift = np.array([p[1] for p in pairs], dtype=np.int64).reshape(shape)
    return mant, shift


def requantize(acc, mantissa, shift, zero_point: int, lo: int, hi: int) -> np.ndarray:
    """Integer-only ``clip(round(acc * mantissa / 2**shift) + zero_point, lo, hi)``."""
    scaled = round_half_even_shift(int_mul(acc, mantissa), shift)
    return clip_codes(int_add(scaled, np.int64(zero_point)), lo, hi)
