"""Power-of-Two-Factor quantization and integer-only LayerNorm.

LayerNorm inputs share one layer-wise ``(scale, zero_point)`` but each channel
carries an exponent ``alpha_c`` in ``0..K`` so that wide channels use a grid
``2**alpha_c`` times coarser. Shifting codes left by ``alpha_c`` puts every
channel back on the common fine grid, which is what lets mean and variance be
computed with integer sums.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from .errors import CalibrationError, ContractViolation, DimensionError
from .quantizers import QuantParams
from .tensor import (
    IntTensor,
    as_float_tensor,
    clip_codes,
    int_add,
    int_data,
    int_mul,
    int_sub,
    int_sum,
    round_half_even_shift,
    shift_left,
)

DEFAULT_K = 3
# caps the fold exponent so round(B * 2**N1) stays well inside int64
MAX_FOLD_SHIFT = 40


@dataclass(frozen=True)
class PTFParams:
    scale: float          # fine-grid scale, already divided by 2**K
    zero_point: int
    alpha: np.ndarray     # per-channel exponents in [0, K]
    K: int
    bit_width: int = 8

    def __post_init__(self):
        alpha = np.asarray(self.alpha, dtype=np.int64)
        if not (math.isfinite(self.scale) and self.scale > 0):
            raise ContractViolation("PTF scale must be positive")
        if self.K < 0:
            raise ContractViolation("K must be non-negative")
        if alpha.ndim != 1 or (alpha.size and (alpha.min() < 0 or alpha.max() > self.K)):
            raise ContractViolation(f"alpha must be a vector with entries in [0, {self.K}]")
        if not 0 <= self.zero_point <= self.qmax:
            raise ContractViolation("zero_point outside code range")
        alpha.setflags(write=False)
        object.__setattr__(self, "alpha", alpha)

    @property
    def qmax(self) -> int:
        return (1 << self.bit_width) - 1

    @property
    def channels(self) -> int:
        return len(self.alpha)

    def channel_scales(self) -> np.ndarray:
        return self.scale * np.exp2(self.alpha.astype(np.float64))

    def as_layerwise(self) -> QuantParams:
        """Uniform params of the shifted representation (scale ``s``, zero point 0)."""
        return QuantParams(self.scale, 0, self.bit_width + self.K + 1, signed=True)

    def to_dict(self) -> dict:
        return {"scale": self.scale, "zero_point": self.zero_point, "K": self.K,
                "bit_width": self.bit_width, "alpha": [int(a) for a in self.alpha]}

    @classmethod
    def from_dict(cls, d: dict) -> "PTFParams":
        return cls(float(d["scale"]), int(d["zero_point"]), np.array(d["alpha"], dtype=np.int64),
                   int(d["K"]), int(d["bit_width"]))

    def __eq__(self, other):
        if not isinstance(other, PTFParams):
            return NotImplemented
        return self.to_dict() == other.to_dict()

    __hash__ = None


@dataclass(frozen=True)
class LayerNormAffine:
    gamma: np.ndarray
    beta: np.ndarray
    eps: float = 1e-5

    def __post_init__(self):
        g, b = as_float_tensor(self.gamma), as_float_tensor(self.beta)
        if g.shape != b.shape or g.ndim != 1:
            raise DimensionError("gamma and beta must be equal-length vectors")
        if not self.eps > 0:
            raise ContractViolation("eps must be positive")
        object.__setattr__(self, "gamma", g)
        object.__setattr__(self, "beta", b)


@dataclass(frozen=True)
class IntegerStats:
    """Per-token integer moments of the shifted codes."""

    M1: np.ndarray
    M2: np.ndarray
    C: int

    @property
    def spread(self) -> np.ndarray:
        """``C*M2 - M1**2``, non-negative by Cauchy-Schwarz."""
        return self.C * self.M2 - self.M1 * self.M1

    def mean(self, scale: float) -> np.ndarray:
        return scale * self.M1 / self.C

    def variance(self, scale: float) -> np.ndarray:
        return scale * scale * self.spread / (self.C * self.C)

    def root(self) -> np.ndarray:
        """Integer ``floor(sqrt(C*M2 - M1**2))``, floored at 1 in place of epsilon."""
        return np.maximum(isqrt(self.spread), 1)

    def std(self, scale: float) -> np.ndarray:
        return scale * self.root() / self.C


# -- calibration --------------------------------------------------------------

@dataclass
class PTFObserver:
    """Collects LayerNorm inputs; global min/max stream, per-channel values are kept for the alpha fit."""

    chunks: list = field(default_factory=list)
    min: float = math.inf
    max: float = -math.inf

    def update(self, x) -> "PTFObserver":
        arr = as_float_tensor(x)
        if arr.ndim < 1:
            raise DimensionError("LayerNorm input needs a channel axis")
        if self.chunks and arr.shape[-1] != self.chunks[0].shape[-1]:
            raise DimensionError("channel count changed between samples")
        if arr.size:
            flat = arr.reshape(-1, arr.shape[-1])
            self.chunks.append(flat)
            self.min = min(self.min, float(flat.min()))
            self.max = max(self.max, float(flat.max()))
        return self

    def merge(self, other: "PTFObserver") -> "PTFObserver":
        return PTFObserver(self.chunks + other.chunks, min(self.min, other.min), max(self.max, other.max))

    def finalize(self, bit_width: int = 8, K: int = DEFAULT_K) -> PTFParams:
        if not self.chunks:
            raise CalibrationError("no samples observed")
        if K < 0:
            raise ContractViolation("K must be non-negative")
        qmax = (1 << bit_width) - 1
        full = (self.max - self.min) / qmax if self.max > self.min else 1.0
        scale = full / 2**K
        zp = int(np.clip(np.rint(-self.min / full), 0, qmax))
        errors = ptf_reconstruction_errors(np.concatenate(self.chunks), scale, zp, K, bit_width)
        alpha = np.argmin(errors, axis=0)  # first minimum, i.e. smallest alpha on ties
        return PTFParams(scale, zp, alpha, K, bit_width)


def ptf_reconstruction_errors(x: np.ndarray, scale: float, zp: int, K: int, bit_width: int) -> np.ndarray:
    """Squared L2 error per (alpha, channel) of the clipped quantize/dequantize round trip."""
    qmax = (1 << bit_width) - 1
    errs = np.empty((K + 1, x.shape[-1]))
    for a in range(K + 1):
        step = scale * 2**a
        q = np.clip(np.rint(x / step) + zp, 0, qmax)
        errs[a] = ((x - (q - zp) * step) ** 2).sum(axis=0)
    return errs


def calibrate_ptf(samples: Iterable, bit_width: int = 8, K: int = DEFAULT_K) -> PTFParams:
    obs = PTFObserver()
    for x in samples:
        obs.update(x)
    return obs.finalize(bit_width, K)


# -- inference ----------------------------------------------------------------

def quantize_ptf(x, p: PTFParams) -> IntTensor:
    arr = as_float_tensor(x)
    if arr.shape[-1:] != (p.channels,):
        raise DimensionError(f"channel extent {arr.shape[-1:]} != {p.channels}")
    q = np.clip(np.rint(arr / p.channel_scales()) + p.zero_point, 0, p.qmax)
    return IntTensor(q.astype(np.int64), p.bit_width, signed=False)


def dequantize_ptf(x_q, p: PTFParams) -> np.ndarray:
    return p.channel_scales() * (int_data(x_q) - p.zero_point)


def shift_activations(x_q, p: PTFParams) -> IntTensor:
    """``(X_Q - zp) << alpha`` onto the common fine grid of scale ``p.scale``."""
    q = int_data(x_q)
    if q.shape[-1:] != (p.channels,):
        raise DimensionError(f"channel extent {q.shape[-1:]} != {p.channels}")
    out = shift_left(int_sub(q, np.int64(p.zero_point)), p.alpha)
    width = p.bit_width + p.K + 1
    assert out.data.size == 0 or int(np.abs(out.data).max()) < 1 << (width - 1)
    return IntTensor(out.data, width)


def isqrt(n) -> np.ndarray:
    """Elementwise floor square root of non-negative int64 values by Newton iteration."""
    v = int_data(n)
    if v.size and v.min() < 0:
        raise ContractViolation("isqrt of a negative value")
    # bit length, then start from 2**ceil(bits/2) >= sqrt(n)
    bl = np.zeros_like(v)
    t = v.copy()
    for s in (32, 16, 8, 4, 2, 1):
        big = t >= (np.int64(1) << s)
        bl += s * big
        t = np.where(big, t >> s, t)
    bl += t > 0
    x = np.left_shift(np.int64(1), (bl + 1) // 2)
    safe = np.maximum(v, 1)
    while True:
        y = (x + safe // x) >> 1
        done = y >= x
        if done.all():
            break
        x = np.where(done, x, y)
    return np.where(v == 0, 0, x)


def integer_stats(x_hat) -> IntegerStats:
    """Integer first and second moments along the channel axis."""
    q = int_data(x_hat)
    C = q.shape[-1]
    return IntegerStats(int_sum(q), int_sum(int_mul(q, q)), C)


def fold_layernorm(stats: IntegerStats, p: PTFParams, affine: LayerNormAffine,
                   out: QuantParams) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-token, per-channel ``(signed N2, round(B * 2**N1), N1)``.

    ``A`` and ``B`` are evaluated in double precision from the integer
    statistics and immediately folded to integers; ``A`` becomes
    ``sign(A) * N2 / 2**N1`` with ``N2`` carrying ``out.bit_width`` bits.
    """
    C = stats.C
    sigma = (p.scale / C) * stats.root()[..., None].astype(np.float64)
    mu = (p.scale / C) * stats.M1[..., None].astype(np.float64)
    A = p.scale * affine.gamma / (out.scale * sigma)
    B = (affine.beta * sigma - affine.gamma * mu) / (out.scale * sigma)

    absA = np.abs(A)
    _, e = np.frexp(absA)                 # |A| = f * 2**e, f in [0.5, 1)
    n1 = out.bit_width - 1 - (e.astype(np.int64) - 1)
    n1 = np.where(absA > 0, np.minimum(n1, MAX_FOLD_SHIFT), 0)
    n2 = np.floor(np.ldexp(absA, n1)).astype(np.int64)
    n2 = np.where(absA > 0, n2, 0)
    b_int = np.rint(np.ldexp(B, n1)).astype(np.int64)
    return np.sign(A).astype(np.int64) * n2, b_int, n1


def integer_layernorm(x_q, p: PTFParams, affine: LayerNormAffine, out: QuantParams) -> IntTensor:
    """LayerNorm on PTF codes producing uniform output codes.

    The datapath applied to the shifted codes is one integer multiply, add and
    rounding shift per element.
    """
    x_hat = shift_activations(x_q, p)
    if len(affine.gamma) != p.channels:
        raise DimensionError("affine parameters do not match channel count")
    stats = integer_stats(x_hat)
    mult, bias, n1 = fold_layernorm(stats, p, affine, out)
    y = round_half_even_shift(int_add(int_mul(mult, x_hat.data), bias), n1)
    lo, hi = out.qrange
    y = clip_codes(int_add(y, np.int64(out.zero_point)), lo, hi)
    return IntTensor(y, out.bit_width, out.signed)


def float_layernorm(x, affine: LayerNormAffine) -> np.ndarray:
    arr = as_float_tensor(x)
    mu = arr.mean(axis=-1, keepdims=True)
    var = arr.var(axis=-1, keepdims=True)
    return (arr - mu) / np.sqrt(var + affine.eps) * affine.gamma + affine.beta
