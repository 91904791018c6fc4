"""Toy pre-norm transformer encoder, in float and fully quantized form.

The quantized residual stream is always held as PTF codes of the LayerNorm
that consumes it. A residual add therefore lands both branches on that
LayerNorm's fine grid (scale ``s``, zero point 0) as wide integers, adds them,
and re-codes the sum per channel with the PTF exponents.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, asdict
from functools import cached_property

import numpy as np
from scipy.special import erf

from .errors import ArithmeticOverflow, ContractViolation, DimensionError
from .ptf import (
    LayerNormAffine,
    PTFParams,
    dequantize_ptf,
    float_layernorm,
    integer_layernorm,
    shift_activations,
)
from .quantizers import (
    QuantParams,
    dequantize_uniform,
    MULTIPLIER_BITS,
    fold_multipliers,
    quantize_uniform,
    quantize_weight_symmetric,
    requantize,
)
from .softmax import (
    IExpConstants,
    LogIntSoftmax,
    attn_value_product,
)
from .tensor import (
    INT64_MAX,
    IntTensor,
    ScaledInt,
    as_float_tensor,
    clip_codes,
    int_add,
    int_data,
    int_mul,
    int_sub,
    record,
    round_half_even_shift,
    widen_matmul,
)

ATTENTION_MODES = ("lis", "uniform", "float")
LAYERNORM_MODES = ("ptf", "float")
# i-exp shift precision is lowered below the configured n only when the row sum would overflow
MIN_IEXP_SHIFT = 16
# shift origin for attention-times-value when 2^b - 1 is too wide for int64
MAX_ATTN_SHIFT = 30


@dataclass(frozen=True)
class EncoderConfig:
    embed_dim: int = 64
    num_heads: int = 4
    tokens: int = 16
    depth: int = 2
    mlp_ratio: int = 4
    attn_bits: int = 4
    act_bits: int = 8
    weight_bits: int = 8
    attention_mode: str = "lis"
    layernorm_mode: str = "ptf"
    K: int = 3
    eps: float = 1e-5
    iexp_shift: int = 30

    def __post_init__(self):
        if self.embed_dim % self.num_heads:
            raise ContractViolation("embed_dim must be divisible by num_heads")
        if self.attention_mode not in ATTENTION_MODES:
            raise ContractViolation(f"attention_mode must be one of {ATTENTION_MODES}")
        if self.layernorm_mode not in LAYERNORM_MODES:
            raise ContractViolation(f"layernorm_mode must be one of {LAYERNORM_MODES}")
        if not (2 <= self.attn_bits <= 8 and 2 <= self.act_bits <= 16 and 2 <= self.weight_bits <= 16):
            raise ContractViolation("unsupported bit widths")
        if self.K < 0:
            raise ContractViolation("K must be non-negative")

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.num_heads

    @property
    def hidden_dim(self) -> int:
        return self.embed_dim * self.mlp_ratio

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "EncoderConfig":
        return cls(**d)


def gelu(x):
    return 0.5 * x * (1.0 + erf(x / math.sqrt(2.0)))


def softmax(x, axis=-1):
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


# -- float model --------------------------------------------------------------

@dataclass
class FloatEncoder:
    config: EncoderConfig
    weights: dict[str, np.ndarray]

    def affine(self, name: str) -> LayerNormAffine:
        return LayerNormAffine(self.weights[f"{name}.gamma"], self.weights[f"{name}.beta"],
                               self.config.eps)


def init_float_model(config: EncoderConfig, seed: int = 0, qk_gain: float = 1.0) -> FloatEncoder:
    """Random encoder weights, ``N(0, 1/fan_in)`` for every projection.

    ``qk_gain`` multiplies the query/key init; values above 1 sharpen the
    attention rows.
    """
    rng = np.random.default_rng(seed)
    C, Hd = config.embed_dim, config.hidden_dim
    w: dict[str, np.ndarray] = {}

    def dense(name, fan_out, fan_in, gain=1.0):
        w[f"{name}.weight"] = rng.normal(0, gain / math.sqrt(fan_in), size=(fan_out, fan_in))
        w[f"{name}.bias"] = rng.normal(0, 0.02, size=fan_out)

    def norm(name):
        w[f"{name}.gamma"] = 1.0 + rng.normal(0, 0.1, size=C)
        w[f"{name}.beta"] = rng.normal(0, 0.05, size=C)

    for i in range(config.depth):
        p = f"blocks.{i}"
        norm(f"{p}.ln1")
        dense(f"{p}.q", C, C, qk_gain)
        dense(f"{p}.k", C, C, qk_gain)
        dense(f"{p}.v", C, C)
        dense(f"{p}.proj", C, C)
        norm(f"{p}.ln2")
        dense(f"{p}.fc1", Hd, C)
        dense(f"{p}.fc2", C, Hd)
    norm("norm")
    return FloatEncoder(config, w)


def _split_heads(x, H):
    *lead, L, C = x.shape
    return np.swapaxes(x.reshape(*lead, L, H, C // H), -2, -3)


def _merge_heads(x):
    x = np.swapaxes(x, -2, -3)
    *lead, L, H, d = x.shape
    return x.reshape(*lead, L, H * d)


def float_reference_forward(x, model: FloatEncoder, tap=None) -> np.ndarray:
    """Full-precision forward. ``tap(site, value)`` sees every quantization site."""
    cfg = model.config
    w = model.weights
    x = as_float_tensor(x)
    if x.shape[-1] != cfg.embed_dim:
        raise DimensionError(f"expected {cfg.embed_dim} channels, got {x.shape[-1]}")
    tap = tap or (lambda name, value: None)

    def linear(name, h):
        return h @ w[f"{name}.weight"].T + w[f"{name}.bias"]

    for i in range(cfg.depth):
        p = f"blocks.{i}"
        tap(f"{p}.ln1.in", x)
        h = float_layernorm(x, model.affine(f"{p}.ln1"))
        tap(f"{p}.ln1.out", h)
        q, k, v = (linear(f"{p}.{n}", h) for n in "qkv")
        for n, val in zip("qkv", (q, k, v)):
            tap(f"{p}.{n}.out", val)
        qh, kh, vh = (_split_heads(t, cfg.num_heads) for t in (q, k, v))
        attn = softmax(qh @ np.swapaxes(kh, -1, -2) / math.sqrt(cfg.head_dim))
        tap(f"{p}.attn", attn)
        ctx = _merge_heads(attn @ vh)
        tap(f"{p}.ctx", ctx)
        o = linear(f"{p}.proj", ctx)
        tap(f"{p}.proj.out", o)
        x = x + o
        tap(f"{p}.ln2.in", x)
        h = float_layernorm(x, model.affine(f"{p}.ln2"))
        tap(f"{p}.ln2.out", h)
        h = linear(f"{p}.fc1", h)
        tap(f"{p}.fc1.out", h)
        h = gelu(h)
        tap(f"{p}.gelu.out", h)
        h = linear(f"{p}.fc2", h)
        tap(f"{p}.fc2.out", h)
        x = x + h
    tap("norm.in", x)
    y = float_layernorm(x, model.affine("norm"))
    tap("norm.out", y)
    return y


# -- integer kernels ----------------------------------------------------------

@dataclass(frozen=True)
class LinearKernel:
    """Folded quantized linear layer; calling it is integer only."""

    weight: np.ndarray      # (out, in) signed codes
    bias: np.ndarray        # int64, at scale s_in * s_w
    mantissa: np.ndarray
    shift: np.ndarray
    zp_in: int
    out: QuantParams

    def __call__(self, x_q) -> IntTensor:
        x = int_data(x_q)
        acc = widen_matmul(int_sub(x, np.int64(self.zp_in)), self.weight.T).data
        acc = int_add(acc, self.bias)
        lo, hi = self.out.qrange
        y = requantize(acc, self.mantissa, self.shift, self.out.zero_point, lo, hi)
        return IntTensor(y, self.out.bit_width, self.out.signed)


def fold_linear(w_q, w_scales, bias, in_params: QuantParams, out_params: QuantParams) -> LinearKernel:
    w = int_data(w_q)
    acc_scale = in_params.scale * np.asarray(w_scales, dtype=np.float64)
    b = np.zeros(w.shape[0]) if bias is None else as_float_tensor(bias)
    bias_q = np.rint(b / acc_scale).astype(np.int64)
    mant, shift = fold_multipliers(acc_scale / out_params.scale)
    return LinearKernel(w, bias_q, mant, shift, in_params.zero_point, out_params)


def quantized_linear(x_q, w_q, bias, in_params: QuantParams, w_scales,
                     out_params: QuantParams) -> IntTensor:
    """Integer matmul, bias add and fixed-point requantization to ``out_params``."""
    return fold_linear(w_q, w_scales, bias, in_params, out_params)(x_q)


def quantized_qk_matmul(q_q, k_q, q_params: QuantParams, k_params: QuantParams,
                        head_dim: int) -> ScaledInt:
    """``(Q_Q - zp_q)(K_Q - zp_k)^T`` with the ``1/sqrt(d)`` temperature folded into the scale."""
    q = int_sub(int_data(q_q), np.int64(q_params.zero_point))
    k = int_sub(int_data(k_q), np.int64(k_params.zero_point))
    if q.shape[-1] != k.shape[-1]:
        raise DimensionError("query and key head widths differ")
    logits = widen_matmul(q, np.swapaxes(k, -1, -2))
    return ScaledInt(logits, q_params.scale * k_params.scale / math.sqrt(head_dim))


@dataclass(frozen=True)
class RequantKernel:
    """Integer rescale of a zero-centered accumulator onto ``out``."""

    mantissa: int
    shift: int
    out: QuantParams

    @classmethod
    def fold(cls, in_scale: float, out: QuantParams, acc_bits: int = 32) -> "RequantKernel":
        """``acc_bits`` bounds the accumulator magnitude; the mantissa gets what int64 leaves."""
        bits = max(8, min(MULTIPLIER_BITS, 62 - acc_bits))
        m, s = fold_multipliers(np.array(in_scale / out.scale), bits)
        return cls(int(m), int(s), out)

    def __call__(self, acc) -> IntTensor:
        lo, hi = self.out.qrange
        y = requantize(acc, np.int64(self.mantissa), np.int64(self.shift), self.out.zero_point, lo, hi)
        return IntTensor(y, self.out.bit_width, self.out.signed)


@dataclass(frozen=True)
class ResidualKernel:
    """Adds the PTF-coded stream and a uniform branch, emitting PTF codes for ``target``."""

    stream: PTFParams
    branch: QuantParams
    target: PTFParams
    stream_mult: tuple[int, int]
    branch_mult: tuple[int, int]

    @classmethod
    def fold(cls, stream: PTFParams, branch: QuantParams, target: PTFParams) -> "ResidualKernel":
        sm, ss = fold_multipliers(np.array(stream.scale / target.scale))
        bm, bs = fold_multipliers(np.array(branch.scale / target.scale))
        return cls(stream, branch, target, (int(sm), int(ss)), (int(bm), int(bs)))

    def _to_target_grid(self, v, mult):
        m, s = mult
        return round_half_even_shift(int_mul(v, np.int64(m)), np.int64(s))

    def __call__(self, x_q, branch_q) -> IntTensor:
        x_hat = shift_activations(x_q, self.stream).data
        b = int_sub(int_data(branch_q), np.int64(self.branch.zero_point))
        record("residual", x_hat, b)
        total = int_add(self._to_target_grid(x_hat, self.stream_mult),
                        self._to_target_grid(b, self.branch_mult))
        return ptf_codes_from_fine(total, self.target)


def ptf_codes_from_fine(v, p: PTFParams) -> IntTensor:
    """PTF codes for values held as integers on the fine grid of ``p``."""
    coarse = round_half_even_shift(int_data(v), p.alpha)
    codes = clip_codes(int_add(coarse, np.int64(p.zero_point)), 0, p.qmax)
    return IntTensor(codes, p.bit_width, signed=False)


# -- quantized model ----------------------------------------------------------

@dataclass
class QuantizedEncoderModel:
    """Calibrated integer encoder: quantized weights plus parameters for every site."""

    config: EncoderConfig
    tensors: dict[str, np.ndarray]
    sites: dict[str, QuantParams | PTFParams]

    def affine(self, name: str) -> LayerNormAffine:
        return LayerNormAffine(self.tensors[f"{name}.gamma"], self.tensors[f"{name}.beta"],
                               self.config.eps)

    def with_config(self, **changes) -> "QuantizedEncoderModel":
        cfg = EncoderConfig(**{**self.config.to_dict(), **changes})
        return QuantizedEncoderModel(cfg, self.tensors, self.sites)

    def linear(self, name: str, in_site: str) -> LinearKernel:
        return fold_linear(self.tensors[f"{name}.weight_q"], self.tensors[f"{name}.weight_scale"],
                           self.tensors[f"{name}.bias"], self.sites[in_site], self.sites[f"{name}.out"])

    @cached_property
    def layers(self) -> list["BlockKernels"]:
        return [BlockKernels.build(self, i) for i in range(self.config.depth)]

    def quantize_input(self, x) -> IntTensor:
        from .ptf import quantize_ptf
        return quantize_ptf(x, self.sites["blocks.0.ln1.in"] if self.config.depth else self.sites["norm.in"])

    def forward_codes(self, x_q) -> IntTensor:
        h = x_q
        for layer in self.layers:
            h = encoder_block_forward(h, layer, self.config)
        return layernorm_apply(h, self.sites["norm.in"], self.affine("norm"), self.sites["norm.out"],
                               self.config)

    def forward(self, x) -> np.ndarray:
        """Quantize ``x``, run the integer encoder, dequantize the output."""
        y = self.forward_codes(self.quantize_input(x))
        return dequantize_uniform(y, self.sites["norm.out"])


def layernorm_apply(x_q, p: PTFParams, affine: LayerNormAffine, out: QuantParams,
                    config: EncoderConfig) -> IntTensor:
    if config.layernorm_mode == "ptf":
        return integer_layernorm(x_q, p, affine, out)
    x = dequantize_ptf(x_q, p)
    record("float_layernorm", x)
    return quantize_uniform(float_layernorm(x, affine), out)


def _fit_softmax(scale: float, tokens: int, bit_width: int, n: int) -> LogIntSoftmax:
    """Largest i-exp shift ``n`` (not below ``MIN_IEXP_SHIFT``) whose row sums fit int64.

    Very fine logit scales make the folded constants themselves too large;
    the logits are then rounded onto a coarser power-of-two grid first.
    """
    pre = 0
    while True:
        for m in range(n, MIN_IEXP_SHIFT - 1, -1):
            lis = LogIntSoftmax.fold(scale, bit_width, IExpConstants(n=m), pre)
            if lis.kernel.peak * tokens <= INT64_MAX:
                return lis
        pre += 1
        if pre > 62:
            raise ArithmeticOverflow(f"cannot fit i-exp for logit scale {scale}")


@dataclass(frozen=True)
class BlockKernels:
    """One encoder block with every constant folded."""

    name: str
    ln1_in: PTFParams
    ln1_affine: LayerNormAffine
    ln1_out: QuantParams
    q: LinearKernel
    k: LinearKernel
    v: LinearKernel
    logit_scale: float
    softmax: LogIntSoftmax
    attn_params: QuantParams | None
    attn_shift_base: int
    attn_requant: RequantKernel
    ctx: QuantParams
    proj: LinearKernel
    residual1: ResidualKernel
    ln2_affine: LayerNormAffine
    ln2_out: QuantParams
    fc1: LinearKernel
    gelu_out: QuantParams
    fc2: LinearKernel
    residual2: ResidualKernel

    @classmethod
    def build(cls, model: QuantizedEncoderModel, i: int) -> "BlockKernels":
        cfg, S = model.config, model.sites
        p = f"blocks.{i}"
        nxt = f"blocks.{i + 1}.ln1.in" if i + 1 < cfg.depth else "norm.in"
        q_p, k_p, v_p = S[f"{p}.q.out"], S[f"{p}.k.out"], S[f"{p}.v.out"]
        logit_scale = q_p.scale * k_p.scale / math.sqrt(cfg.head_dim)
        lis = _fit_softmax(logit_scale, cfg.tokens, cfg.attn_bits, cfg.iexp_shift)
        base = min((1 << cfg.attn_bits) - 1, MAX_ATTN_SHIFT)
        return cls(
            name=p,
            ln1_in=S[f"{p}.ln1.in"],
            ln1_affine=model.affine(f"{p}.ln1"),
            ln1_out=S[f"{p}.ln1.out"],
            q=model.linear(f"{p}.q", f"{p}.ln1.out"),
            k=model.linear(f"{p}.k", f"{p}.ln1.out"),
            v=model.linear(f"{p}.v", f"{p}.ln1.out"),
            logit_scale=logit_scale,
            softmax=lis,
            attn_params=S.get(f"{p}.attn"),
            attn_shift_base=base,
            attn_requant=RequantKernel.fold(
                v_p.scale * 2.0**-base, S[f"{p}.ctx"],
                acc_bits=v_p.bit_width + 1 + base + cfg.tokens.bit_length()),
            ctx=S[f"{p}.ctx"],
            proj=model.linear(f"{p}.proj", f"{p}.ctx"),
            residual1=ResidualKernel.fold(S[f"{p}.ln1.in"], S[f"{p}.proj.out"], S[f"{p}.ln2.in"]),
            ln2_affine=model.affine(f"{p}.ln2"),
            ln2_out=S[f"{p}.ln2.out"],
            fc1=model.linear(f"{p}.fc1", f"{p}.ln2.out"),
            gelu_out=S[f"{p}.gelu.out"],
            fc2=model.linear(f"{p}.fc2", f"{p}.gelu.out"),
            residual2=ResidualKernel.fold(S[f"{p}.ln2.in"], S[f"{p}.fc2.out"], S[nxt]),
        )

    @property
    def ln2_in(self) -> PTFParams:
        return self.residual1.target


def _split_heads_codes(x: IntTensor, H: int) -> np.ndarray:
    return _split_heads(x.data, H)


def msa_forward(h_q, layer: BlockKernels, config: EncoderConfig) -> IntTensor:
    """Multi-head self-attention on LayerNorm output codes; returns projection output codes.

    With ``attention_mode == "lis"`` everything between input and output codes
    is integer arithmetic on folded constants.
    """
    H = config.num_heads
    q, k, v = layer.q(h_q), layer.k(h_q), layer.v(h_q)
    qh, kh, vh = (_split_heads_codes(t, H) for t in (q, k, v))
    v_params = layer.v.out

    if config.attention_mode == "lis":
        logits = quantized_qk_matmul(qh, kh, layer.q.out, layer.k.out, config.head_dim)
        attn = layer.softmax(logits.codes)
        ctx_acc = attn_value_product(attn, vh, v_params, layer.attn_shift_base).codes.data
        ctx = layer.attn_requant(ctx_acc)
    else:
        logits = quantized_qk_matmul(qh, kh, layer.q.out, layer.k.out, config.head_dim)
        real = logits.dequantize()
        record("float_softmax", real)
        probs = softmax(real)
        if config.attention_mode == "uniform":
            if layer.attn_params is None:
                raise ContractViolation("uniform attention mode needs calibrated attention params")
            a = layer.attn_params
            a_q = quantize_uniform(probs, a).data
            acc = widen_matmul(int_sub(a_q, np.int64(a.zero_point)),
                               int_sub(vh, np.int64(v_params.zero_point))).data
            ctx = RequantKernel.fold(a.scale * v_params.scale, layer.ctx)(acc)
        else:
            ctx = quantize_uniform(probs @ dequantize_uniform(vh, v_params), layer.ctx)
    merged = _merge_heads(ctx.data)
    return layer.proj(IntTensor(merged, layer.ctx.bit_width, layer.ctx.signed))


def encoder_block_forward(x_q, layer: BlockKernels, config: EncoderConfig) -> IntTensor:
    """Pre-norm block on PTF codes; returns PTF codes for the next LayerNorm."""
    h = layernorm_apply(x_q, layer.ln1_in, layer.ln1_affine, layer.ln1_out, config)
    attn_out = msa_forward(h, layer, config)
    x2 = layer.residual1(x_q, attn_out)
    h = layernorm_apply(x2, layer.ln2_in, layer.ln2_affine, layer.ln2_out, config)
    h = layer.fc1(h)
    # GELU runs in float on dequantized codes
    real = dequantize_uniform(h, layer.fc1.out)
    record("gelu", real)
    g = quantize_uniform(gelu(real), layer.gelu_out)
    h = layer.fc2(g)
    return layer.residual2(x2, h)
