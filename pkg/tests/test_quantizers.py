import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from fqint.errors import CalibrationError, ContractViolation
from fqint.quantizers import (
    Log2Params,
    MinMaxObserver,
    QuantParams,
    calibrate_minmax,
    dequantize_log2_signed,
    dequantize_uniform,
    fold_multiplier,
    quantize_log2_signed,
    quantize_uniform,
    quantize_weight_symmetric,
    requantize,
)

finite = st.floats(-1e3, 1e3, allow_nan=False, allow_infinity=False)


def test_calibrate_minmax_examples():
    p = calibrate_minmax([np.array([-1.0, 0.0, 2.0])], 8)
    assert p.scale == pytest.approx(3 / 255) and p.zero_point == 85
    p = calibrate_minmax([np.array([0.0, 255.0])], 8)
    assert p.scale == 1.0 and p.zero_point == 0
    # -l/s = 7.5 rounds half to even
    p = calibrate_minmax([np.array([-2.0, 2.0])], 4)
    assert p.scale == pytest.approx(4 / 15) and p.zero_point == 8


def test_calibrate_minmax_streams_and_merges():
    chunks = [np.array([3.0, 4.0]), np.array([-1.0]), np.array([10.0])]
    whole = calibrate_minmax(chunks, 8)
    a = MinMaxObserver().update(chunks[0])
    b = MinMaxObserver().update(chunks[1]).update(chunks[2])
    assert a.merge(b).finalize(8) == whole == b.merge(a).finalize(8)


def test_calibrate_minmax_degenerate_and_empty():
    p = calibrate_minmax([np.full(5, 3.0)], 8)
    assert p.scale == 1.0 and p.zero_point == 0
    p = calibrate_minmax([np.full(5, -3.0)], 8)
    assert p.zero_point == 3
    x = np.full(4, -3.0)
    assert dequantize_uniform(quantize_uniform(x, p), p).tolist() == x.tolist()
    with pytest.raises(CalibrationError):
        calibrate_minmax([], 8)
    with pytest.raises(ContractViolation):
        calibrate_minmax([np.zeros(1)], 1)


def test_quantize_uniform_examples():
    p = QuantParams(1.0, 0, 8)
    assert quantize_uniform([0.0, 2.6, 300.0], p).to_list() == [0, 3, 255]
    assert quantize_uniform([2.5, 3.5], p).to_list() == [2, 4]
    assert dequantize_uniform(np.array([255]), p).tolist() == [255.0]
    q = QuantParams(0.1, 17, 8)
    assert dequantize_uniform(np.array([17]), q).tolist() == [0.0]


def test_quant_params_validation():
    with pytest.raises(ContractViolation):
        QuantParams(0.0, 0, 8)
    with pytest.raises(ContractViolation):
        QuantParams(1.0, 256, 8)
    with pytest.raises(ContractViolation):
        QuantParams(1.0, 3, 8, signed=True)


@settings(max_examples=200, deadline=None)
@given(arrays(np.float64, st.integers(2, 50), elements=finite), st.integers(2, 12))
def test_uniform_range_roundtrip_and_monotone(x, bits):
    p = calibrate_minmax([x], bits)
    q = quantize_uniform(x, p).data
    assert q.min() >= 0 and q.max() <= 2**bits - 1
    # the zero point is clipped, so the bound holds for X inside [l, u] on the grid's span
    lo, hi = x.min(), x.max()
    grid_lo, grid_hi = -p.zero_point * p.scale, (2**bits - 1 - p.zero_point) * p.scale
    inside = (x >= max(lo, grid_lo)) & (x <= min(hi, grid_hi))
    err = np.abs(x - dequantize_uniform(q, p))[inside]
    assert np.all(err <= p.scale / 2 + 1e-12 * max(1.0, np.abs(x).max()))
    order = np.argsort(x, kind="stable")
    assert np.all(np.diff(q[order]) >= 0)


def test_weight_symmetric_per_channel():
    w = np.array([[0.5, -1.0], [0.0, 0.0], [2.54, 0.01]])
    q, s = quantize_weight_symmetric(w, 8)
    assert s.tolist() == pytest.approx([1 / 127, 1.0, 2.54 / 127])
    assert q.to_list() == [[64, -127], [0, 0], [127, 0]]
    assert q.signed and int(np.abs(q.data).max()) <= 127


def test_log2_signed_examples():
    p = Log2Params(2.0, 4)
    assert quantize_log2_signed([2.0, 0.5, -0.5], p).to_list() == [0, 2, -2]
    assert dequantize_log2_signed(np.array([0, 2, -2]), p).tolist() == [2.0, 0.5, -0.5]
    # zero falls in the deepest bin
    assert quantize_log2_signed([0.0], p).to_list() == [7]
    assert quantize_log2_signed([1e-9], p).to_list() == [7]


@given(st.floats(1e-6, 1.0), st.floats(1e-6, 1.0))
def test_log2_codes_monotone_in_magnitude(a, b):
    p = Log2Params(1.0, 8)
    qa, qb = quantize_log2_signed([a, b], p).data
    if a <= b:
        assert qa >= qb


def test_fold_multiplier():
    for m in (1.0, 0.5, 3.1e-5, 7.77, 123456.789):
        mant, shift = fold_multiplier(m)
        assert 2**30 <= mant < 2**31
        assert math.isclose(mant * 2.0**-shift, m, rel_tol=2**-30)
    assert fold_multiplier(0.0) == (0, 0)
    with pytest.raises(ContractViolation):
        fold_multiplier(-1.0)


def test_requantize_matches_real_rescale():
    rng = np.random.default_rng(0)
    acc = rng.integers(-(2**20), 2**20, size=1000)
    m = 0.0123
    mant, shift = fold_multiplier(m)
    got = requantize(acc, np.int64(mant), np.int64(shift), 128, 0, 255)
    want = np.clip(np.rint(acc * m) + 128, 0, 255)
    assert np.abs(got - want).max() <= 1
    assert (got == want).mean() > 0.99
