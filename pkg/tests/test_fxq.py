import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cnnevo.fxq import (
    FxFormat, FxValue, Q7_8, dequantize, from_fx, mode_name, parse_mode, quantize,
    quantized_mul, quantized_mul_array, to_fx,
)


def ref_round(q: Fraction) -> int:
    """Half-away-from-zero on an exact rational."""
    mag = math.floor(abs(q) + Fraction(1, 2))
    return mag if q >= 0 else -mag


def ref_to_fx(x, fmt=Q7_8):
    raw = ref_round(Fraction(x) * fmt.scale)
    return max(fmt.code_min, min(fmt.code_max, raw))


def ref_mul(a, b, fmt=Q7_8):
    prod = ref_to_fx(a, fmt) * ref_to_fx(b, fmt)
    raw = ref_round(Fraction(prod, fmt.scale))
    return Fraction(max(fmt.code_min, min(fmt.code_max, raw)), fmt.scale)


def test_format_properties():
    assert Q7_8.scale == 256
    assert (Q7_8.code_min, Q7_8.code_max) == (-32768, 32767)
    assert str(Q7_8) == "Q7.8"
    for bad in ((16, 0), (16, 16), (40, 8)):
        with pytest.raises(ValueError):
            FxFormat(*bad)


def test_to_fx_examples():
    assert to_fx(1.5).raw == 384
    assert to_fx(0.001).raw == 0
    assert to_fx(200.0).raw == 32767
    assert to_fx(-200.0).raw == -32768


def test_from_fx_examples():
    assert from_fx(FxValue(384)) == 1.5
    assert from_fx(FxValue(-256)) == -1.0
    assert from_fx(FxValue(32767)) == 127.99609375
    with pytest.raises(ValueError):
        FxValue(32768)


def test_rounding_is_half_away_from_zero():
    assert to_fx(0.5 / 256).raw == 1
    assert to_fx(-0.5 / 256).raw == -1
    assert to_fx(1.5 / 256).raw == 2
    assert to_fx(-2.5 / 256).raw == -3


def test_to_fx_rejects_non_finite():
    for x in (math.nan, math.inf):
        with pytest.raises(ValueError):
            to_fx(x)


def test_quantized_mul_examples():
    assert quantized_mul(1.0, 1.0) == 1.0
    assert quantized_mul(0.5, 0.5) == 0.25
    assert abs(quantized_mul(1 / 3, 3.0) - 1.0) <= 3 * 2**-8


def test_every_code_round_trips():
    codes = np.arange(Q7_8.code_min, Q7_8.code_max + 1)
    assert np.array_equal(quantize(dequantize(codes)), codes)
    for c in (-32768, -1, 0, 1, 12345, 32767):
        assert to_fx(from_fx(FxValue(c))).raw == c


def test_quantize_matches_exact_reference():
    rng = np.random.default_rng(3)
    xs = np.concatenate([rng.uniform(-130, 130, 2000), (np.arange(-600, 600) + 0.5) / 256])
    codes = quantize(xs)
    assert all(int(c) == ref_to_fx(float(x)) for c, x in zip(codes, xs))


def test_mul_matches_exact_reference():
    rng = np.random.default_rng(4)
    a = rng.uniform(-20, 20, 3000)
    b = rng.uniform(-20, 20, 3000)
    got = quantized_mul_array(a, b)
    assert all(Fraction(float(g)) == ref_mul(float(x), float(y)) for g, x, y in zip(got, a, b))


def test_mul_error_bound_1e5_pairs():
    rng = np.random.default_rng(5)
    a = rng.uniform(-11, 11, 100_000)
    b = rng.uniform(-11, 11, 100_000)
    err = np.abs(quantized_mul_array(a, b) - a * b)
    bound = (np.abs(a) + np.abs(b) + 1) * 2**-8 + 2**-8
    assert np.all(err <= bound)


def test_to_fx_monotone():
    xs = np.sort(np.random.default_rng(6).uniform(-300, 300, 50_000))
    assert np.all(np.diff(quantize(xs)) >= 0)


@settings(max_examples=300, deadline=None)
@given(st.floats(-11, 11), st.floats(-11, 11))
def test_sign_symmetry(a, b):
    assert quantized_mul(-a, b) == -quantized_mul(a, b)


@settings(max_examples=300, deadline=None)
@given(st.floats(-1e6, 1e6), st.floats(-1e6, 1e6))
def test_monotone_pairs(x, y):
    lo, hi = min(x, y), max(x, y)
    assert to_fx(lo).raw <= to_fx(hi).raw


def test_other_formats():
    q34 = FxFormat(8, 4)
    assert to_fx(1.0, q34).raw == 16
    assert to_fx(100.0, q34).raw == 127
    assert quantized_mul(0.5, 0.5, q34) == 0.25


def test_parse_mode():
    assert parse_mode("fp") is None
    assert parse_mode("fx16") == Q7_8
    assert parse_mode("fx8") == FxFormat(8, 4)
    assert parse_mode("fx:12,6") == FxFormat(12, 6)
    assert mode_name(parse_mode("fx:12,6")) == "fx:12,6"
    assert mode_name(None) == "fp" and mode_name(Q7_8) == "fx16"
    with pytest.raises(ValueError):
        parse_mode("int4")
