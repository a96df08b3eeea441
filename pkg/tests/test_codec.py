import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from mbqnn.codec import (
    Limiter,
    PrecisionConfig,
    QuantizedValue,
    binarize,
    decode,
    encode,
    encode_array,
    encode_trig1,
    encode_trig2,
    encode_zero_one,
    level_values,
    limit,
    quantize_linear,
    quantize_values,
)
from mbqnn.errors import ConfigError, DomainError, PrecisionError, RangeError

unit = st.floats(-1.0, 1.0, allow_nan=False)
bits = st.integers(1, 8)


def q_oracle(x: float, k: int) -> Fraction:
    """Direct transcription of the linear quantizer in exact arithmetic, round half up."""
    den = 2**k - 1
    v = Fraction(den) * (Fraction(x) + 1) / 2
    r = math.floor(v + Fraction(1, 2))
    return 2 * (Fraction(r, den) - Fraction(1, 2))


# --- limiters


def test_limiter_examples():
    assert limit(2.0, "htanh") == 1.0
    assert limit(-3.0, Limiter.HTANH) == -1.0
    assert limit(0.3, "htanh") == 0.3
    assert limit(-0.5, "hrelu") == 0.0
    assert limit(0.4, "hrelu") == 0.4
    assert limit(7.0, "hrelu") == 1.0
    assert limit(0.5, "tanh") == pytest.approx(math.tanh(0.5))
    assert limit(0.5, "sigmoid") == pytest.approx(1 / (1 + math.exp(-0.5)))
    assert limit(-800.0, "sigmoid") == 0.0


def test_limiter_nan():
    with pytest.raises(DomainError):
        limit(float("nan"), "htanh")


def test_unknown_limiter():
    with pytest.raises(ConfigError):
        Limiter.parse("relu6")


# --- precision config


def test_precision_config_validation():
    PrecisionConfig(8, 8, "hrelu")
    with pytest.raises(PrecisionError):
        PrecisionConfig(9, 2)
    with pytest.raises(PrecisionError):
        PrecisionConfig(2, 0)
    with pytest.raises(ConfigError):
        PrecisionConfig(1, 2, "hrelu")
    assert PrecisionConfig(2, 2).scale == pytest.approx(1 / 9)


# --- quantizer


def test_two_bit_levels_table():
    assert level_values(2).tolist() == pytest.approx([-1, -1 / 3, 1 / 3, 1])
    got = sorted({quantize_linear(x, 2).value for x in np.linspace(-1, 1, 1001)})
    assert got == pytest.approx([-1, -1 / 3, 1 / 3, 1])


@pytest.mark.parametrize("k", range(1, 9))
def test_endpoints(k):
    assert quantize_linear(1.0, k).n == 2**k - 1
    assert quantize_linear(-1.0, k).n == -(2**k - 1)


def test_quantize_point_example():
    # round(3 * 0.6) = 2 -> 2 * (2/3 - 1/2) = 1/3
    q = quantize_linear(0.2, 2)
    assert q.n == 1
    assert q.value == pytest.approx(1 / 3)


def test_quantize_clamps_and_rejects_bad_bits():
    assert quantize_linear(5.0, 3).n == 7
    assert quantize_linear(-5.0, 3).n == -7
    with pytest.raises(PrecisionError):
        quantize_linear(0.0, 9)
    with pytest.raises(DomainError):
        quantize_linear(float("nan"), 2)


def test_ties_round_away_from_zero_in_code_space():
    # x = 0 sits midway between codes 1 and 2 for k=2; the larger code wins
    assert quantize_linear(0.0, 2).n == 1
    assert quantize_linear(0.0, 1).n == 1


def test_quantized_value_checks():
    with pytest.raises(RangeError):
        QuantizedValue(2, 3)
    with pytest.raises(RangeError):
        QuantizedValue(9, 3)


@given(unit, bits)
def test_quantizer_matches_exact_oracle(x, k):
    den = 2**k - 1
    # non-dyadic thresholds like 2/3 are only representable to within an ulp
    if any(abs(x - (2 * j - 1 - den) / den) < 1e-12 for j in range(1, den + 1) if 2 * j - 1 != den):
        return
    assert Fraction(quantize_linear(x, k).n, 2**k - 1) == q_oracle(x, k)


# --- encoders


def test_encode_examples():
    assert encode(1.0, 2) == (1, 1)
    assert encode(-1.0, 2) == (-1, -1)
    assert encode(0.2, 2) == (-1, 1)
    assert encode(-1 / 3, 2) == (1, -1)


def test_decode_examples():
    assert decode([1, 1]) == 1.0
    assert decode([-1, 1]) == pytest.approx(1 / 3)
    assert decode([1, -1]) == pytest.approx(-1 / 3)
    assert decode([1]) == 1.0 and decode([-1]) == -1.0


def test_trig_examples():
    assert encode_trig2(1.0) == (1, 1)
    assert encode_trig2(1 / 3) == (-1, 1)
    assert encode_trig2(-1.0) == (-1, -1)
    assert encode_trig2(-1 / 3) == (1, -1)


@given(unit, bits)
def test_round_trip_and_error_bound(x, m):
    d = decode(encode(x, m))
    assert d == quantize_linear(x, m).value
    assert abs(d - x) <= 1 / (2**m - 1) + 1e-15


@given(unit, unit, bits)
def test_monotone(x, y, m):
    lo, hi = sorted((x, y))
    assert decode(encode(lo, m)) <= decode(encode(hi, m))


@given(unit)
def test_trig_agrees_away_from_breaks(x):
    if min(abs(x - b) for b in (-2 / 3, 0.0, 2 / 3)) <= 1e-9:
        return
    assert encode_trig2(x) == encode(x, 2)


@given(st.floats(-10, 10, allow_nan=False))
def test_one_bit_is_binarize(x):
    expected = 1 if max(-1.0, min(1.0, x)) >= 0 else -1
    assert encode(x, 1) == (expected,)
    assert int(binarize(x)) == expected
    if -1 <= x <= 1 and x != 0:
        assert encode_trig1(x) == expected


@pytest.mark.parametrize("m", range(1, 9))
def test_levels_are_odd_multiples(m):
    den = 2**m - 1
    vals = quantize_values(np.linspace(-1, 1, 20_001), m)
    assert np.array_equal(np.unique(vals), np.arange(-den, den + 1, 2) / den)
    assert encode_array(np.zeros(3), m).shape == (3, m)


# --- {0,1} code


def test_encode_zero_one():
    assert encode_zero_one(5, 3) == (1, 0, 1)
    assert encode_zero_one(0, 3) == (0, 0, 0)
    assert encode_zero_one(7, 3) == (1, 1, 1)
    with pytest.raises(RangeError):
        encode_zero_one(8, 3)
    with pytest.raises(RangeError):
        encode_zero_one(-1, 3)
