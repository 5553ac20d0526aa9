from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, strategies as st

from hapm_accel.tensor_core import (ACC_FRAC, ACT_FMT, WEIGHT_FMT, AccumulatorOverflow, FixedPointFormat, Tensor3,
                                    Tensor4, bias_to_acc, check_accumulator, macc, quantize, quantize_codes,
                                    requantize_accumulator, shift_round_half_even)

finite = st.floats(min_value=-1e3, max_value=1e3, allow_nan=False)


def acc_of(value):
    """Accumulator code for an exactly representable real value."""
    f = Fraction(value) * 2**ACC_FRAC
    assert f.denominator == 1
    return int(f)


def test_format_ranges():
    assert (WEIGHT_FMT.min_value, WEIGHT_FMT.max_value, WEIGHT_FMT.step) == (-4.0, 3.96875, 0.03125)
    assert (ACT_FMT.min_value, ACT_FMT.max_value, ACT_FMT.step) == (-8.0, 7.9375, 0.0625)
    assert WEIGHT_FMT.name == "Q2.5" and ACT_FMT.name == "Q3.4"
    assert FixedPointFormat.parse("Q3.4") == ACT_FMT


@pytest.mark.parametrize("bad", [(8, 0), (8, 8), (0, 0)])
def test_format_rejects_bad_widths(bad):
    with pytest.raises(ValueError):
        FixedPointFormat(*bad)


def test_quantize_examples():
    assert quantize(0.0, WEIGHT_FMT) == 0.0
    assert quantize(4.0, WEIGHT_FMT) == 3.96875
    assert quantize(0.50, ACT_FMT) == 0.5
    assert quantize(0.01, WEIGHT_FMT) == 0.0
    assert quantize(-100.0, ACT_FMT) == -8.0


def nearest_code_oracle(v, fmt):
    """Exhaustive search over all codes, ties to the even code."""
    best = None
    for code in range(fmt.min_code, fmt.max_code + 1):
        d = abs(Fraction(code, 2**fmt.frac_bits) - Fraction(v))
        key = (d, code % 2)
        if best is None or key < best[0]:
            best = (key, code)
    return best[1]


@given(st.floats(min_value=-10, max_value=10, allow_nan=False))
def test_quantize_matches_exhaustive_search(v):
    for fmt in (WEIGHT_FMT, ACT_FMT):
        assert quantize_codes(v, fmt) == nearest_code_oracle(v, fmt)


@given(finite)
def test_quantize_idempotent(v):
    for fmt in (WEIGHT_FMT, ACT_FMT):
        q = quantize(v, fmt)
        assert quantize(q, fmt) == q


@given(finite, finite)
def test_quantize_monotone(a, b):
    lo, hi = sorted((a, b))
    assert quantize(lo, ACT_FMT) <= quantize(hi, ACT_FMT)


def test_requantize_examples():
    assert requantize_accumulator(acc_of(1.0)) * ACT_FMT.step == 1.0
    assert requantize_accumulator(acc_of(9.0)) * ACT_FMT.step == 7.9375
    assert requantize_accumulator(acc_of(0.03125)) == 0
    assert requantize_accumulator(acc_of(0.09375)) == 2  # 1.5 LSB -> 2 (even)
    assert requantize_accumulator(acc_of(-0.03125)) == 0


@given(st.integers(-2**40, 2**40), st.integers(1, 20))
def test_shift_round_half_even_matches_fraction(raw, shift):
    assert int(shift_round_half_even(raw, shift)) == round(Fraction(raw, 2**shift))


def test_macc_examples():
    acc = 12345
    assert macc(0, 77, acc) == acc
    one_w, one_a = 32, 16
    assert macc(one_w, one_a, 0) == acc_of(1.0)
    acc = 0
    for _ in range(9):
        acc = macc(8, 8, acc)  # 0.25 * 0.5
    assert Fraction(acc, 2**ACC_FRAC) == Fraction(9, 8)


@given(st.lists(st.integers(-128, 127), min_size=1, max_size=100), st.integers(0, 2**16))
def test_zero_kernel_leaves_accumulator(acts, acc):
    out = acc
    for a in acts:
        out = macc(0, a, out)
    assert out == acc


def test_accumulator_overflow_detected():
    with pytest.raises(AccumulatorOverflow):
        check_accumulator(np.array([2**31]))
    with pytest.raises(AccumulatorOverflow):
        macc(127, 127, 2**31 - 100)


def test_bias_alignment():
    assert int(bias_to_acc(32)) == acc_of(1.0)


def test_tensor_memory_order_and_immutability(rng):
    codes = rng.integers(-128, 128, (3, 3, 2))
    t = Tensor3(codes)
    assert t.shape == (3, 3, 2) and t.size_x == 3 and t.channels == 2
    assert t.codes[1, 2, 0] == codes[1, 2, 0]
    with pytest.raises(ValueError):
        t.codes[0, 0, 0] = 1
    with pytest.raises(ValueError):
        Tensor3(np.full((1, 1, 1), 200))
    assert Tensor3.from_real(np.full((1, 1, 1), 0.5)).codes[0, 0, 0] == 8
    assert t.padded(1).shape == (5, 5, 2) and t.padded(1).codes[0].sum() == 0
    k = Tensor4(rng.integers(-128, 128, (3, 3, 2, 4)))
    assert (k.k_x, k.k_y, k.in_channels, k.out_channels) == (3, 3, 2, 4)
    with pytest.raises(ValueError):
        Tensor4(np.zeros((3, 3, 2)))
