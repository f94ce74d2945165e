import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from src.core.bf16 import (
    BF16_MAX,
    BF16_MIN_SUBNORMAL,
    bf16_bits,
    bf16_fold_sum,
    bf16_from_bits,
    bf16_round,
    bf16_ulp_distance,
)
from src.core.diagnostics import Diagnostics

ml_dtypes = pytest.importorskip("ml_dtypes")

F32_BOUND = float(np.float32(3e38))
finite_f32 = st.floats(
    min_value=-F32_BOUND, max_value=F32_BOUND, allow_nan=False, allow_infinity=False, width=32
)


@given(x=finite_f32)
@settings(max_examples=500)
def test_round_matches_ml_dtypes(x):
    expected = float(np.float32(x).astype(ml_dtypes.bfloat16).astype(np.float64))
    assert bf16_round(x) == expected


def test_round_matches_ml_dtypes_on_random_bit_patterns(rng):
    bits = rng.integers(0, 2**32, size=200_000, dtype=np.uint64).astype(np.uint32)
    values = bits.view(np.float32)
    values = values[np.isfinite(values) & (np.abs(values) < 3e38)]
    expected = values.astype(ml_dtypes.bfloat16).astype(np.float64)
    np.testing.assert_array_equal(bf16_round(values.astype(np.float64)), expected)


def test_ties_go_to_even():
    assert bf16_round(1.0 + 2.0**-8) == 1.0
    assert bf16_round(1.0 + 3 * 2.0**-8) == 1.0 + 2.0**-6
    assert bf16_round(-(1.0 + 2.0**-8)) == -1.0


def test_subnormals_keep_their_step():
    assert bf16_round(BF16_MIN_SUBNORMAL) == BF16_MIN_SUBNORMAL
    assert bf16_round(0.4 * BF16_MIN_SUBNORMAL) == 0.0
    assert bf16_round(3 * BF16_MIN_SUBNORMAL) == 3 * BF16_MIN_SUBNORMAL


def test_saturation_is_counted():
    diagnostics = Diagnostics()
    out = bf16_round(np.array([1e39, -1e39, 1.0]), diagnostics)
    np.testing.assert_array_equal(out, [BF16_MAX, -BF16_MAX, 1.0])
    assert diagnostics.bf16_saturations == 2
    assert diagnostics.saturated


def test_bit_patterns():
    assert int(bf16_bits(1.0)) == 0x3F80
    assert int(bf16_bits(-2.0)) == 0xC000
    assert bf16_from_bits(0x3F80) == 1.0
    assert int(bf16_ulp_distance(1.0, 1.0 + 2.0**-7)) == 1
    assert int(bf16_ulp_distance(-1.0, 1.0)) == 2 * 0x3F80


def test_fold_sum_is_serial():
    # 1 + 2^-9 rounds back to 1 at every step of the fold
    values = np.concatenate([[1.0], np.full(256, 2.0**-9)])
    assert bf16_fold_sum(values) == 1.0
    assert bf16_fold_sum(values[::-1]) == 1.5
