import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from src.core.bf16 import bf16_bits, bf16_round
from src.core.diagnostics import Diagnostics
from src.core.errors import ConfigurationError
from src.core.mxfp_core import (
    BLOCK_SIZE,
    E2M1_VALUES,
    MxBlock,
    MxTensor,
    bf16_to_mx_block,
    dequantize_block,
    exact_dyadic_sum,
    fp4_decode,
    fp4_encode,
    int5_decode,
    int5_encode,
    mx_to_bf16,
    mx_to_bf16_values,
    pe_product_pack,
    quantize_block,
    shared_scale_codes,
)

ALL_CODES = np.arange(16, dtype=np.uint8)


def test_decode_enumerates_e2m1():
    np.testing.assert_array_equal(fp4_decode(ALL_CODES), E2M1_VALUES)
    assert fp4_decode(0b1001) == -0.5
    assert fp4_decode(0b0111) == 6.0


def test_encode_inverts_decode_except_negative_zero():
    codes = fp4_encode(fp4_decode(ALL_CODES))
    expected = ALL_CODES.copy()
    expected[8] = 0
    np.testing.assert_array_equal(codes, expected)


@pytest.mark.parametrize(
    "value, code",
    [(0.25, 0b0000), (0.75, 0b0010), (1.25, 0b0010), (1.75, 0b0100), (2.5, 0b0100),
     (3.5, 0b0110), (5.0, 0b0110), (-0.5, 0b1001), (-0.1, 0b0000)],
)
def test_encode_ties_to_even_mantissa(value, code):
    assert int(fp4_encode(value)) == code


def test_encode_saturates():
    diagnostics = Diagnostics()
    assert int(fp4_encode(7.0, diagnostics)) == 0b0111
    assert int(fp4_encode(-100.0, diagnostics)) == 0b1111
    assert diagnostics.fp4_saturations == 2


@given(st.lists(st.floats(-1e6, 1e6, allow_nan=False), min_size=BLOCK_SIZE, max_size=BLOCK_SIZE))
@settings(max_examples=200)
def test_quantize_block_error_is_bounded_by_element_grid(values):
    block = quantize_block(values)
    scale = 2.0 ** block.scale_exponent
    error = np.abs(dequantize_block(block) - np.asarray(values))
    # Worst case is a block maximum just under 8 saturating to 6
    assert np.all(error <= 2 * scale)


def test_block_scale_examples():
    block = quantize_block(np.full(BLOCK_SIZE, 1.0))
    assert block.scale_exponent == -2
    np.testing.assert_array_equal(fp4_decode(block.elements), np.full(BLOCK_SIZE, 4.0))
    np.testing.assert_array_equal(dequantize_block(block), np.ones(BLOCK_SIZE))

    values = np.zeros(BLOCK_SIZE)
    values[3] = 96.0
    assert quantize_block(values).scale_exponent == 4

    zero = quantize_block(np.zeros(BLOCK_SIZE))
    assert zero.scale == 127
    assert not np.any(zero.elements)


def test_shared_scale_is_floor_log2_minus_two():
    blocks = np.array([[3.9] + [0.0] * 31, [4.0] + [0.0] * 31, [0.01] + [0.0] * 31])
    np.testing.assert_array_equal(shared_scale_codes(blocks).astype(int) - 127, [-1, 0, -9])


def test_wrong_block_length_is_rejected():
    with pytest.raises(ConfigurationError):
        quantize_block(np.ones(16))


def test_truncating_quantizer_drops_low_mantissa():
    values = np.zeros(BLOCK_SIZE)
    values[0] = 4.0
    values[1] = 1.4
    nearest = quantize_block(values)
    truncated = bf16_to_mx_block(values)
    assert nearest.scale == truncated.scale == 127
    assert fp4_decode(nearest.elements[1]) == 1.5
    assert fp4_decode(truncated.elements[1]) == 1.0


def test_truncating_quantizer_is_exact_on_representable_blocks(rng):
    codes = rng.integers(0, 16, size=BLOCK_SIZE).astype(np.uint8)
    codes[0] = 0b0111
    values = np.ldexp(fp4_decode(codes), 3)
    assert bf16_to_mx_block(values) == quantize_block(values)


def test_block_equality_ignores_high_nibble():
    a = MxBlock(elements=np.full(BLOCK_SIZE, 0x13, dtype=np.uint8), scale=120)
    b = MxBlock(elements=np.full(BLOCK_SIZE, 0x03, dtype=np.uint8), scale=120)
    assert a == b


# ------------------------------------------------------------------ conversions

def test_mx_to_bf16_matches_real_value_for_every_code_and_scale():
    for scale in range(1, 251):
        values = mx_to_bf16_values(ALL_CODES, np.full(16, scale))
        expected = fp4_decode(ALL_CODES) * 2.0 ** (scale - 127) + 0.0
        np.testing.assert_array_equal(values, expected)


def test_mx_to_bf16_examples():
    assert int(mx_to_bf16(0b0111, 127 + 10)) == int(bf16_bits(6144.0))
    assert int(mx_to_bf16(0b1000, 140)) == 0
    diagnostics = Diagnostics()
    mx_to_bf16(0b0111, 254, diagnostics)
    assert diagnostics.conversion_saturations == 1


def test_pe_product_is_exact_for_all_code_pairs():
    x, w = np.meshgrid(ALL_CODES, ALL_CODES, indexing="ij")
    bits = pe_product_pack(x, w, 127, 127)
    # + 0.0 turns the -0 of a signed zero product into +0
    expected = bf16_bits(fp4_decode(x) * fp4_decode(w) + 0.0)
    np.testing.assert_array_equal(bits, expected)
    assert bits.size == 256


@given(st.integers(100, 150), st.integers(100, 150))
@settings(max_examples=100)
def test_pe_product_scale_sweep(scale_x, scale_w):
    x, w = np.meshgrid(ALL_CODES, ALL_CODES, indexing="ij")
    bits = pe_product_pack(x, w, scale_x, scale_w)
    exact = fp4_decode(x) * fp4_decode(w) * 2.0 ** (scale_x + scale_w - 254) + 0.0
    np.testing.assert_array_equal(bits, bf16_bits(bf16_round(exact)))


def test_pe_product_examples():
    assert int(pe_product_pack(0b0011, 0b0011, 127, 127)) == int(bf16_bits(2.25))
    assert int(pe_product_pack(0b0111, 0b0111, 129, 128)) == int(bf16_bits(288.0))


# ------------------------------------------------------------------ INT5

def test_int5_ranges_and_inverse():
    weights = int5_encode(ALL_CODES, "weight")
    activations = int5_encode(ALL_CODES, "activation")
    assert weights.min() == 0 and weights.max() == 24
    assert activations.min() == -12 and activations.max() == 12
    expected = ALL_CODES.copy()
    expected[8] = 0
    np.testing.assert_array_equal(int5_decode(weights, "weight"), expected)
    np.testing.assert_array_equal(int5_decode(activations, "activation"), expected)


def test_int5_rejects_unknown_kind():
    with pytest.raises(ConfigurationError):
        int5_encode(ALL_CODES, "bias")


# ------------------------------------------------------------------ exact sums

def test_exact_dyadic_sum():
    assert exact_dyadic_sum([3, -1], [2, 0]) == 11.0
    assert exact_dyadic_sum([64, 8], [-1, -3]) == 33.0
    assert exact_dyadic_sum([0, 0], [5, 9]) == 0.0
    # Spans beyond int64 fall back to arbitrary precision and round once
    assert exact_dyadic_sum([1, 1], [0, -1100]) == 1.0
    assert exact_dyadic_sum([1, 1], [600, 0]) == 2.0**600


def test_exact_dyadic_sum_rounds_once(rng):
    values = rng.integers(-24 * 24, 24 * 24, size=(8, 40))
    exponents = rng.integers(-20, 20, size=(8, 40))
    total = exact_dyadic_sum(values, exponents)
    expected = [float(sum(int(v) * 2**int(e + 20) for v, e in zip(row_v, row_e))) / 2**20
                for row_v, row_e in zip(values, exponents)]
    np.testing.assert_array_equal(total, expected)


# ------------------------------------------------------------------ tensors

@pytest.mark.parametrize("orientation", ["row", "col"])
def test_tensor_requantization_is_idempotent(rng, orientation):
    matrix = rng.normal(size=(7, 70)) * np.exp2(rng.integers(-4, 5, size=(7, 1)))
    once = MxTensor.quantize(matrix, orientation)
    twice = MxTensor.quantize(once.dequantize(), orientation)
    assert once == twice
    assert once.dequantize().shape == (7, 70)


def test_tensor_layouts(rng):
    matrix = rng.normal(size=(5, 40))
    row = MxTensor.quantize(matrix, "row")
    col = MxTensor.quantize(matrix, "col")
    assert row.codes.shape == (5, 64) and row.scales.shape == (5, 2)
    assert col.codes.shape == (32, 40) and col.scales.shape == (1, 40)
    assert row.num_blocks == 10
    assert row.reduction_length == 64
    np.testing.assert_array_equal(row.padded_values()[:, 40:], 0.0)


def test_transpose_is_exact(rng):
    tensor = MxTensor.quantize(rng.normal(size=(6, 64)), "row")
    flipped = tensor.transpose()
    assert flipped.orientation == "col"
    np.testing.assert_array_equal(flipped.dequantize(), tensor.dequantize().T)
    assert flipped.transpose() == tensor


def test_column_slice_and_take_rows(rng):
    tensor = MxTensor.quantize(rng.normal(size=(4, 96)), "row")
    middle = tensor.column_slice(32, 64)
    np.testing.assert_array_equal(middle.dequantize(), tensor.dequantize()[:, 32:64])
    picked = tensor.take_rows([2, 0])
    np.testing.assert_array_equal(picked.dequantize(), tensor.dequantize()[[2, 0]])
    with pytest.raises(ConfigurationError):
        tensor.column_slice(16, 48)


def test_block_accessor(rng):
    tensor = MxTensor.quantize(rng.normal(size=(64, 3)), "col")
    block = tensor.block(1, 1)
    np.testing.assert_array_equal(dequantize_block(block), tensor.dequantize()[32:64, 1])


def test_quantize_rejects_bad_arguments():
    with pytest.raises(ConfigurationError):
        MxTensor.quantize(np.ones(32))
    with pytest.raises(ConfigurationError):
        MxTensor.quantize(np.ones((2, 32)), orientation="diag")
    with pytest.raises(ConfigurationError):
        MxTensor.quantize(np.ones((2, 32)), rounding="stochastic")
