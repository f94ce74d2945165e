import numpy as np
import pytest

from src.core.bf16 import bf16_round
from src.core.errors import ConfigurationError
from src.core.mxfp_core import MxTensor
from src.services.attention_digital import (
    FlashState,
    SystolicGeometry,
    attention_forward,
    flash_softmax_tile,
    reference_attention,
    scalar_gemm_fold,
    softmax_scale,
    streaming_matches,
    systolic_gemm_mx,
)


def qkv(rng, n_tokens, heads=1, d_k=32, v_offset=0.0):
    width = heads * d_k
    q = MxTensor.quantize(rng.normal(size=(n_tokens, width)))
    k = MxTensor.quantize(rng.normal(size=(n_tokens, width)))
    v = v_offset + rng.normal(size=(n_tokens, width)) * (0.25 if v_offset else 1.0)
    return q, k, v


def test_systolic_gemm_matches_scalar_fold(rng):
    a = MxTensor.quantize(rng.normal(size=(4, 32)))
    b = MxTensor.quantize(rng.normal(size=(32, 4)), "col")
    expected = scalar_gemm_fold(a.dequantize(), b.dequantize())
    np.testing.assert_array_equal(systolic_gemm_mx(a, b), expected)


def test_tile_order_and_geometry_do_not_change_values(rng):
    a = MxTensor.quantize(rng.normal(size=(70, 64)))
    b = MxTensor.quantize(rng.normal(size=(64, 100)), "col")
    base = systolic_gemm_mx(a, b)
    np.testing.assert_array_equal(systolic_gemm_mx(a, b, tile_order="col"), base)
    small = SystolicGeometry(pe_rows=8, pe_cols=32)
    np.testing.assert_array_equal(systolic_gemm_mx(a, b, geometry=small), base)


def test_gemm_rejects_wrong_orientation(rng):
    a = MxTensor.quantize(rng.normal(size=(4, 32)))
    with pytest.raises(ConfigurationError):
        systolic_gemm_mx(a, a)
    with pytest.raises(ConfigurationError):
        SystolicGeometry(pe_cols=48)


def test_softmax_scale_is_bf16():
    scale = softmax_scale(64)
    assert scale == bf16_round(scale)
    assert abs(scale - 1.4426950408889634 / 8) < 2**-10


def test_flash_tile_keeps_integral_running_max(rng):
    scores = np.asarray(bf16_round(rng.normal(size=(3, 64)) * 4))
    scale = softmax_scale(32)
    state = FlashState.empty(3)
    p, p_mx, state = flash_softmax_tile(scores[:, :32], state, scale)
    assert np.all(state.running_max == np.round(state.running_max))
    assert np.all(p <= 1.0)
    _, _, state = flash_softmax_tile(scores[:, 32:], state, scale)
    assert state.tiles == 2
    assert np.all(np.log2(state.correction) == np.round(np.log2(state.correction)))


@pytest.mark.parametrize("n_tokens", [1, 32, 64, 100, 197])
def test_streaming_equals_one_shot(rng, n_tokens):
    q, k, v = qkv(rng, n_tokens)
    streamed = attention_forward(q, k, v, heads=1, d_k=32, streaming=True)
    one_shot = attention_forward(q, k, v, heads=1, d_k=32, streaming=False)
    assert streaming_matches(streamed.output, one_shot.output, strict=True)
    assert streaming_matches(streamed.output, one_shot.output, strict=False, max_ulps=8)


def test_matches_double_precision_attention(rng):
    q, k, v = qkv(rng, 64, v_offset=1.0)
    result = attention_forward(q, k, v, heads=1, d_k=32)
    v_seen = MxTensor.quantize(v, "col").dequantize()
    expected = reference_attention(q.dequantize(), k.dequantize(), v_seen, heads=1, d_k=32)
    error = np.linalg.norm(result.output - expected) / np.linalg.norm(expected)
    assert error < 2**-4


def test_heads_are_independent(rng):
    q, k, v = qkv(rng, 40, heads=2)
    both = attention_forward(q, k, v, heads=2, d_k=32).output
    first = attention_forward(q.column_slice(0, 32), k.column_slice(0, 32), v[:, :32], heads=1, d_k=32).output
    np.testing.assert_array_equal(both[:, :32], first)


def test_output_mx_is_row_requantized(rng):
    q, k, v = qkv(rng, 16)
    result = attention_forward(q, k, v, heads=1, d_k=32)
    assert result.output_mx == MxTensor.quantize(result.output)
    assert len(result.row_sums) == 1 and result.row_sums[0].shape == (16,)


def test_layout_errors(rng):
    q, k, v = qkv(rng, 8, heads=2)
    with pytest.raises(ConfigurationError):
        attention_forward(q, k, v, heads=1, d_k=32)
    with pytest.raises(ConfigurationError):
        attention_forward(q, k, v[:4], heads=2, d_k=32)


def test_dump_writes_per_head_matrices(tmp_path, rng):
    q, k, v = qkv(rng, 8)
    attention_forward(q, k, v, heads=1, d_k=32, dump_dir=tmp_path)
    assert sorted(p.name for p in tmp_path.iterdir()) == ["head00_O.f64m", "head00_P.f64m", "head00_S.f64m"]
