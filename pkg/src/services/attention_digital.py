"""Digital Attention - MXFP4 systolic GEMM and streaming softmax of the attention stage

The softmax runs base-2: log2(e)/sqrt(d_k) is folded into one BF16 scale
and the running row maximum is kept integral, so every rescale of earlier
tiles is an exact power of two. Emitted probabilities are block-quantized
along the key axis before they meet V, and the running sum accumulates
those quantized values so the final division normalises exactly what was
multiplied into V.
"""

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from src.core.bf16 import BF16_MAX, bf16_div, bf16_mul, bf16_round, bf16_ulp_distance
from src.core.errors import ConfigurationError
from src.core.mxfp_core import BLOCK_SIZE, MxTensor, pe_product_values, requantize_rows
from src.utils.log import get_logger

logger = get_logger(__name__)

MASK_VALUE = -BF16_MAX
_POW2_FLOOR = -1100


@dataclass(frozen=True)
class SystolicGeometry:
    """Output-stationary array shape; affects timing only, never values"""

    pe_rows: int = 32
    pe_cols: int = 64
    reduction_tile: int = 64
    arrays_per_stage: int = 2

    def __post_init__(self):
        if self.pe_rows <= 0 or self.pe_cols <= 0:
            raise ConfigurationError("systolic array dimensions must be positive")
        if self.pe_cols % BLOCK_SIZE:
            raise ConfigurationError(
                f"pe_cols must be a multiple of {BLOCK_SIZE} so key tiles align with MX blocks"
            )

    def output_tiles(self, n_rows, n_cols):
        return math.ceil(n_rows / self.pe_rows) * math.ceil(n_cols / self.pe_cols)


# ------------------------------------------------------------------ GEMM

def _tile_spans(length, step):
    return [(start, min(start + step, length)) for start in range(0, length, step)]


def systolic_gemm_mx(a, b, acc=None, geometry=None, tile_order="row", diagnostics=None):
    """
    Output-stationary MXFP4 GEMM with BF16 accumulation.

    Every output element folds its products in strictly ascending reduction
    index: acc = bf16(acc + pe_product(a[i, k], b[k, j])).

    Args:
        a: MxTensor (N x K), row-blocked on the reduction axis
        b: MxTensor (K x M), column-blocked on the reduction axis
        acc: optional BF16 (N x M) partial to continue folding into
        geometry: SystolicGeometry used for output tiling
        tile_order: "row" or "col" traversal of output tiles

    Returns:
        BF16 matrix (N x M) as float64
    """
    if a.orientation != "row" or b.orientation != "col":
        raise ConfigurationError("systolic GEMM needs A row-blocked and B column-blocked")
    if a.cols != b.rows:
        raise ConfigurationError(f"reduction mismatch: A has {a.cols} columns, B has {b.rows} rows")
    geometry = geometry or SystolicGeometry()
    a_values = a.padded_values()[:, : a.cols]
    b_values = b.padded_values()[: b.rows, :]
    out = np.zeros((a.rows, b.cols)) if acc is None else np.array(acc, dtype=np.float64)

    row_tiles = _tile_spans(a.rows, geometry.pe_rows)
    col_tiles = _tile_spans(b.cols, geometry.pe_cols)
    if tile_order == "row":
        tiles = [(r, c) for r in row_tiles for c in col_tiles]
    else:
        tiles = [(r, c) for c in col_tiles for r in row_tiles]

    for (r0, r1), (c0, c1) in tiles:
        tile = out[r0:r1, c0:c1]
        for k in range(a.cols):
            product = pe_product_values(a_values[r0:r1, k, None], b_values[None, k, c0:c1], diagnostics)
            tile = np.asarray(bf16_round(tile + product, diagnostics))
        out[r0:r1, c0:c1] = tile
    return out


def scalar_gemm_fold(a_values, b_values):
    """Element-by-element BF16 fold over dequantized operands, for cross-checks"""
    n, k_len = a_values.shape
    m = b_values.shape[1]
    out = np.zeros((n, m))
    for i in range(n):
        for j in range(m):
            acc = 0.0
            for k in range(k_len):
                acc = bf16_round(acc + bf16_round(a_values[i, k] * b_values[k, j]))
            out[i, j] = acc
    return out


# ------------------------------------------------------------------ softmax

@dataclass
class FlashState:
    """Running integer maximum, running BF16 sum and the last tile's correction"""

    running_max: np.ndarray
    running_sum: np.ndarray
    correction: np.ndarray
    tiles: int = 0

    @classmethod
    def empty(cls, rows):
        return cls(
            running_max=np.full(rows, MASK_VALUE),
            running_sum=np.zeros(rows),
            correction=np.zeros(rows),
        )


def softmax_scale(d_k):
    """BF16 constant turning raw scores into base-2 exponents"""
    return bf16_round(math.log2(math.e) / math.sqrt(d_k))


def _pow2(exponent):
    return np.ldexp(1.0, np.maximum(exponent, _POW2_FLOOR).astype(np.int64))


def _exp2_shifted(y, row_max, diagnostics=None):
    """bf16(2^(y - m)) with y - m split into an exact integer and fractional part"""
    shifted = y - row_max[:, None]
    whole = np.floor(shifted)
    fraction = shifted - whole
    return np.asarray(
        bf16_round(np.ldexp(np.exp2(fraction), np.maximum(whole, _POW2_FLOOR).astype(np.int64)), diagnostics)
    )


def flash_softmax_tile(s_tile, state, scale, valid=None, diagnostics=None):
    """
    Consume one key tile of raw scores.

    Args:
        s_tile: BF16 scores (rows x tile width)
        state: FlashState from the previous tile (or FlashState.empty)
        scale: BF16 base-2 scale from softmax_scale
        valid: optional boolean mask of real (non-padding) keys

    Returns:
        (p_tile, p_mx, new_state): unnormalised BF16 probabilities, their
        key-axis MXFP4 form and the updated state whose correction factor
        rescales earlier SV partials
    """
    y = np.asarray(bf16_mul(s_tile, scale, diagnostics))
    if valid is not None:
        y = np.where(valid, y, MASK_VALUE)
    tile_max = np.ceil(np.max(y, axis=1))
    new_max = np.maximum(state.running_max, tile_max)
    empty = state.running_max == MASK_VALUE
    correction = np.where(empty, 0.0, _pow2(np.where(empty, 0.0, state.running_max - new_max)))

    p_tile = _exp2_shifted(y, new_max, diagnostics)
    if valid is not None:
        p_tile = np.where(valid, p_tile, 0.0)
    p_mx = MxTensor.quantize(p_tile, "row", "nearest", diagnostics)

    running = np.asarray(bf16_round(state.running_sum * correction, diagnostics))
    quantized = p_mx.dequantize()
    for j in range(quantized.shape[1]):
        running = np.asarray(bf16_round(running + quantized[:, j], diagnostics))

    return p_tile, p_mx, FlashState(
        running_max=new_max,
        running_sum=running,
        correction=correction,
        tiles=state.tiles + 1,
    )


# ------------------------------------------------------------------ attention

@dataclass
class AttentionResult:
    output: np.ndarray
    output_mx: MxTensor
    row_sums: list
    row_maxima: list


def _v_values(v):
    values = getattr(v, "values", None)
    if callable(values):
        return np.asarray(values(), dtype=np.float64)
    return np.asarray(v, dtype=np.float64)


def _pad_rows(matrix, rows):
    if matrix.shape[0] == rows:
        return matrix
    padded = np.zeros((rows, matrix.shape[1]))
    padded[: matrix.shape[0]] = matrix
    return padded


def _head_streaming(s, v_head, scale, width, geometry, diagnostics):
    n_queries, n_keys = s.shape
    state = FlashState.empty(n_queries)
    acc = np.zeros((n_queries, v_head.shape[1]))
    probabilities = np.zeros((n_queries, n_keys))
    for start in range(0, n_keys, width):
        stop = min(start + width, n_keys)
        s_tile = np.full((n_queries, width), 0.0)
        s_tile[:, : stop - start] = s[:, start:stop]
        valid = np.zeros((n_queries, width), dtype=bool)
        valid[:, : stop - start] = True
        v_mx = MxTensor.quantize(_pad_rows(v_head[start:stop], width), "col", "nearest", diagnostics)
        p_tile, p_mx, state = flash_softmax_tile(s_tile, state, scale, valid, diagnostics)
        probabilities[:, start:stop] = p_tile[:, : stop - start]
        acc = np.asarray(bf16_round(acc * state.correction[:, None], diagnostics))
        acc = systolic_gemm_mx(p_mx, v_mx, acc=acc, geometry=geometry, diagnostics=diagnostics)
    return acc, state, probabilities


def attention_forward(q, k, v, heads, d_k, geometry=None, streaming=True,
                      diagnostics=None, dump_dir: Optional[Path] = None):
    """
    Multi-head attention of the digital stage.

    Args:
        q, k: MxTensor (N x heads*d_k), row-blocked along d_k
        v: raw V projection (anything with values(), or an N x heads*d_k
           matrix); it is block-quantized column-wise per key tile
        heads, d_k: head layout
        geometry: SystolicGeometry; its pe_cols is the key tile width
        streaming: flash-style tiles when True, one tile spanning every key
            otherwise

    Returns:
        AttentionResult with the BF16 output and its row-blocked MXFP4 form
    """
    geometry = geometry or SystolicGeometry()
    width_model = heads * d_k
    if d_k % BLOCK_SIZE:
        raise ConfigurationError(f"d_k={d_k} must be a multiple of {BLOCK_SIZE}")
    if q.cols != width_model or k.cols != width_model:
        raise ConfigurationError(
            f"head layout {heads}x{d_k} does not match Q/K widths {q.cols}/{k.cols}"
        )
    if q.rows != k.rows:
        raise ConfigurationError(f"Q has {q.rows} tokens, K has {k.rows}")
    v_values = _v_values(v)
    if v_values.shape != (k.rows, width_model):
        raise ConfigurationError(f"V shape {v_values.shape} does not match {(k.rows, width_model)}")

    n_tokens = q.rows
    scale = softmax_scale(d_k)
    if streaming:
        width = geometry.pe_cols
    else:
        width = max(-(-n_tokens // BLOCK_SIZE) * BLOCK_SIZE, BLOCK_SIZE)

    outputs, sums, maxima = [], [], []
    for h in range(heads):
        cols = (h * d_k, (h + 1) * d_k)
        q_head = q.column_slice(*cols)
        k_head_t = k.column_slice(*cols).transpose()
        s = systolic_gemm_mx(q_head, k_head_t, geometry=geometry, diagnostics=diagnostics)
        acc, state, p = _head_streaming(s, v_values[:, cols[0]: cols[1]], scale, width, geometry, diagnostics)
        o_head = np.asarray(bf16_div(acc, state.running_sum[:, None], diagnostics))
        outputs.append(o_head)
        sums.append(state.running_sum)
        maxima.append(state.running_max)
        if dump_dir is not None:
            _dump_head(dump_dir, h, s, p, o_head)

    output = np.concatenate(outputs, axis=1)
    logger.debug(f"attention: N={n_tokens}, heads={heads}, d_k={d_k}, tile width={width}")
    return AttentionResult(
        output=output,
        output_mx=requantize_rows(output, diagnostics),
        row_sums=sums,
        row_maxima=maxima,
    )


def _dump_head(dump_dir, head, s, p, o):
    from src.api.tensor_files import write_f64m

    dump_dir = Path(dump_dir)
    dump_dir.mkdir(parents=True, exist_ok=True)
    write_f64m(dump_dir / f"head{head:02d}_S.f64m", s)
    write_f64m(dump_dir / f"head{head:02d}_P.f64m", p)
    write_f64m(dump_dir / f"head{head:02d}_O.f64m", o)


def streaming_matches(a, b, strict=True, max_ulps=8):
    """Compare two BF16 outputs bit-exactly or within an ulp budget"""
    a = np.asarray(a)
    b = np.asarray(b)
    if strict:
        return bool(np.array_equal(a, b))
    return bool(np.all(bf16_ulp_distance(a, b) <= max_ulps))


def reference_attention(q, k, v, heads, d_k):
    """Double-precision softmax(QK^T / sqrt(d_k)) V per head"""
    q = np.asarray(q, dtype=np.float64)
    k = np.asarray(k, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    out = np.empty_like(v)
    for h in range(heads):
        cols = slice(h * d_k, (h + 1) * d_k)
        s = q[:, cols] @ k[:, cols].T / math.sqrt(d_k)
        s -= s.max(axis=1, keepdims=True)
        p = np.exp(s)
        p /= p.sum(axis=1, keepdims=True)
        out[:, cols] = p @ v[:, cols]
    return out
