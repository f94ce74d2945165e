"""MXFP Core - Bit-exact MXFP4 (E2M1 + E8M0) block numerics and conversions

Codes are carried as uint8 arrays (low nibble = FP4 code, S|EE|M), scales
as E8M0 codes (value 2^(code-127)). Functions are vectorised over numpy
arrays and keep no state.
"""

from dataclasses import dataclass

import numpy as np

from src.core.bf16 import BF16_MAX, bf16_from_bits, bf16_round
from src.core.diagnostics import bump
from src.core.errors import ConfigurationError

BLOCK_SIZE = 32
E8M0_BIAS = 127
ELEMENT_EMAX = 2
FP4_MAX = 6.0
WEIGHT_BIAS = 12
ZERO_SCALE_CODE = E8M0_BIAS

E2M1_VALUES = np.array(
    [0.0, 0.5, 1.0, 1.5, 2.0, 3.0, 4.0, 6.0,
     -0.0, -0.5, -1.0, -1.5, -2.0, -3.0, -4.0, -6.0]
)

# Midpoints between neighbouring non-negative E2M1 values
_MIDPOINTS = np.array([0.25, 0.75, 1.25, 1.75, 2.5, 3.5, 5.0])

ORIENTATIONS = ("row", "col")
ROUNDING_MODES = ("nearest", "truncate")


# ------------------------------------------------------------------ elements

def fp4_decode(codes):
    """Decode 4-bit E2M1 patterns; subnormal codes (E=00) decode to ±M·0.5"""
    return E2M1_VALUES[np.asarray(codes, dtype=np.uint8) & 0xF]


def fp4_encode(x, diagnostics=None):
    """
    Encode reals as the nearest E2M1 code.

    Ties go to the neighbour with an even mantissa bit, magnitudes beyond 6
    saturate to ±6 (counted as fp4_saturations) and -0 encodes as +0.
    """
    x = np.asarray(x, dtype=np.float64)
    magnitude = np.abs(x)
    below = np.searchsorted(_MIDPOINTS, magnitude, side="left")
    above = np.searchsorted(_MIDPOINTS, magnitude, side="right")
    # On an exact midpoint the two searches straddle it; keep the even index.
    index = np.where(below == above, below, np.where(below % 2 == 0, below, above))
    bump(diagnostics, "fp4_saturations", int(np.count_nonzero(magnitude > FP4_MAX)))
    negative = (x < 0) & (index > 0)
    return (index | np.where(negative, 8, 0)).astype(np.uint8)


def shared_scale_codes(blocks):
    """E8M0 code per block: floor(log2 max|v|) - 2, all-zero blocks get 2^0"""
    amax = np.max(np.abs(blocks), axis=-1)
    _, exp = np.frexp(amax)
    unbiased = exp.astype(np.int64) - 1 - ELEMENT_EMAX
    codes = np.clip(unbiased + E8M0_BIAS, 0, 255)
    return np.where(amax > 0, codes, ZERO_SCALE_CODE).astype(np.uint8)


def _truncate_encode(values, scale_codes, diagnostics=None):
    """Field-level BF16 -> E2M1 conversion with mantissa truncation"""
    bits = (
        np.asarray(values, dtype=np.float64).astype(np.float32).view(np.uint32) >> 16
    ).astype(np.int64)
    sign = (bits >> 15) & 1
    e_bf = (bits >> 7) & 0xFF
    m_bf = bits & 0x7F
    e_p = e_bf + 1 - np.asarray(scale_codes, dtype=np.int64)
    m_p = m_bf >> 6
    normal = (e_p >= 1) & (e_bf > 0)
    subnormal = (e_p == 0) & (e_bf > 0)
    saturated = normal & (e_p > 3)
    bump(diagnostics, "fp4_saturations", int(np.count_nonzero(saturated)))
    magnitude = np.where(
        normal,
        (np.minimum(e_p, 3) << 1) | np.where(saturated, 1, m_p),
        np.where(subnormal, 1, 0),
    )
    return (magnitude | np.where((sign == 1) & (magnitude > 0), 8, 0)).astype(np.uint8)


# ------------------------------------------------------------------ blocks

@dataclass(frozen=True)
class MxBlock:
    """32 E2M1 elements sharing one E8M0 scale"""

    elements: np.ndarray
    scale: int

    @property
    def scale_exponent(self):
        return int(self.scale) - E8M0_BIAS

    def __eq__(self, other):
        if not isinstance(other, MxBlock):
            return NotImplemented
        return int(self.scale) == int(other.scale) and np.array_equal(
            np.asarray(self.elements) & 0xF, np.asarray(other.elements) & 0xF
        )


def _as_block_values(v):
    v = np.asarray(v, dtype=np.float64)
    if v.shape != (BLOCK_SIZE,):
        raise ConfigurationError(f"MX blocks hold {BLOCK_SIZE} values, got shape {v.shape}")
    return v


def quantize_block(v, diagnostics=None):
    """Nearest-rounding MXFP4 quantization of one 32-element block"""
    v = _as_block_values(v)
    scale = int(shared_scale_codes(v))
    elements = fp4_encode(np.ldexp(v, -(scale - E8M0_BIAS)), diagnostics)
    return MxBlock(elements=elements, scale=scale)


def dequantize_block(block):
    return np.ldexp(fp4_decode(block.elements), block.scale_exponent)


def bf16_to_mx_block(v, diagnostics=None):
    """Hardware quantizer path: BF16 inputs, shared scale as quantize_block, truncated mantissas"""
    v = bf16_round(_as_block_values(v))
    scale = int(shared_scale_codes(v))
    return MxBlock(elements=_truncate_encode(v, scale, diagnostics), scale=scale)


# ------------------------------------------------------------------ conversions

def _pack_bf16(sign, e_bf, m_bf, exact_values, diagnostics):
    """Assemble BF16 bit patterns, saturating above range and rounding below it"""
    overflow = e_bf >= 255
    underflow = e_bf <= 0
    bump(diagnostics, "conversion_saturations", int(np.count_nonzero(overflow)))
    bits = (sign << 15) | (np.clip(e_bf, 0, 255) << 7) | m_bf
    bits = np.where(overflow, (sign << 15) | 0x7F7F, bits)
    if np.any(underflow):
        tiny = bf16_round(np.where(underflow, exact_values, 0.0))
        tiny_bits = (
            np.asarray(tiny, dtype=np.float32).view(np.uint32) >> 16
        ).astype(np.int64)
        bits = np.where(underflow, tiny_bits, bits)
    return bits


def mx_to_bf16(element, scale, diagnostics=None):
    """
    Field-level FP4 x E8M0 -> BF16 conversion.

    E_BF = E_X + E_P - 1 and M_BF = M_P << 6 for normal elements; the
    subnormal element 0.5 lands one binade below the scale. Zero elements
    return +0.

    Returns:
        uint16 array of BF16 bit patterns
    """
    codes = np.asarray(element, dtype=np.int64) & 0xF
    scale = np.asarray(scale, dtype=np.int64)
    sign = (codes >> 3) & 1
    e_p = (codes >> 1) & 3
    m_p = codes & 1
    zero = (codes & 7) == 0
    e_bf = np.where(e_p > 0, scale + e_p - 1, scale - 1)
    m_bf = np.where(e_p > 0, m_p << 6, 0)
    exact = np.ldexp(fp4_decode(codes), scale - E8M0_BIAS)
    bits = _pack_bf16(sign, e_bf, m_bf, exact, diagnostics)
    return np.where(zero, 0, bits).astype(np.uint16)


def mx_to_bf16_values(element, scale, diagnostics=None):
    return bf16_from_bits(mx_to_bf16(element, scale, diagnostics))


def pe_product_pack(x, w, scale_x, scale_w, diagnostics=None):
    """
    Processing-element product of two FP4 elements and their E8M0 scales as BF16.

    The significand product of two E2M1 values is one of 1, 1.5 or 2.25 and
    always fits the BF16 mantissa; a 2.25 product renormalises with a carry
    into the exponent.

    Returns:
        uint16 BF16 bit patterns
    """
    x = np.asarray(x, dtype=np.int64) & 0xF
    w = np.asarray(w, dtype=np.int64) & 0xF

    def fields(code):
        e_p = (code >> 1) & 3
        # effective unbiased exponent and significand in halves (1.0 -> 2)
        return np.where(e_p > 0, e_p - 1, -1), np.where(e_p > 0, 2 + (code & 1), 2)

    exp_x, sig_x = fields(x)
    exp_w, sig_w = fields(w)
    quarters = sig_x * sig_w
    carry = (quarters >= 8).astype(np.int64)
    m_bf = np.where(carry == 1, (quarters - 8) << 4, (quarters - 4) << 5)
    # Both scales carry the E8M0 bias; the BF16 field keeps only one of them.
    e_bf = (
        np.asarray(scale_x, dtype=np.int64) + np.asarray(scale_w, dtype=np.int64)
        - E8M0_BIAS + exp_x + exp_w + carry
    )
    sign = ((x >> 3) ^ (w >> 3)) & 1
    zero = ((x & 7) == 0) | ((w & 7) == 0)
    exact = (
        fp4_decode(x) * fp4_decode(w)
        * np.ldexp(1.0, np.asarray(scale_x, dtype=np.int64) + np.asarray(scale_w, dtype=np.int64) - 2 * E8M0_BIAS)
    )
    bits = _pack_bf16(sign, e_bf, m_bf, exact, diagnostics)
    return np.where(zero, 0, bits).astype(np.uint16)


def pe_product_values(a, b, diagnostics=None):
    """Value-level PE product of dequantized MXFP4 operands (exact, see pe_product_pack)"""
    return bf16_round(np.multiply(a, b), diagnostics)


# ------------------------------------------------------------------ INT5

def _element_codes(block_or_codes):
    if isinstance(block_or_codes, MxBlock):
        return block_or_codes.elements
    return block_or_codes


def int5_encode(block_or_codes, kind):
    """Lossless affine INT5 map: weights 2v+12 in [0,24], activations 2v in [-12,12]"""
    doubled = (2 * fp4_decode(_element_codes(block_or_codes))).astype(np.int64)
    if kind == "weight":
        return doubled + WEIGHT_BIAS
    if kind == "activation":
        return doubled
    raise ConfigurationError(f"unknown INT5 kind {kind!r}")


def int5_decode(ints, kind):
    ints = np.asarray(ints, dtype=np.int64)
    if kind == "weight":
        ints = ints - WEIGHT_BIAS
    elif kind != "activation":
        raise ConfigurationError(f"unknown INT5 kind {kind!r}")
    return fp4_encode(ints / 2.0)


# ------------------------------------------------------------------ exact sums

_INT64_HEADROOM = 62


def exact_dyadic_sum(values, exponents):
    """
    Sum of integer values times powers of two along the last axis, rounded once.

    The accumulation is exact (int64 when the shifted terms fit, Python
    integers otherwise) and is converted to float64 with a single
    round-to-nearest-even, so any two callers that reduce the same terms get
    the same bits regardless of how they got there.
    """
    values = np.asarray(values, dtype=np.int64)
    exponents = np.asarray(exponents, dtype=np.int64)
    live = values != 0
    if not np.any(live):
        return np.zeros(values.shape[:-1])
    sentinel = np.iinfo(np.int64).max
    base = np.min(np.where(live, exponents, sentinel), axis=-1, keepdims=True)
    base = np.where(base == sentinel, 0, base)
    shift = np.where(live, exponents - base, 0)
    width = int(np.max(np.abs(values))).bit_length() + int(values.shape[-1]).bit_length()
    if int(shift.max()) + width < _INT64_HEADROOM:
        total = np.sum(values << shift, axis=-1).astype(np.float64)
    else:
        terms = values.astype(object) << shift.astype(object)
        wide = terms.sum(axis=-1)
        rounded = [_round_wide(int(v), int(b)) for v, b in zip(np.ravel(wide), np.ravel(base))]
        return np.array(rounded).reshape(np.shape(wide))
    return np.ldexp(total, base[..., 0])


def _round_wide(total, base):
    """total * 2^base rounded once; int true division is correctly rounded"""
    if base >= 0:
        return float(total << base)
    return total / (1 << -base)


# ------------------------------------------------------------------ tensors

def _pad_to_block(n):
    return -(-n // BLOCK_SIZE) * BLOCK_SIZE


@dataclass(frozen=True)
class MxTensor:
    """
    Matrix stored as 32-element MXFP4 blocks.

    orientation "row": blocks run along a row (32 consecutive columns share a
    scale); codes are (rows, padded_cols), scales (rows, padded_cols/32).
    orientation "col": blocks run down a column; codes are (padded_rows, cols),
    scales (padded_rows/32, cols). Padding elements are +0.
    """

    rows: int
    cols: int
    orientation: str
    codes: np.ndarray
    scales: np.ndarray

    @classmethod
    def quantize(cls, matrix, orientation="row", rounding="nearest", diagnostics=None):
        matrix = np.asarray(matrix, dtype=np.float64)
        if matrix.ndim != 2:
            raise ConfigurationError(f"expected a 2-D matrix, got shape {matrix.shape}")
        if orientation not in ORIENTATIONS:
            raise ConfigurationError(f"unknown orientation {orientation!r}")
        if rounding not in ROUNDING_MODES:
            raise ConfigurationError(f"unknown rounding mode {rounding!r}")
        rows, cols = matrix.shape
        lanes = matrix if orientation == "row" else matrix.T
        codes, scales = _quantize_lanes(lanes, rounding, diagnostics)
        if orientation == "col":
            codes, scales = codes.T, scales.T
        return cls(rows, cols, orientation, np.ascontiguousarray(codes), np.ascontiguousarray(scales))

    @classmethod
    def zeros(cls, rows, cols, orientation="row"):
        return cls.quantize(np.zeros((rows, cols)), orientation)

    # -- views in "lane" form: blocks along the last axis
    def _lanes(self):
        if self.orientation == "row":
            return self.codes, self.scales
        return self.codes.T, self.scales.T

    @property
    def reduction_length(self):
        """Padded length of the blocked axis"""
        return self._lanes()[0].shape[1]

    @property
    def num_blocks(self):
        return int(self.scales.size)

    def element_values(self):
        """Decoded FP4 elements (padded layout, no scaling)"""
        return fp4_decode(self.codes)

    def block_exponents(self):
        """Unbiased shared-scale exponents, same layout as scales"""
        return self.scales.astype(np.int64) - E8M0_BIAS

    def padded_values(self):
        codes, scales = self._lanes()
        exps = np.repeat(scales.astype(np.int64) - E8M0_BIAS, BLOCK_SIZE, axis=1)
        values = np.ldexp(fp4_decode(codes), exps)
        return values if self.orientation == "row" else values.T

    def dequantize(self):
        return self.padded_values()[: self.rows, : self.cols]

    def block(self, lane, index):
        """MxBlock at (lane, block index) in blocking order"""
        codes, scales = self._lanes()
        span = slice(index * BLOCK_SIZE, (index + 1) * BLOCK_SIZE)
        return MxBlock(elements=codes[lane, span].copy(), scale=int(scales[lane, index]))

    def transpose(self):
        """Exact transpose: row-blocked A becomes column-blocked A^T"""
        flipped = "col" if self.orientation == "row" else "row"
        return MxTensor(self.cols, self.rows, flipped, self.codes.T.copy(), self.scales.T.copy())

    def take_rows(self, index):
        if self.orientation != "row":
            raise ConfigurationError("row selection needs a row-blocked tensor")
        index = np.asarray(index)
        return MxTensor(len(index), self.cols, "row", self.codes[index], self.scales[index])

    def column_slice(self, start, stop):
        """Columns [start, stop); row-blocked tensors need 32-aligned bounds"""
        if self.orientation == "col":
            return MxTensor(self.rows, stop - start, "col",
                            self.codes[:, start:stop].copy(), self.scales[:, start:stop].copy())
        if start % BLOCK_SIZE or (stop % BLOCK_SIZE and stop != self.cols):
            raise ConfigurationError(f"column slice [{start}, {stop}) is not block aligned")
        padded_stop = _pad_to_block(stop)
        return MxTensor(
            self.rows, stop - start, "row",
            self.codes[:, start:padded_stop].copy(),
            self.scales[:, start // BLOCK_SIZE: padded_stop // BLOCK_SIZE].copy(),
        )

    def __eq__(self, other):
        if not isinstance(other, MxTensor):
            return NotImplemented
        return (
            (self.rows, self.cols, self.orientation) == (other.rows, other.cols, other.orientation)
            and np.array_equal(self.codes & 0xF, other.codes & 0xF)
            and np.array_equal(self.scales, other.scales)
        )


def _quantize_lanes(lanes, rounding, diagnostics):
    n_lanes, length = lanes.shape
    padded = np.zeros((n_lanes, max(_pad_to_block(length), BLOCK_SIZE)))
    padded[:, :length] = lanes
    if rounding == "truncate":
        padded = np.asarray(bf16_round(padded))
    blocks = padded.reshape(n_lanes, -1, BLOCK_SIZE)
    scales = shared_scale_codes(blocks)
    scaled = np.ldexp(blocks, -(scales.astype(np.int64) - E8M0_BIAS)[..., None])
    if rounding == "nearest":
        codes = fp4_encode(scaled, diagnostics)
    else:
        codes = _truncate_encode(blocks, scales[..., None], diagnostics)
    return codes.reshape(n_lanes, -1), scales


def requantize_rows(values, diagnostics=None):
    """Row-major nearest MXFP4 requantization used at buffer boundaries"""
    return MxTensor.quantize(values, "row", "nearest", diagnostics)


__all__ = [
    "BF16_MAX", "BLOCK_SIZE", "E2M1_VALUES", "E8M0_BIAS", "FP4_MAX", "WEIGHT_BIAS",
    "MxBlock", "MxTensor", "bf16_to_mx_block", "dequantize_block", "exact_dyadic_sum",
    "fp4_decode", "fp4_encode", "int5_decode", "int5_encode", "mx_to_bf16",
    "mx_to_bf16_values", "pe_product_pack", "pe_product_values", "quantize_block",
    "requantize_rows", "shared_scale_codes",
]
