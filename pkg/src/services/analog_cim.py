"""Analog CIM - Behavioral model of the weight-stationary CTT compute-in-memory macro

A linear layer is evaluated per 32-element block in the INT5 domain, the
bias column is removed before conversion, block partials are aligned to a
target exponent inside a limited current-mirror window (optionally over two
passes) and the column sum is digitised by an ADC.

Exponents in this module are unbiased (E8M0 code - 127). A block's scale is
s = e_x + e_w and its gap to the target is g = s - E_N.
"""

from dataclasses import dataclass, replace
from enum import Enum
from typing import Optional

import numpy as np

from src.core.diagnostics import bump
from src.core.errors import ConfigurationError
from src.core.mxfp_core import (
    BLOCK_SIZE,
    WEIGHT_BIAS,
    MxTensor,
    exact_dyadic_sum,
    fp4_decode,
    fp4_encode,
    int5_encode,
    requantize_rows,
)
from src.core.settings import CM_PLAUSIBLE_MAX
from src.utils.log import get_logger

logger = get_logger(__name__)

# Largest unbiased block partial: 32 lanes of |12 x 12|
T_MAX = 12 * 12 * BLOCK_SIZE
MIN_ADC_BITS = 4
BITPLANES = 5


class TargetStrategy(Enum):
    ROW_HIST = "row_hist"
    ROW_0 = "row0"
    ROW_OPTIMAL = "row_optimal"

    @classmethod
    def parse(cls, name):
        if isinstance(name, cls):
            return name
        key = str(name).lower().replace("-", "_")
        aliases = {
            "row_hist": cls.ROW_HIST, "rowhist": cls.ROW_HIST,
            "row0": cls.ROW_0, "row_0": cls.ROW_0,
            "row_optimal": cls.ROW_OPTIMAL, "rowoptimal": cls.ROW_OPTIMAL,
        }
        if key not in aliases:
            raise ConfigurationError(
                f"unknown strategy {name!r}; choose row_hist, row0 or row_optimal"
            )
        return aliases[key]

    @property
    def online(self):
        return self is not TargetStrategy.ROW_HIST


@dataclass(frozen=True)
class AnalogConfig:
    """
    Knobs of the analog front end.

    cm_bits=None is an unbounded mirror range: every block is shifted exactly
    into the target, so neither underflow nor overflow occurs. adc_bits=None
    is an ideal converter. k_window=None disables the static E_T window.
    """

    cm_bits: Optional[int] = 3
    adc_bits: Optional[int] = 10
    k_window: Optional[int] = 7
    two_pass: bool = True
    strategy: TargetStrategy = TargetStrategy.ROW_HIST
    offset: int = 0

    def __post_init__(self):
        object.__setattr__(self, "strategy", TargetStrategy.parse(self.strategy))
        if self.cm_bits is not None and not 0 <= self.cm_bits <= CM_PLAUSIBLE_MAX:
            raise ConfigurationError(
                f"cm_bits must be in [0, {CM_PLAUSIBLE_MAX}] or unbounded, got {self.cm_bits}"
            )
        if self.adc_bits is not None and self.adc_bits < MIN_ADC_BITS:
            raise ConfigurationError(f"adc_bits must be >= {MIN_ADC_BITS} or ideal, got {self.adc_bits}")
        if self.k_window is not None and self.k_window < 0:
            raise ConfigurationError(f"k_window must be >= 0, got {self.k_window}")

    @classmethod
    def from_settings(cls, settings):
        return cls(
            cm_bits=settings.cm,
            adc_bits=settings.adc,
            k_window=settings.k_window,
            two_pass=settings.two_pass,
            strategy=settings.strategy,
            offset=settings.offset,
        )

    @classmethod
    def unbounded(cls, strategy=TargetStrategy.ROW_HIST):
        return cls(cm_bits=None, adc_bits=None, k_window=None, two_pass=False, strategy=strategy)

    @property
    def underflow_window(self):
        """Binades below the target that still reach the column sum"""
        if self.cm_bits is None:
            return None
        return self.cm_bits * (2 if self.two_pass else 1)

    def with_overrides(self, **changes):
        return replace(self, **changes)

    def label(self):
        cm = "inf" if self.cm_bits is None else str(self.cm_bits)
        adc = "ideal" if self.adc_bits is None else f"{self.adc_bits}b"
        passes = "2pass" if self.two_pass else "1pass"
        return f"{self.strategy.value}{self.offset:+d}/cm{cm}/{adc}/{passes}"


# ------------------------------------------------------------------ block dot product

def block_dot_int5(x, w):
    """
    Raw bit-line dot product and bias-column term for INT5 blocks.

    Args:
        x: activation codes in [-12, 12], shape (..., 32)
        w: weight codes in [0, 24], shape (..., 32)

    Returns:
        (raw, bias_term) with raw - bias_term = sum(x * (w - 12))
    """
    x = np.asarray(x, dtype=np.int64)
    w = np.asarray(w, dtype=np.int64)
    raw = np.sum(x * w, axis=-1)
    bias_term = WEIGHT_BIAS * np.sum(x, axis=-1)
    return raw, bias_term


def bitplane_expand(x):
    """5-bit two's-complement planes of activation codes, plane j holds bit j"""
    bits = np.asarray(x, dtype=np.int64) & 0x1F
    return np.stack([(bits >> j) & 1 for j in range(BITPLANES)]).astype(np.int64)


def bitplane_dot(planes, w):
    """Recombine per-plane bit-line sums; the top plane carries negative weight"""
    w = np.asarray(w, dtype=np.int64)
    plane_sums = planes @ w
    signs = np.array([1, 1, 1, 1, -1], dtype=np.int64)
    return int(np.sum(signs * (1 << np.arange(BITPLANES)) * plane_sums))


# ------------------------------------------------------------------ alignment

@dataclass
class AlignedSum:
    value: np.ndarray
    underflow: np.ndarray
    overflow: np.ndarray


@dataclass
class TwoPassSum(AlignedSum):
    pass1: np.ndarray = None
    pass2: np.ndarray = None
    recovered: np.ndarray = None


def _window_terms(partials, gaps, window, active):
    """Integer terms and exponents of one alignment pass"""
    overflow = active & (gaps > 0)
    underflow = active & ~overflow & (gaps < -window)
    kept = active & ~overflow & ~underflow
    values = np.where(kept, partials, 0)
    exponents = np.where(kept, gaps, 0)
    if np.any(overflow):
        # Saturating block: |T| * 2^g capped at the representable block maximum
        boosted = np.abs(partials) << np.clip(gaps, 0, 13)
        clamped = np.sign(partials) * np.minimum(boosted, T_MAX)
        values = np.where(overflow, clamped, values)
    return values, exponents, underflow, overflow


def _as_int(a):
    return np.asarray(a, dtype=np.int64)


def align_blocks(partials, scale_x, scale_w, target, cm_bits, active=None):
    """
    One-pass alignment of block partials to a target exponent.

    Blocks with gap g in [-cm_bits, 0] contribute T * 2^g, blocks below the
    window are tagged UNDERFLOW and dropped, blocks above the target are
    tagged OVERFLOW and saturate. cm_bits=None aligns every block exactly.
    The reduction runs over the last axis and is exact.
    """
    partials = _as_int(partials)
    gaps = _as_int(scale_x) + _as_int(scale_w) - np.asarray(target, dtype=np.int64)[..., None]
    if active is None:
        active = np.ones(partials.shape, dtype=bool)
    if cm_bits is None:
        exact = exact_dyadic_sum(np.where(active, partials, 0), gaps)
        nothing = np.zeros(partials.shape, dtype=bool)
        return AlignedSum(exact, nothing, nothing.copy())
    values, exponents, underflow, overflow = _window_terms(partials, gaps, cm_bits, active)
    return AlignedSum(exact_dyadic_sum(values, exponents), underflow, overflow)


def two_pass_column(partials, scale_x, scale_w, target, cm_bits, active=None):
    """
    Two-pass alignment: pass 1 at E_N, underflow-tagged blocks re-evaluated
    at E_N2 = E_N - cm_bits and merged after scaling by 2^-cm_bits.

    Blocks more than 2*cm_bits below the target stay dropped and tagged.
    """
    partials = _as_int(partials)
    gaps = _as_int(scale_x) + _as_int(scale_w) - np.asarray(target, dtype=np.int64)[..., None]
    if active is None:
        active = np.ones(partials.shape, dtype=bool)
    v1, e1, tagged, overflow = _window_terms(partials, gaps, cm_bits, active)
    v2, e2, residual, _ = _window_terms(partials, gaps + cm_bits, cm_bits, tagged)
    recovered = tagged & ~residual
    e2 = np.where(recovered, e2 - cm_bits, 0)
    merged = exact_dyadic_sum(np.concatenate([v1, v2], axis=-1), np.concatenate([e1, e2], axis=-1))
    return TwoPassSum(
        value=merged,
        underflow=residual,
        overflow=overflow,
        pass1=exact_dyadic_sum(v1, e1),
        pass2=exact_dyadic_sum(v2, np.where(recovered, e2 + cm_bits, 0)),
        recovered=recovered,
    )


# ------------------------------------------------------------------ ADC

def adc_lsb(adc_bits, fullscale):
    if fullscale <= 0:
        raise ConfigurationError(f"ADC fullscale must be positive, got {fullscale}")
    return fullscale / 2.0 ** (adc_bits - 1)


def adc_quantize(value, adc_bits, fullscale, diagnostics=None):
    """
    Signed ADC code, round-half-to-even, clamped to the code range.

    Only inputs beyond fullscale count as saturations. adc_bits=None returns
    the exact input.
    """
    if adc_bits is None:
        return value
    lsb = adc_lsb(adc_bits, fullscale)
    limit = 2 ** (adc_bits - 1)
    value = np.asarray(value, dtype=np.float64)
    codes = np.clip(np.rint(value / lsb), -limit, limit - 1)
    bump(diagnostics, "adc_saturations", int(np.count_nonzero(np.abs(value) > fullscale)))
    return codes if codes.ndim else float(codes)


def fullscale_for(max_abs_sum):
    """Smallest power of two covering the largest observed pre-ADC magnitude"""
    if max_abs_sum <= 0:
        return 1.0
    _, exp = np.frexp(float(max_abs_sum))
    if max_abs_sum == 2.0 ** (exp - 1):
        exp -= 1
    return float(2.0 ** exp)


# ------------------------------------------------------------------ layer model

@dataclass(frozen=True)
class AnalogLayerModel:
    """
    A linear layer resident in the macro array.

    weights is column-blocked (K x M, blocks run down the reduction axis).
    target_exponent is the static E_N of the RowHist strategy and None for
    online strategies. E_T = E_N - E_W must stay within k binades of the
    layer minimum E_min = E_N - max(E_W); since that only depends on the
    weights, blocks with E_W < max(E_W) - k are re-quantized at the clipped
    exponent when the model is built, before any target is chosen.
    """

    name: str
    weights: MxTensor
    weights_int5: np.ndarray
    block_weight_exponents: np.ndarray
    target_exponent: Optional[int]
    e_min: Optional[int]
    k_window: Optional[int]
    adc_fullscale: float
    et_clips: int = 0

    @classmethod
    def build(cls, name, weights, target_exponent=None, adc_fullscale=None,
              k_window=7, diagnostics=None):
        if weights.orientation != "col":
            raise ConfigurationError(f"layer {name}: weights must be column-blocked")
        et_clips = 0
        if k_window is not None:
            weights, et_clips = clip_weight_window(weights, k_window)
            if et_clips:
                bump(diagnostics, "et_clips", et_clips)
                logger.debug(f"{name}: clipped {et_clips} weight blocks into the E_T window")
        e_min = None
        if target_exponent is not None:
            e_min = int(target_exponent) - int(weights.block_exponents().max())
        n_blocks = weights.reduction_length // BLOCK_SIZE
        if adc_fullscale is None:
            adc_fullscale = fullscale_for(T_MAX * n_blocks)
        return cls(
            name=name,
            weights=weights,
            weights_int5=int5_encode(weights.codes, "weight"),
            block_weight_exponents=weights.block_exponents(),
            target_exponent=None if target_exponent is None else int(target_exponent),
            e_min=e_min,
            k_window=k_window,
            adc_fullscale=float(adc_fullscale),
            et_clips=et_clips,
        )

    @property
    def in_features(self):
        return self.weights.rows

    @property
    def out_features(self):
        return self.weights.cols

    def sidecar(self, cfg=None):
        """JSON-ready summary stored next to the MXT1 weight file"""
        return {
            "E_N": self.target_exponent,
            "E_min": self.e_min,
            "adc_fullscale": self.adc_fullscale,
            "cm_bits": None if cfg is None else cfg.cm_bits,
            "k": self.k_window,
            "et_clips": self.et_clips,
        }


def clip_weight_window(weights, k_window):
    """Raise weight block exponents below max(E_W) - k and re-quantize those blocks"""
    exps = weights.block_exponents()
    floor = int(exps.max()) - k_window
    clipped = exps < floor
    count = int(np.count_nonzero(clipped))
    if not count:
        return weights, 0
    new_exps = np.where(clipped, floor, exps)
    codes = weights.codes.copy()
    for block_row, col in zip(*np.nonzero(clipped)):
        span = slice(block_row * BLOCK_SIZE, (block_row + 1) * BLOCK_SIZE)
        values = np.ldexp(fp4_decode(codes[span, col]), exps[block_row, col])
        codes[span, col] = fp4_encode(np.ldexp(values, -new_exps[block_row, col]))
    scales = (new_exps + 127).astype(np.uint8)
    return MxTensor(weights.rows, weights.cols, "col", codes, scales), count


# ------------------------------------------------------------------ forward

@dataclass
class ColumnResult:
    adc_code: float
    target_exponent: int
    underflow_tags: np.ndarray
    overflow_flags: np.ndarray
    lsb: float

    def decoded(self):
        return float(np.ldexp(self.adc_code * self.lsb, self.target_exponent - 2))


@dataclass
class AnalogLinearOutput:
    """
    Column results of one layer evaluation.

    codes are ADC codes (exact column sums for an ideal ADC) in units of
    lsb * 2^E_N / 4; that pair is also the raw INT10 form the V path keeps.
    """

    codes: np.ndarray
    lsb: float
    target_exponents: np.ndarray
    underflow: np.ndarray
    overflow: np.ndarray
    pre_adc: np.ndarray

    def values(self):
        return np.ldexp(self.codes * self.lsb, self.target_exponents - 2)

    def to_mx(self, diagnostics=None):
        return requantize_rows(self.values(), diagnostics)

    def column(self, row, col):
        return ColumnResult(
            adc_code=float(self.codes[row, col]),
            target_exponent=int(self.target_exponents[row, col]),
            underflow_tags=self.underflow[row, col].copy(),
            overflow_flags=self.overflow[row, col].copy(),
            lsb=self.lsb,
        )


def block_partials(x, weights_int5):
    """
    Unbiased INT5 block partials of a row-blocked input against resident weights.

    Returns:
        partials (N, M, blocks) and active (N, 1, blocks); a block whose
        activations are all zero does not drive the bit line
    """
    activations = int5_encode(x.codes, "activation")
    n_rows = activations.shape[0]
    a = activations.reshape(n_rows, -1, BLOCK_SIZE)
    w = np.asarray(weights_int5, dtype=np.int64).reshape(a.shape[1], BLOCK_SIZE, -1)
    raw = np.einsum("nbi,bim->nmb", a, w)
    bias_term = WEIGHT_BIAS * a.sum(axis=2)
    return raw - bias_term[:, None, :], active_blocks(x)


def active_blocks(x):
    """(N, 1, blocks) mask of input blocks holding a nonzero activation"""
    a = int5_encode(x.codes, "activation").reshape(x.rows, -1, BLOCK_SIZE)
    return np.any(a != 0, axis=2)[:, None, :]


def block_scales(x, weight_exponents):
    """s = e_x + e_w per (row, column, block)"""
    return x.block_exponents()[:, None, :] + np.asarray(weight_exponents).T[None, :, :]


def _check_dims(x, weights, name):
    if x.orientation != "row":
        raise ConfigurationError(f"{name}: input must be row-blocked along the reduction axis")
    if x.cols != weights.rows or x.reduction_length != weights.reduction_length:
        raise ConfigurationError(
            f"{name}: input has {x.cols} features, layer expects {weights.rows}"
        )


def strategy_targets(scales, strategy, static_target=None, offset=0):
    """
    E_N per evaluation from the block scales along the last axis.

    RowHist uses the static calibrated target, Row0 the scale of block-row 0,
    RowOptimal the lower median of the column's block scales.
    """
    scales = np.asarray(scales, dtype=np.int64)
    strategy = TargetStrategy.parse(strategy)
    if strategy is TargetStrategy.ROW_HIST:
        if static_target is None:
            raise ConfigurationError("RowHist needs a calibrated target exponent")
        base = np.full(scales.shape[:-1], int(static_target), dtype=np.int64)
    elif strategy is TargetStrategy.ROW_0:
        base = scales[..., 0]
    else:
        base = np.sort(scales, axis=-1)[..., (scales.shape[-1] - 1) // 2]
    return base + offset


def evaluation_targets(scales, layer, cfg):
    try:
        return strategy_targets(scales, cfg.strategy, layer.target_exponent, cfg.offset)
    except ConfigurationError as e:
        raise ConfigurationError(f"{layer.name}: {e}") from e


def pre_adc_sums(x, layer, cfg, diagnostics=None):
    """Aligned (and merged, for two passes) column sums before conversion"""
    _check_dims(x, layer.weights, layer.name)
    partials, active = block_partials(x, layer.weights_int5)
    active = np.broadcast_to(active, partials.shape)
    scales = block_scales(x, layer.block_weight_exponents)
    targets = evaluation_targets(scales, layer, cfg)
    zeros = np.zeros_like(scales)
    if cfg.cm_bits is not None and cfg.two_pass:
        aligned = two_pass_column(partials, scales, zeros, targets, cfg.cm_bits, active)
    else:
        aligned = align_blocks(partials, scales, zeros, targets, cfg.cm_bits, active)
    bump(diagnostics, "block_evaluations", int(np.count_nonzero(active)))
    bump(diagnostics, "underflow_blocks", int(np.count_nonzero(aligned.underflow)))
    bump(diagnostics, "overflow_blocks", int(np.count_nonzero(aligned.overflow)))
    return aligned, targets


def analog_linear_forward(x, layer, cfg, diagnostics=None):
    """
    Evaluate a row-blocked MXFP4 input through a resident layer.

    Args:
        x: MxTensor (N x K, row-blocked)
        layer: AnalogLayerModel (K x M)
        cfg: AnalogConfig

    Returns:
        AnalogLinearOutput; call to_mx() for the MXFP4 buffer form or keep it
        raw for the V path
    """
    aligned, targets = pre_adc_sums(x, layer, cfg, diagnostics)
    if cfg.adc_bits is None:
        codes, lsb = aligned.value, 1.0
    else:
        codes = adc_quantize(aligned.value, cfg.adc_bits, layer.adc_fullscale, diagnostics)
        lsb = adc_lsb(cfg.adc_bits, layer.adc_fullscale)
    return AnalogLinearOutput(
        codes=np.asarray(codes, dtype=np.float64),
        lsb=lsb,
        target_exponents=targets,
        underflow=aligned.underflow,
        overflow=aligned.overflow,
        pre_adc=aligned.value,
    )


def digital_linear_forward(x, weights):
    """
    Digital MXFP4 linear layer: exact real GEMM of the dequantized operands,
    rounded once to float64 per output.
    """
    _check_dims(x, weights, "digital linear")
    partials, active = block_partials(x, int5_encode(weights.codes, "weight"))
    scales = block_scales(x, weights.block_exponents())
    return np.ldexp(exact_dyadic_sum(np.where(active, partials, 0), scales), -2)


def shift_factors(scale_x, layer, cm_bits):
    """
    Derived (delta1, delta2) encoding of the alignment shift.

    delta2 = E_T - E_min is static per weight block, delta1 = e_x - (E_min - cm)
    streams with the input; inside the window g = delta1 - delta2 - cm.
    """
    if layer.target_exponent is None or layer.e_min is None:
        raise ConfigurationError(f"{layer.name}: shift factors need a static target and window")
    e_t = layer.target_exponent - layer.block_weight_exponents
    delta2 = e_t - layer.e_min
    delta1 = np.asarray(scale_x, dtype=np.int64) - (layer.e_min - cm_bits)
    return delta1, delta2
