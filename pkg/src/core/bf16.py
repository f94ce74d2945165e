"""BF16 Numerics - Round-to-nearest-even emulation of the bfloat16 datapath

Values are carried as float64 arrays holding exactly-representable BF16
numbers. Every operation computes the real result in float64 and rounds it
once, which is exact for add/sub/mul of BF16 operands and correctly rounded
for the transcendental helpers up to float64's own error.
"""

import numpy as np

from src.core.diagnostics import bump

BF16_MAX = float.fromhex("0x1.fep127")
BF16_MIN_NORMAL = 2.0 ** -126
BF16_MIN_SUBNORMAL = 2.0 ** -133
MANTISSA_BITS = 7

_MIN_STEP_EXP = -133


def _like_input(result, template):
    if np.ndim(template) == 0:
        return float(result)
    return result


def bf16_round(x, diagnostics=None):
    """
    Round float64 values to the nearest BF16 value, ties to even.

    Args:
        x: scalar or array of finite reals
        diagnostics: optional Diagnostics receiving bf16_saturations

    Returns:
        float64 array (or float for scalar input) of BF16-representable values;
        magnitudes beyond the largest finite BF16 saturate to it
    """
    arr = np.asarray(x, dtype=np.float64)
    _, exp = np.frexp(arr)
    step = np.maximum(exp.astype(np.int64) - (MANTISSA_BITS + 1), _MIN_STEP_EXP)
    rounded = np.ldexp(np.rint(np.ldexp(arr, -step)), step)
    over = np.abs(rounded) > BF16_MAX
    if np.any(over):
        bump(diagnostics, "bf16_saturations", int(np.count_nonzero(over)))
        rounded = np.where(over, np.copysign(BF16_MAX, rounded), rounded)
    return _like_input(rounded, x)


def bf16_add(a, b, diagnostics=None):
    return bf16_round(np.add(a, b), diagnostics)


def bf16_sub(a, b, diagnostics=None):
    return bf16_round(np.subtract(a, b), diagnostics)


def bf16_mul(a, b, diagnostics=None):
    return bf16_round(np.multiply(a, b), diagnostics)


def bf16_div(a, b, diagnostics=None):
    return bf16_round(np.divide(a, b), diagnostics)


def bf16_exp(x, diagnostics=None):
    with np.errstate(over="ignore"):
        return bf16_round(np.exp(x), diagnostics)


def bf16_exp2(x, diagnostics=None):
    with np.errstate(over="ignore"):
        return bf16_round(np.exp2(x), diagnostics)


def bf16_rsqrt(x, diagnostics=None):
    return bf16_round(1.0 / np.sqrt(x), diagnostics)


def bf16_fold_sum(x, axis=-1, diagnostics=None):
    """Serial index-ascending BF16 accumulation along one axis"""
    arr = np.moveaxis(np.asarray(x, dtype=np.float64), axis, -1)
    acc = np.zeros(arr.shape[:-1])
    for i in range(arr.shape[-1]):
        acc = np.asarray(bf16_round(acc + arr[..., i], diagnostics))
    return _like_input(acc, acc)


def bf16_bits(x):
    """16-bit patterns of BF16-representable values"""
    as_f32 = np.asarray(x, dtype=np.float64).astype(np.float32)
    return (as_f32.view(np.uint32) >> 16).astype(np.uint16)


def bf16_from_bits(bits):
    widened = np.asarray(bits, dtype=np.uint32) << 16
    return widened.astype(np.uint32).view(np.float32).astype(np.float64)


def bf16_ulp_distance(a, b):
    """Number of BF16 steps between two arrays of BF16 values"""
    def ordered(bits):
        bits = bits.astype(np.int64)
        magnitude = bits & 0x7FFF
        return np.where(bits & 0x8000, -magnitude, magnitude)

    return np.abs(ordered(bf16_bits(a)) - ordered(bf16_bits(b)))
