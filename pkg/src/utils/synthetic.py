"""Synthetic Data - Seeded token streams and layer weights with multi-binade spread"""

import numpy as np

from src.core.bf16 import bf16_round
from src.core.mxfp_core import BLOCK_SIZE


def gaussian_mixture_tokens(n_tokens, d_model, seed=0, components=4, scale_drift=1.0, rng=None):
    """
    Token matrix drawn from a Gaussian mixture with per-token scale drift.

    Each token picks one of `components` random centroids, adds unit noise
    and is scaled by 2^(scale_drift * z) with z standard normal. Values are
    rounded to BF16 so they enter the datapath unchanged.
    """
    rng = rng or np.random.default_rng(seed)
    centroids = rng.normal(0.0, 1.0, size=(components, d_model))
    picks = rng.integers(0, components, size=n_tokens)
    tokens = centroids[picks] + rng.normal(0.0, 1.0, size=(n_tokens, d_model))
    drift = np.exp2(scale_drift * rng.normal(0.0, 1.0, size=(n_tokens, 1)))
    return np.asarray(bf16_round(tokens * drift))


def token_batches(count, n_tokens, d_model, seed=0, **kwargs):
    """`count` independent sequences from one seeded stream"""
    rng = np.random.default_rng(seed)
    return [gaussian_mixture_tokens(n_tokens, d_model, rng=rng, **kwargs) for _ in range(count)]


def spread_weights(rng, fan_in, fan_out, scale_spread=0):
    """
    N(0, 1/fan_in) weights with one 2^u factor per 32-row block and column,
    u uniform on the integers [-scale_spread, scale_spread].
    """
    weights = rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=(fan_in, fan_out))
    if scale_spread:
        blocks = -(-fan_in // BLOCK_SIZE)
        exps = rng.integers(-scale_spread, scale_spread + 1, size=(blocks, fan_out))
        weights *= np.repeat(np.exp2(exps), BLOCK_SIZE, axis=0)[:fan_in]
    return weights
