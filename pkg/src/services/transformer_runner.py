"""Transformer Runner - Encoder forward passes in reference, digital MXFP4 and analog modes

One encoder layer runs the five pipeline stages in order:
    1. LayerNorm, Q/K/V projections
    2. attention core (digital systolic stage)
    3. output projection, residual, LayerNorm
    4. FFN1, GELU
    5. FFN2, residual
Projection outputs are re-quantized row-major to MXFP4 before they are
buffered, except V, which the attention stage ingests in its raw INT10 form.
The residual stream stays in BF16.
"""

import hashlib
import json
import math
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from enum import Enum
from typing import Callable, Optional

import numpy as np
from scipy.special import ndtr

from src.core.bf16 import (
    BF16_MIN_NORMAL,
    bf16_add,
    bf16_div,
    bf16_fold_sum,
    bf16_mul,
    bf16_round,
    bf16_rsqrt,
    bf16_sub,
)
from src.core.diagnostics import Diagnostics
from src.core.errors import CalibrationMissingError, ConfigurationError, SequenceTooLongError
from src.core.mxfp_core import BLOCK_SIZE, MxTensor, requantize_rows
from src.services.analog_cim import AnalogConfig, AnalogLayerModel, analog_linear_forward, digital_linear_forward
from src.services.attention_digital import SystolicGeometry, attention_forward, reference_attention
from src.utils.log import get_logger
from src.utils.synthetic import spread_weights

logger = get_logger(__name__)

LINEAR_NAMES = ("q", "k", "v", "o", "ffn1", "ffn2")


# ------------------------------------------------------------------ configuration

@dataclass(frozen=True)
class ModelConfig:
    """
    Encoder dimensions plus where its tokens come from.

    token_source is {"kind": "patchify", "image": H, "patch": P} (N = (H/P)^2 + 1),
    {"kind": "text", "seq_len": N} or {"kind": "file"} (N bounded by max_seq).
    """

    name: str
    layers: int
    d_model: int
    ffn_dim: int
    heads: int
    d_k: int
    max_seq: int
    token_source: dict = field(default_factory=lambda: {"kind": "file"})
    params: Optional[float] = None
    classes: int = 10

    def __post_init__(self):
        if self.heads * self.d_k != self.d_model:
            raise ConfigurationError(
                f"{self.name}: d_model={self.d_model} != heads*d_k={self.heads}*{self.d_k}"
            )
        if self.layers < 0 or self.max_seq < 1:
            raise ConfigurationError(f"{self.name}: layers must be >= 0 and max_seq >= 1")
        for label, dim in (("d_k", self.d_k), ("d_model", self.d_model), ("ffn_dim", self.ffn_dim)):
            if dim % BLOCK_SIZE:
                raise ConfigurationError(f"{self.name}: {label}={dim} must be a multiple of {BLOCK_SIZE}")

    @property
    def seq_len(self):
        kind = self.token_source.get("kind", "file")
        if kind == "patchify":
            return (self.token_source["image"] // self.token_source["patch"]) ** 2 + 1
        if kind == "text":
            return int(self.token_source["seq_len"])
        return self.max_seq

    @classmethod
    def from_dict(cls, data):
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(data) - known
        if unknown:
            raise ConfigurationError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**data)

    def to_dict(self):
        return asdict(self)


class ModeKind(Enum):
    REFERENCE = "reference"
    DIGITAL = "digital"
    ANALOG = "analog"


@dataclass(frozen=True)
class ExecutionMode:
    kind: ModeKind
    analog: Optional[AnalogConfig] = None

    @classmethod
    def reference(cls):
        return cls(ModeKind.REFERENCE)

    @classmethod
    def digital(cls):
        return cls(ModeKind.DIGITAL)

    @classmethod
    def analog_mode(cls, cfg=None):
        return cls(ModeKind.ANALOG, cfg or AnalogConfig())

    @classmethod
    def parse(cls, name, cfg=None):
        try:
            kind = ModeKind(str(name).lower())
        except ValueError:
            raise ConfigurationError(f"unknown mode {name!r}; choose reference, digital or analog")
        if kind is ModeKind.ANALOG:
            return cls.analog_mode(cfg)
        return cls(kind)


# ------------------------------------------------------------------ weights

@dataclass
class LayerWeights:
    """One encoder layer: column-blocked projection weights and BF16 LayerNorm parameters"""

    q: MxTensor
    k: MxTensor
    v: MxTensor
    o: MxTensor
    ffn1: MxTensor
    ffn2: MxTensor
    ln1_gamma: np.ndarray
    ln1_beta: np.ndarray
    ln2_gamma: np.ndarray
    ln2_beta: np.ndarray
    _resident: dict = field(default_factory=dict, init=False, repr=False, compare=False)
    _resident_lock: threading.Lock = field(default_factory=threading.Lock, init=False, repr=False, compare=False)

    def linear(self, name):
        return getattr(self, name)

    def resident_layer(self, part, name, layer_calibration, k_window):
        """
        Programmed analog model of one projection. Each projection holds one
        resident entry, rebuilt when its target, fullscale or window changes.
        """
        signature = (layer_calibration.target_exponent, layer_calibration.adc_fullscale, k_window)
        with self._resident_lock:
            cached = self._resident.get(part)
            if cached is None or cached[0] != signature:
                layer = AnalogLayerModel.build(
                    name,
                    self.linear(part),
                    target_exponent=layer_calibration.target_exponent,
                    adc_fullscale=layer_calibration.adc_fullscale,
                    k_window=k_window,
                )
                cached = self._resident[part] = (signature, layer)
            return cached[1]

    def resident_count(self):
        with self._resident_lock:
            return len(self._resident)


@dataclass
class TransformerModel:
    config: ModelConfig
    layers: list
    head: np.ndarray

    def linear_weights(self):
        """{"layer00.q": MxTensor, ...} in execution order"""
        return {
            linear_name(i, name): layer.linear(name)
            for i, layer in enumerate(self.layers)
            for name in LINEAR_NAMES
        }

    def resident_count(self):
        """Programmed analog layers currently held across all encoder layers"""
        return sum(layer.resident_count() for layer in self.layers)

    def fingerprint(self):
        digest = hashlib.sha256(json.dumps(self.config.to_dict(), sort_keys=True).encode())
        for layer in self.layers:
            for name in LINEAR_NAMES:
                tensor = layer.linear(name)
                digest.update(tensor.codes.tobytes())
                digest.update(tensor.scales.tobytes())
            for vector in (layer.ln1_gamma, layer.ln1_beta, layer.ln2_gamma, layer.ln2_beta):
                digest.update(np.asarray(vector, dtype="<f8").tobytes())
        digest.update(np.asarray(self.head, dtype="<f8").tobytes())
        return digest.hexdigest()[:16]


def linear_name(layer_index, name):
    return f"layer{layer_index:02d}.{name}"


def build_random_model(config, seed=0, scale_spread=0):
    """Seeded model whose weight blocks spread over 2*scale_spread+1 binades"""
    rng = np.random.default_rng(seed)
    d, ffn = config.d_model, config.ffn_dim
    shapes = {"q": (d, d), "k": (d, d), "v": (d, d), "o": (d, d), "ffn1": (d, ffn), "ffn2": (ffn, d)}
    layers = []
    for _ in range(config.layers):
        linears = {
            name: MxTensor.quantize(spread_weights(rng, *shape, scale_spread=scale_spread), "col")
            for name, shape in shapes.items()
        }
        norms = {
            "ln1_gamma": bf16_round(1.0 + 0.1 * rng.normal(size=d)),
            "ln1_beta": bf16_round(0.1 * rng.normal(size=d)),
            "ln2_gamma": bf16_round(1.0 + 0.1 * rng.normal(size=d)),
            "ln2_beta": bf16_round(0.1 * rng.normal(size=d)),
        }
        layers.append(LayerWeights(**linears, **norms))
    head = rng.normal(0.0, 1.0 / math.sqrt(d), size=(d, config.classes))
    logger.debug(f"Built random model {config.name}: L={config.layers}, d={d}, seed={seed}")
    return TransformerModel(config=config, layers=layers, head=head)


# ------------------------------------------------------------------ BF16 vector ops

def layernorm_bf16(x, gamma, beta, diagnostics=None):
    """
    Row LayerNorm in BF16: index-ascending folds for mean then variance,
    variance floored at the smallest normal BF16 value.
    """
    x = np.asarray(x, dtype=np.float64)
    width = x.shape[-1]
    mean = np.asarray(bf16_div(bf16_fold_sum(x, diagnostics=diagnostics), width, diagnostics))
    centered = np.asarray(bf16_sub(x, mean[..., None], diagnostics))
    squares = np.asarray(bf16_mul(centered, centered, diagnostics))
    variance = np.asarray(bf16_div(bf16_fold_sum(squares, diagnostics=diagnostics), width, diagnostics))
    variance = np.maximum(variance, BF16_MIN_NORMAL)
    inv_std = np.asarray(bf16_rsqrt(variance, diagnostics))
    normed = bf16_mul(centered, inv_std[..., None], diagnostics)
    return np.asarray(bf16_add(bf16_mul(normed, gamma, diagnostics), beta, diagnostics))


def gelu_bf16(x, diagnostics=None):
    """Exact x * Phi(x) in float64, rounded once to BF16"""
    x = np.asarray(x, dtype=np.float64)
    return np.asarray(bf16_round(x * ndtr(x), diagnostics))


def residual_add_bf16(a, b, diagnostics=None):
    return np.asarray(bf16_add(a, b, diagnostics))


def layernorm_f64(x, gamma, beta):
    mean = x.mean(axis=-1, keepdims=True)
    variance = np.maximum(((x - mean) ** 2).mean(axis=-1, keepdims=True), BF16_MIN_NORMAL)
    return (x - mean) / np.sqrt(variance) * gamma + beta


def gelu_f64(x):
    return x * ndtr(x)


# ------------------------------------------------------------------ execution

@dataclass
class RunContext:
    """Per-run state threaded through the layers"""

    mode: ExecutionMode
    calibration: Optional[object] = None
    diagnostics: Diagnostics = field(default_factory=Diagnostics)
    observer: Optional[Callable] = None
    geometry: SystolicGeometry = field(default_factory=SystolicGeometry)

    def __post_init__(self):
        if self.mode.kind is ModeKind.ANALOG and self.calibration is None:
            raise CalibrationMissingError()


def _linear(index, part, x_mx, weights, ctx):
    """Raw projection output: an array (digital) or an AnalogLinearOutput"""
    name = linear_name(index, part)
    if ctx.observer is not None:
        ctx.observer(name, x_mx)
    if ctx.mode.kind is ModeKind.DIGITAL:
        return digital_linear_forward(x_mx, weights.linear(part))
    cfg = ctx.mode.analog
    k_window = None if cfg.strategy.online or cfg.cm_bits is None else cfg.k_window
    layer = weights.resident_layer(part, name, ctx.calibration.for_layer(name), k_window)
    return analog_linear_forward(x_mx, layer, cfg, ctx.diagnostics)


def _buffered(raw, ctx):
    """MXFP4 row-major buffer form of a projection output"""
    values = raw if isinstance(raw, np.ndarray) else raw.values()
    return requantize_rows(values, ctx.diagnostics)


def encoder_layer_forward(x, weights, config, ctx, index=0):
    """
    One encoder layer.

    Args:
        x: residual stream (N x d); BF16 values outside reference mode
        weights: LayerWeights
        config: ModelConfig (head layout)
        ctx: RunContext
        index: layer index, used to name projections

    Returns:
        next residual stream
    """
    if ctx.mode.kind is ModeKind.REFERENCE:
        return _reference_layer(x, weights, config)
    diag = ctx.diagnostics

    # Stage 1
    h_mx = requantize_rows(layernorm_bf16(x, weights.ln1_gamma, weights.ln1_beta, diag), diag)
    q_mx = _buffered(_linear(index, "q", h_mx, weights, ctx), ctx)
    k_mx = _buffered(_linear(index, "k", h_mx, weights, ctx), ctx)
    v_raw = _linear(index, "v", h_mx, weights, ctx)
    # Stage 2
    attn = attention_forward(q_mx, k_mx, v_raw, config.heads, config.d_k, ctx.geometry, diagnostics=diag)
    # Stage 3
    o = _buffered(_linear(index, "o", attn.output_mx, weights, ctx), ctx).dequantize()
    x1 = residual_add_bf16(x, o, diag)
    h2_mx = requantize_rows(layernorm_bf16(x1, weights.ln2_gamma, weights.ln2_beta, diag), diag)
    # Stage 4
    f1 = _buffered(_linear(index, "ffn1", h2_mx, weights, ctx), ctx).dequantize()
    g_mx = requantize_rows(gelu_bf16(f1, diag), diag)
    # Stage 5
    f2 = _buffered(_linear(index, "ffn2", g_mx, weights, ctx), ctx).dequantize()
    return residual_add_bf16(x1, f2, diag)


def _reference_layer(x, weights, config):
    dense = {part: weights.linear(part).dequantize() for part in LINEAR_NAMES}
    h = layernorm_f64(x, weights.ln1_gamma, weights.ln1_beta)
    attn = reference_attention(h @ dense["q"], h @ dense["k"], h @ dense["v"], config.heads, config.d_k)
    x1 = x + attn @ dense["o"]
    h2 = layernorm_f64(x1, weights.ln2_gamma, weights.ln2_beta)
    return x1 + gelu_f64(h2 @ dense["ffn1"]) @ dense["ffn2"]


@dataclass
class ModelOutput:
    embeddings: np.ndarray
    logits: np.ndarray
    layer_outputs: list
    diagnostics: Diagnostics

    @property
    def prediction(self):
        return int(np.argmax(self.logits))


def _check_tokens(model, tokens):
    tokens = np.asarray(tokens, dtype=np.float64)
    config = model.config
    if tokens.ndim != 2 or tokens.shape[1] != config.d_model:
        raise ConfigurationError(f"tokens must be (N, {config.d_model}), got {tokens.shape}")
    if tokens.shape[0] > config.max_seq:
        raise SequenceTooLongError(f"{tokens.shape[0]} tokens exceed max_seq={config.max_seq}")
    return tokens


def model_forward(model, tokens, mode, calibration=None, observer=None, geometry=None):
    """
    Run every layer and the toy classification head (token mean, linear).

    Returns:
        ModelOutput with the final embeddings, logits, each layer's output and
        the run's diagnostic counters
    """
    tokens = _check_tokens(model, tokens)
    ctx = RunContext(
        mode=mode,
        calibration=calibration,
        observer=observer,
        geometry=geometry or SystolicGeometry(),
    )
    x = tokens if mode.kind is ModeKind.REFERENCE else np.asarray(bf16_round(tokens))
    outputs = []
    for index, weights in enumerate(model.layers):
        x = encoder_layer_forward(x, weights, model.config, ctx, index)
        outputs.append(x)
    logits = x.mean(axis=0) @ model.head
    return ModelOutput(embeddings=x, logits=logits, layer_outputs=outputs, diagnostics=ctx.diagnostics)


def run_batch(model, batches, mode, calibration=None, threads=1):
    """Forward each sequence; results keep the input order for any thread count"""
    def one(tokens):
        return model_forward(model, tokens, mode, calibration)

    if threads <= 1 or len(batches) <= 1:
        return [one(tokens) for tokens in batches]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(one, batches))


def record_linear_inputs(model, batches):
    """Row-blocked inputs of every projection during digital forwards"""
    recorded = {name: [] for name in model.linear_weights()}

    def observe(name, x_mx):
        recorded[name].append(x_mx)

    for tokens in batches:
        model_forward(model, tokens, ExecutionMode.digital(), observer=observe)
    return recorded


# ------------------------------------------------------------------ comparisons

def relative_error(candidate, baseline):
    """Relative Frobenius error ||candidate - baseline|| / ||baseline||"""
    diff = np.linalg.norm(np.asarray(candidate) - np.asarray(baseline))
    scale = np.linalg.norm(np.asarray(baseline))
    if scale == 0:
        return 0.0 if diff == 0 else float("inf")
    return float(diff / scale)


def per_layer_errors(model, tokens, mode, baseline_mode, calibration=None):
    """
    Error of each layer evaluated on the same input in two modes; inputs are
    the baseline chain's residual stream.
    """
    tokens = _check_tokens(model, tokens)
    ctx = RunContext(mode=mode, calibration=calibration)
    base_ctx = RunContext(mode=baseline_mode, calibration=calibration)
    x = np.asarray(bf16_round(tokens))
    errors = []
    for index, weights in enumerate(model.layers):
        base = encoder_layer_forward(x, weights, model.config, base_ctx, index)
        candidate = encoder_layer_forward(x, weights, model.config, ctx, index)
        errors.append(relative_error(candidate, base))
        x = base if baseline_mode.kind is not ModeKind.REFERENCE else np.asarray(bf16_round(base))
    return errors


def _mean(values):
    return float(np.mean(values)) if len(values) else 0.0


def _layer_errors(candidates, baselines, layers):
    return [
        _mean([relative_error(c.layer_outputs[i], b.layer_outputs[i]) for c, b in zip(candidates, baselines)])
        for i in range(layers)
    ]


def analog_vs_digital_errors(model, batches, analog_cfg, calibration, threads=1, digital=None,
                             diagnostics=None):
    """
    Per-layer and end-to-end relative errors of analog runs against digital ones.
    Analog diagnostic counters are merged into `diagnostics` when given.

    Returns:
        (per-layer mean errors, mean end-to-end error)
    """
    if digital is None:
        digital = run_batch(model, batches, ExecutionMode.digital(), threads=threads)
    analog = run_batch(model, batches, ExecutionMode.analog_mode(analog_cfg), calibration, threads)
    if diagnostics is not None:
        for out in analog:
            diagnostics.merge(out.diagnostics)
    per_layer = _layer_errors(analog, digital, model.config.layers)
    end_to_end = _mean([relative_error(a.embeddings, d.embeddings) for a, d in zip(analog, digital)])
    return per_layer, end_to_end


def compare_modes(model, batches, analog_cfg, calibration, threads=1):
    """
    Reference vs digital vs analog report over a batch of sequences.

    Returns:
        dict with per-layer and end-to-end relative errors, the max absolute
        analog-vs-digital difference, merged diagnostic counters and top-1
        agreement of the toy head
    """
    reference = run_batch(model, batches, ExecutionMode.reference(), threads=threads)
    digital = run_batch(model, batches, ExecutionMode.digital(), threads=threads)
    analog = run_batch(model, batches, ExecutionMode.analog_mode(analog_cfg), calibration, threads)

    diagnostics = Diagnostics()
    for out in analog:
        diagnostics.merge(out.diagnostics)

    layers = model.config.layers
    max_abs = max(
        (float(np.max(np.abs(a.embeddings - d.embeddings))) for a, d in zip(analog, digital)),
        default=0.0,
    )
    report = {
        "sequences": len(batches),
        "analog_config": analog_cfg.label(),
        "per_layer": {
            "digital_vs_reference": _layer_errors(digital, reference, layers),
            "analog_vs_digital": _layer_errors(analog, digital, layers),
        },
        "end_to_end": {
            "digital_vs_reference": _mean(
                [relative_error(d.embeddings, r.embeddings) for d, r in zip(digital, reference)]
            ),
            "analog_vs_digital": _mean(
                [relative_error(a.embeddings, d.embeddings) for a, d in zip(analog, digital)]
            ),
        },
        "max_abs_diff_analog_vs_digital": max_abs,
        "top1_agreement": {
            "analog_vs_digital": _mean([a.prediction == d.prediction for a, d in zip(analog, digital)]),
            "digital_vs_reference": _mean([d.prediction == r.prediction for d, r in zip(digital, reference)]),
        },
        "diagnostics": diagnostics.as_dict(),
    }
    logger.info(
        f"compare_modes {analog_cfg.label()}: analog/digital {report['end_to_end']['analog_vs_digital']:.4g}, "
        f"digital/reference {report['end_to_end']['digital_vs_reference']:.4g}"
    )
    logger.info(f"Diagnostics: {diagnostics.as_dict()}")
    return report
