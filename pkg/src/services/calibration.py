"""Calibration - Exponent histograms, target selection and saturation statistics

RowHist picks one static E_N per layer from the block-scale histogram gathered
on calibration inputs; Row0 and RowOptimal derive E_N per column evaluation
from the block scales they are about to sum. A ModelCalibration is persisted
as calibration.json inside the model bundle.
"""

import json
import os
from collections import Counter
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from src.core.diagnostics import Diagnostics
from src.core.errors import CalibrationMissingError, EmptyInputError, FileFormatError
from src.services.analog_cim import (
    AnalogConfig,
    AnalogLayerModel,
    TargetStrategy,
    active_blocks,
    block_scales,
    clip_weight_window,
    fullscale_for,
    pre_adc_sums,
    strategy_targets,
)
from src.services.transformer_runner import analog_vs_digital_errors, record_linear_inputs
from src.utils.log import get_logger

logger = get_logger(__name__)


# ------------------------------------------------------------------ histograms

@dataclass
class ExponentHistogram:
    """Observed block scales s = e_x + e_w of one linear layer"""

    name: str
    totals: Counter = field(default_factory=Counter)
    positions: dict = field(default_factory=dict)
    samples: int = 0

    @property
    def total(self):
        return sum(self.totals.values())

    @property
    def empty(self):
        return not self.totals

    def record(self, scales, active=None):
        """
        Count every active block evaluation.

        Args:
            scales: (N, M, blocks) integer block scales
            active: optional boolean mask of the same shape
        """
        scales = np.asarray(scales, dtype=np.int64)
        if active is None:
            active = np.ones(scales.shape, dtype=bool)
        active = np.broadcast_to(active, scales.shape)
        for position in range(scales.shape[-1]):
            observed = scales[..., position][active[..., position]]
            values, counts = np.unique(observed, return_counts=True)
            bins = Counter(dict(zip(values.tolist(), counts.tolist())))
            self.positions.setdefault(position, Counter()).update(bins)
            self.totals.update(bins)
        self.samples += 1
        return self

    def merge(self, other):
        self.totals.update(other.totals)
        for position, bins in other.positions.items():
            self.positions.setdefault(position, Counter()).update(bins)
        self.samples += other.samples
        return self

    def shifted(self, amount):
        return ExponentHistogram(
            name=self.name,
            totals=Counter({e + amount: c for e, c in self.totals.items()}),
            positions={
                p: Counter({e + amount: c for e, c in bins.items()})
                for p, bins in self.positions.items()
            },
            samples=self.samples,
        )

    def max_exponent(self):
        if self.empty:
            raise EmptyInputError(f"{self.name}: histogram is empty")
        return max(e for e, c in self.totals.items() if c > 0)

    def percentile(self, q=100.0):
        """Smallest exponent whose cumulative share reaches q percent"""
        if self.empty:
            raise EmptyInputError(f"{self.name}: histogram is empty")
        if q >= 100:
            return self.max_exponent()
        needed = self.total * q / 100.0
        running = 0
        for exponent in sorted(self.totals):
            running += self.totals[exponent]
            if running >= needed:
                return exponent
        return self.max_exponent()

    def to_json(self):
        return {
            "samples": self.samples,
            "hist": {str(e): int(c) for e, c in sorted(self.totals.items())},
            "positions": {
                str(p): {str(e): int(c) for e, c in sorted(bins.items())}
                for p, bins in sorted(self.positions.items())
            },
        }

    @classmethod
    def from_json(cls, name, data):
        try:
            return cls(
                name=name,
                totals=Counter({int(e): int(c) for e, c in data["hist"].items()}),
                positions={
                    int(p): Counter({int(e): int(c) for e, c in bins.items()})
                    for p, bins in data.get("positions", {}).items()
                },
                samples=int(data.get("samples", 0)),
            )
        except (KeyError, TypeError, ValueError) as e:
            raise FileFormatError(f"bad histogram for {name}: {e}") from e


def calibration_weights(weights, k_window):
    """Weights as the macro holds them once the E_T window is applied"""
    if k_window is None:
        return weights
    clipped, _ = clip_weight_window(weights, k_window)
    return clipped


def layer_histogram(name, inputs, weights, k_window=None):
    """Histogram of one layer over a list of row-blocked inputs"""
    weights = calibration_weights(weights, k_window)
    exponents = weights.block_exponents()
    histogram = ExponentHistogram(name)
    for x in inputs:
        histogram.record(block_scales(x, exponents), active_blocks(x))
    return histogram


def collect_histograms(model, batches, k_window=7):
    """
    Per-layer block-scale histograms over digital MXFP4 forwards.

    Raises:
        EmptyInputError: no calibration sequences
    """
    if not batches:
        raise EmptyInputError("calibration needs at least one input sequence")
    recorded = record_linear_inputs(model, batches)
    weights = model.linear_weights()
    return {
        name: layer_histogram(name, recorded[name], weights[name], k_window)
        for name in weights
    }


# ------------------------------------------------------------------ targets

@dataclass(frozen=True)
class TargetRule:
    """Per-evaluation E_N of an online strategy"""

    strategy: TargetStrategy
    offset: int = 0

    def targets(self, scales):
        return strategy_targets(scales, self.strategy, offset=self.offset)

    def __call__(self, scales):
        return self.targets(scales)


def select_target(histogram, strategy, percentile=100.0, offset=0):
    """
    RowHist: static E_N (max bin, or the requested percentile) plus offset.
    Row0/RowOptimal: a TargetRule evaluated on each column's block scales.
    """
    strategy = TargetStrategy.parse(strategy)
    if strategy.online:
        return TargetRule(strategy, offset)
    return histogram.percentile(percentile) + offset


@dataclass
class LayerCalibration:
    name: str
    strategy: TargetStrategy
    target_exponent: Optional[int]
    adc_fullscale: float
    max_abs_sum: float = 0.0
    histogram: Optional[ExponentHistogram] = None

    def second_pass_target(self, cm_bits):
        """E_N2 = E_N - cm for the second pass of a two-pass column"""
        if self.target_exponent is None or cm_bits is None:
            return None
        return self.target_exponent - cm_bits

    def to_json(self, cm_bits=None):
        entry = {
            "name": self.name,
            "E_N": self.target_exponent,
            "E_N2": self.second_pass_target(cm_bits),
            "adc_fullscale": self.adc_fullscale,
            "max_abs_sum": self.max_abs_sum,
        }
        if self.histogram is not None:
            entry.update(self.histogram.to_json())
        return entry


@dataclass
class ModelCalibration:
    model_hash: str
    strategy: TargetStrategy
    layers: dict
    percentile: float = 100.0
    k_window: Optional[int] = 7
    cm_bits: Optional[int] = 3

    def for_layer(self, name):
        try:
            return self.layers[name]
        except KeyError:
            raise CalibrationMissingError(f"layer {name}") from None

    def to_json(self):
        return {
            "model_hash": self.model_hash,
            "strategy": self.strategy.value,
            "percentile": self.percentile,
            "k_window": self.k_window,
            "cm_bits": self.cm_bits,
            "per_layer": [layer.to_json(self.cm_bits) for layer in self.layers.values()],
        }

    @classmethod
    def from_json(cls, data):
        try:
            strategy = TargetStrategy.parse(data["strategy"])
            layers = {}
            for entry in data["per_layer"]:
                histogram = None
                if "hist" in entry:
                    histogram = ExponentHistogram.from_json(entry["name"], entry)
                target = entry.get("E_N")
                layers[entry["name"]] = LayerCalibration(
                    name=entry["name"],
                    strategy=strategy,
                    target_exponent=None if target is None else int(target),
                    adc_fullscale=float(entry["adc_fullscale"]),
                    max_abs_sum=float(entry.get("max_abs_sum", 0.0)),
                    histogram=histogram,
                )
            return cls(
                model_hash=data["model_hash"],
                strategy=strategy,
                layers=layers,
                percentile=float(data.get("percentile", 100.0)),
                k_window=data.get("k_window", 7),
                cm_bits=data.get("cm_bits", 3),
            )
        except (KeyError, TypeError, ValueError) as e:
            raise FileFormatError(f"bad calibration JSON: {e}") from e


def calibrate_model(model, batches, strategy=TargetStrategy.ROW_HIST, percentile=100.0,
                    k_window=7, cm_bits=3):
    """
    Calibrate every linear layer for one strategy.

    The ADC fullscale is the power of two covering the largest pre-ADC sum
    seen with the strategy's targets, an unbounded window and an ideal ADC.
    """
    strategy = TargetStrategy.parse(strategy)
    if not batches:
        raise EmptyInputError("calibration needs at least one input sequence")
    window = None if strategy.online else k_window
    recorded = record_linear_inputs(model, batches)
    weights = model.linear_weights()
    probe = AnalogConfig.unbounded(strategy)
    layers = {}
    for name, tensor in weights.items():
        histogram = layer_histogram(name, recorded[name], tensor, window)
        target = None
        if not strategy.online:
            target = select_target(histogram, strategy, percentile)
        resident = AnalogLayerModel.build(name, tensor, target_exponent=target, k_window=window)
        max_abs = 0.0
        for x in recorded[name]:
            aligned, _ = pre_adc_sums(x, resident, probe)
            if np.size(aligned.value):
                max_abs = max(max_abs, float(np.max(np.abs(aligned.value))))
        layers[name] = LayerCalibration(
            name=name,
            strategy=strategy,
            target_exponent=target,
            adc_fullscale=fullscale_for(max_abs),
            max_abs_sum=max_abs,
            histogram=histogram,
        )
        logger.info(f"Calibrated {name}: E_N={target}, fullscale={layers[name].adc_fullscale:g}")
    return ModelCalibration(
        model_hash=model.fingerprint(),
        strategy=strategy,
        layers=layers,
        percentile=percentile,
        k_window=window,
        cm_bits=cm_bits,
    )


# ------------------------------------------------------------------ statistics

def saturation_stats(model, batches, calibration, cm_values, two_pass=True):
    """
    Overflow, underflow and preserved block fractions for each cm.

    Every layer sees the inputs of a digital forward, so the fractions
    describe the front end alone.
    """
    if not len(cm_values):
        raise EmptyInputError("saturation sweep needs at least one cm value")
    recorded = record_linear_inputs(model, batches)
    weights = model.linear_weights()
    window = None if calibration.strategy.online else calibration.k_window
    residents = {}
    for name, tensor in weights.items():
        entry = calibration.for_layer(name)
        residents[name] = AnalogLayerModel.build(
            name, tensor, entry.target_exponent, entry.adc_fullscale, k_window=window
        )
    rows = []
    for cm in cm_values:
        cfg = AnalogConfig(cm_bits=cm, adc_bits=None, k_window=window, two_pass=two_pass,
                           strategy=calibration.strategy)
        diagnostics = Diagnostics()
        for name, inputs in recorded.items():
            for x in inputs:
                pre_adc_sums(x, residents[name], cfg, diagnostics)
        evaluations = max(diagnostics.block_evaluations, 1)
        overflow = diagnostics.overflow_blocks / evaluations
        underflow = diagnostics.underflow_blocks / evaluations
        rows.append({
            "cm": "inf" if cm is None else cm,
            "overflow_fraction": overflow,
            "underflow_fraction": underflow,
            "preserved_fraction": 1.0 - overflow - underflow,
            "block_evaluations": diagnostics.block_evaluations,
        })
    return rows


STRATEGY_VARIANTS = {
    "RowHist": (TargetStrategy.ROW_HIST, False),
    "RowHist-2Pass": (TargetStrategy.ROW_HIST, True),
    "Row0": (TargetStrategy.ROW_0, False),
    "RowOptimal": (TargetStrategy.ROW_OPTIMAL, False),
}


def compare_strategies(model, batches, cm_bits=3, adc_bits=10, offset=0, calibrations=None,
                       threads=1):
    """
    Mean per-layer error against the digital datapath for each strategy variant.

    A run where RowHist-2Pass is not the lowest is logged, not raised.
    """
    calibrations = dict(calibrations or {})
    results = {}
    for label, (strategy, two_pass) in STRATEGY_VARIANTS.items():
        if strategy not in calibrations:
            calibrations[strategy] = calibrate_model(model, batches, strategy, cm_bits=cm_bits)
        cfg = AnalogConfig(cm_bits=cm_bits, adc_bits=adc_bits, two_pass=two_pass,
                           strategy=strategy, offset=offset)
        per_layer, end_to_end = analog_vs_digital_errors(
            model, batches, cfg, calibrations[strategy], threads=threads
        )
        results[label] = {
            "mean_layer_error": float(np.mean(per_layer)) if per_layer else 0.0,
            "end_to_end_error": end_to_end,
        }
    best = min(results, key=lambda k: results[k]["mean_layer_error"])
    if results["RowHist-2Pass"]["mean_layer_error"] > results[best]["mean_layer_error"]:
        logger.warning(
            f"RowHist-2Pass is not the best strategy at cm={cm_bits}: "
            f"{best} reached {results[best]['mean_layer_error']:.4g} vs "
            f"{results['RowHist-2Pass']['mean_layer_error']:.4g}"
        )
    return results


# ------------------------------------------------------------------ persistence

class CalibrationStore:
    """calibration.json inside a model bundle directory"""

    FILENAME = "calibration.json"

    def __init__(self, model_dir):
        self.model_dir = model_dir
        self.path = os.path.join(model_dir, self.FILENAME)

    def exists(self):
        return os.path.exists(self.path)

    def load(self, model=None):
        """Stored calibration, or None when the bundle has none yet"""
        if not self.exists():
            logger.debug(f"No calibration at {self.path}")
            return None
        try:
            with open(self.path, "r") as f:
                data = json.load(f)
        except json.JSONDecodeError as e:
            raise FileFormatError(f"{self.path}: {e}") from e
        calibration = ModelCalibration.from_json(data)
        if model is not None and calibration.model_hash != model.fingerprint():
            logger.warning(
                f"{self.path} was made for model {calibration.model_hash}, "
                f"applying it to {model.fingerprint()}"
            )
        logger.debug(f"Loaded {calibration.strategy.value} calibration for {len(calibration.layers)} layers")
        return calibration

    def require(self, model=None):
        calibration = self.load(model)
        if calibration is None:
            raise CalibrationMissingError(self.model_dir)
        return calibration

    def save(self, calibration):
        os.makedirs(self.model_dir, exist_ok=True)
        with open(self.path, "w") as f:
            json.dump(calibration.to_json(), f, indent=2)
        logger.debug(f"Saved calibration to {self.path}")
        return self.path

    def clear(self):
        if self.exists():
            os.remove(self.path)
            logger.debug(f"Deleted {self.path}")
            return True
        return False
