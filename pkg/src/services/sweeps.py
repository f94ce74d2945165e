"""Sweeps - Parameter sweeps and published-table reproductions as flat rows

Every builder returns a list of dicts in a deterministic order plus the
column list the CSV writer should use.
"""

from concurrent.futures import ThreadPoolExecutor

from src.core.diagnostics import Diagnostics
from src.core.errors import ConfigurationError, EmptyInputError
from src.services.analog_cim import AnalogConfig
from src.services.calibration import compare_strategies, saturation_stats
from src.services.perf_model import (
    flop_split,
    io_penalty,
    macro_summary,
    max_batch,
    model_throughput,
    static_fraction,
    system_peak,
    tops_curve,
)
from src.services.transformer_runner import ExecutionMode, analog_vs_digital_errors, run_batch
from src.utils.log import get_logger

logger = get_logger(__name__)

SEQ_COLUMNS = ["N", "t_analog_us", "t_digital_us", "period_us", "fps", "tops", "power_w", "bw_gibs"]
ERROR_COLUMNS = ["mean_layer_error", "end_to_end_error", "underflow_blocks", "overflow_blocks", "adc_saturations"]
TABLE_COLUMNS = ["table", "row", "metric", "model_value", "reference_value", "rel_deviation", "tolerance", "within"]
SWEEP_KINDS = ("seq", "adc", "cm", "strategy", "saturation", "flops")


def _require_points(points, kind):
    points = list(points)
    if not points:
        raise EmptyInputError(f"{kind} sweep needs at least one point")
    return points


def _parallel(fn, points, threads):
    if threads <= 1 or len(points) <= 1:
        return [fn(p) for p in points]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, points))


# ------------------------------------------------------------------ perf sweeps

def seq_sweep(model, system, seq_lens):
    reports, balance = tops_curve(model, system, _require_points(seq_lens, "seq"))
    rows = [
        {
            "N": r.seq_len,
            "t_analog_us": r.t_analog * 1e6,
            "t_digital_us": r.t_digital * 1e6,
            "period_us": r.period * 1e6,
            "fps": r.fps,
            "tops": r.tops,
            "power_w": r.power_w,
            "bw_gibs": r.io_bandwidth_gibs,
        }
        for r in reports
    ]
    logger.info(f"{model.name} on {system.name}: balance at N={balance}")
    return rows, SEQ_COLUMNS, balance


def flops_sweep(models):
    """Static/dynamic op split of each model at its own sequence length"""
    rows = []
    for model in _require_points(models, "flops"):
        static, dynamic = flop_split(model, model.seq_len)
        rows.append({
            "model": model.name,
            "N": model.seq_len,
            "static_ops": static,
            "dynamic_ops": dynamic,
            "static_fraction": static_fraction(model, model.seq_len),
        })
    return rows, ["model", "N", "static_ops", "dynamic_ops", "static_fraction"]


# ------------------------------------------------------------------ datapath sweeps

def _error_row(model, batches, cfg, calibration, digital, threads):
    diagnostics = Diagnostics()
    per_layer, end_to_end = analog_vs_digital_errors(
        model, batches, cfg, calibration, threads, digital, diagnostics
    )
    return {
        "mean_layer_error": sum(per_layer) / len(per_layer) if per_layer else 0.0,
        "end_to_end_error": end_to_end,
        "underflow_blocks": diagnostics.underflow_blocks,
        "overflow_blocks": diagnostics.overflow_blocks,
        "adc_saturations": diagnostics.adc_saturations,
    }


def adc_sweep(model, batches, calibration, adc_values, base_cfg=None, threads=1):
    """Error against the digital datapath for each ADC resolution"""
    points = _require_points(adc_values, "adc")
    base_cfg = base_cfg or AnalogConfig(cm_bits=None, strategy=calibration.strategy)
    digital = run_batch(model, batches, ExecutionMode.digital(), threads=threads)

    def point(bits):
        cfg = base_cfg.with_overrides(adc_bits=bits)
        return {"adc_bits": "ideal" if bits is None else bits,
                **_error_row(model, batches, cfg, calibration, digital, 1)}

    return _parallel(point, points, threads), ["adc_bits"] + ERROR_COLUMNS


def cm_sweep(model, batches, calibration, cm_values, base_cfg=None, threads=1):
    """Error against the digital datapath for each current-mirror budget"""
    points = _require_points(cm_values, "cm")
    base_cfg = base_cfg or AnalogConfig(adc_bits=None, strategy=calibration.strategy)
    digital = run_batch(model, batches, ExecutionMode.digital(), threads=threads)

    def point(cm):
        cfg = base_cfg.with_overrides(cm_bits=cm)
        return {"cm": "inf" if cm is None else cm,
                **_error_row(model, batches, cfg, calibration, digital, 1)}

    return _parallel(point, points, threads), ["cm"] + ERROR_COLUMNS


def strategy_sweep(model, batches, cm_values, adc_bits=10, offset=0, threads=1):
    """One row per cm with a column per strategy variant"""
    points = _require_points(cm_values, "strategy")
    labels = None
    rows = []
    for cm in points:
        results = compare_strategies(model, batches, cm_bits=cm, adc_bits=adc_bits, offset=offset,
                                     threads=threads)
        labels = labels or list(results)
        rows.append({"cm": cm, **{label: results[label]["mean_layer_error"] for label in labels}})
    return rows, ["cm"] + labels


def saturation_sweep(model, batches, calibration, cm_values, two_pass=True):
    rows = saturation_stats(model, batches, calibration, _require_points(cm_values, "saturation"), two_pass)
    return rows, ["cm", "overflow_fraction", "underflow_fraction", "preserved_fraction", "block_evaluations"]


# ------------------------------------------------------------------ tables

def _compare(table, row, metric, model_value, reference, tolerance):
    """One table cell; tolerance is {"rel": x} or {"abs": x}"""
    deviation = abs(model_value - reference) / abs(reference) if reference else abs(model_value)
    if "abs" in tolerance:
        limit = tolerance["abs"]
        within = abs(model_value - reference) <= limit
    else:
        limit = tolerance.get("rel", 0.0)
        within = deviation <= limit if limit else model_value == reference
    return {
        "table": table,
        "row": row,
        "metric": metric,
        "model_value": model_value,
        "reference_value": reference,
        "rel_deviation": deviation,
        "tolerance": limit,
        "within": bool(within),
    }


def _table_cells(table, row, values, references, tolerances):
    return [
        _compare(table, row, metric, values[metric], reference, tolerances[metric])
        for metric, reference in references.items()
    ]


def table_t1(library, entry):
    rows = []
    for name, references in entry["rows"].items():
        model = library.model(name)
        b_max = max_batch(model)
        values = {
            "max_batch": b_max,
            "penalty_max_batch": io_penalty(model, b_max),
            "penalty_batch1": io_penalty(model, 1),
        }
        rows += _table_cells("t1", name, values, references, entry["tolerances"])
    return rows


def table_t3(library, entry):
    rows = []
    for system_name, references in entry["rows"].items():
        system = library.system(system_name)
        for passes in (1, 2):
            summary = macro_summary(system, passes)
            scaled = {k: v / passes for k, v in references.items()}
            label = f"{summary['array']}/{passes}pass"
            rows += _table_cells("t3", label, summary, scaled, entry["tolerances"])
    return rows


def table_t5(library, entry):
    rows = []
    for system_name, references in entry["rows"].items():
        peak = system_peak(library.system(system_name))
        rows += _table_cells("t5", system_name, peak, references, entry["tolerances"])
    return rows


def table_t8(library, entry):
    rows = []
    for name, references in entry["rows"].items():
        model = library.model(name)
        system = library.mapped_system(name)
        report = model_throughput(model, system).as_dict()
        rows += _table_cells("t8", f"{name}@{system.chips}x{system.name}", report, references, entry["tolerances"])
    return rows


TABLE_BUILDERS = {"t1": table_t1, "t3": table_t3, "t5": table_t5, "t8": table_t8}


def build_tables(library, which=("t1", "t3", "t5", "t8")):
    """
    Model values next to the published ones for each requested table.

    Returns:
        (rows, columns, all_within)
    """
    references = library.references()
    rows = []
    for table in which:
        if table not in TABLE_BUILDERS:
            raise ConfigurationError(f"unknown table {table!r}; choose from {sorted(TABLE_BUILDERS)}")
        rows += TABLE_BUILDERS[table](library, references[table])
    failures = [r for r in rows if not r["within"]]
    for r in failures:
        logger.warning(
            f"{r['table']} {r['row']} {r['metric']}: {r['model_value']:.6g} vs "
            f"{r['reference_value']:.6g} ({r['rel_deviation']:.2%} > {r['tolerance']})"
        )
    return rows, TABLE_COLUMNS, not failures
