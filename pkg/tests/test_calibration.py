import json
from collections import Counter

import numpy as np
import pytest

from src.core.errors import CalibrationMissingError, EmptyInputError, FileFormatError
from src.core.mxfp_core import MxTensor
from src.services.analog_cim import TargetStrategy
from src.services.calibration import (
    STRATEGY_VARIANTS,
    CalibrationStore,
    ExponentHistogram,
    ModelCalibration,
    TargetRule,
    calibrate_model,
    collect_histograms,
    compare_strategies,
    layer_histogram,
    saturation_stats,
    select_target,
)


def histogram(bins):
    return ExponentHistogram("layer00.q", totals=Counter(bins))


def test_row_hist_target_is_max_bin():
    hist = histogram({5: 10, 7: 2})
    assert select_target(hist, "row_hist") == 7
    assert select_target(hist, "row_hist", offset=-1) == 6
    assert select_target(hist, "row_hist", percentile=50) == 5


def test_empty_histogram_has_no_target():
    with pytest.raises(EmptyInputError):
        select_target(ExponentHistogram("layer00.q"), "row_hist")


def test_online_strategies_return_rules():
    rule = select_target(histogram({5: 1}), TargetStrategy.ROW_OPTIMAL, offset=1)
    assert isinstance(rule, TargetRule)
    # lower median of [1, 3, 5, 9] plus the offset
    assert int(rule(np.array([[1, 5, 3, 9]]))[0]) == 4
    row0 = select_target(histogram({5: 1}), "row0")
    assert int(row0(np.array([[1, 5, 3, 9]]))[0]) == 1


def test_histogram_json_and_merge():
    hist = ExponentHistogram("layer00.q")
    hist.record(np.array([[[3, 4], [3, 5]]]))
    hist.record(np.array([[[2, 4], [9, 9]]]), active=np.array([[[True, True], [False, False]]]))
    assert hist.totals == Counter({3: 2, 4: 2, 5: 1, 2: 1})
    assert hist.positions[1] == Counter({4: 2, 5: 1})
    restored = ExponentHistogram.from_json("layer00.q", json.loads(json.dumps(hist.to_json())))
    assert restored.totals == hist.totals and restored.samples == 2
    merged = ExponentHistogram("layer00.q").merge(hist).merge(hist)
    assert merged.total == 2 * hist.total
    with pytest.raises(FileFormatError):
        ExponentHistogram.from_json("layer00.q", {"positions": {}})


def test_doubling_inputs_shifts_histogram(rng, toy_model):
    weights = toy_model.linear_weights()["layer00.q"]
    x = MxTensor.quantize(rng.normal(size=(16, 64)))
    doubled = MxTensor.quantize(2.0 * x.dequantize())
    base = layer_histogram("layer00.q", [x], weights)
    shifted = layer_histogram("layer00.q", [doubled], weights)
    assert shifted.totals == base.shifted(1).totals
    assert shifted.max_exponent() == base.max_exponent() + 1


def test_collected_histograms_count_block_evaluations(toy_model, toy_batches):
    histograms = collect_histograms(toy_model, toy_batches)
    assert list(histograms) == list(toy_model.linear_weights())
    # 2 sequences x 32 tokens x 64 columns x 2 blocks
    assert histograms["layer00.q"].total == 2 * 32 * 64 * 2
    assert histograms["layer00.ffn2"].total == 2 * 32 * 64 * 8
    with pytest.raises(EmptyInputError):
        collect_histograms(toy_model, [])


def test_calibration_covers_every_layer(toy_model, toy_calibration):
    assert set(toy_calibration.layers) == set(toy_model.linear_weights())
    assert toy_calibration.model_hash == toy_model.fingerprint()
    for entry in toy_calibration.layers.values():
        assert entry.target_exponent == entry.histogram.max_exponent()
        assert entry.adc_fullscale >= entry.max_abs_sum > 0
        assert np.log2(entry.adc_fullscale) == int(np.log2(entry.adc_fullscale))
    with pytest.raises(CalibrationMissingError):
        toy_calibration.for_layer("layer09.q")


def test_online_calibration_has_no_static_target(toy_model, toy_batches):
    calibration = calibrate_model(toy_model, toy_batches[:1], strategy="row0")
    assert all(entry.target_exponent is None for entry in calibration.layers.values())
    assert calibration.k_window is None


def test_saturation_statistics(toy_model, toy_batches, toy_calibration):
    rows = saturation_stats(toy_model, toy_batches, toy_calibration, [0, 1, 2, 3, 5, None])
    assert [row["cm"] for row in rows] == [0, 1, 2, 3, 5, "inf"]
    underflow = [row["underflow_fraction"] for row in rows]
    assert underflow == sorted(underflow, reverse=True)
    assert underflow[0] > 0
    assert underflow[-1] == 0
    for row in rows:
        # targets come from these very inputs, so nothing exceeds them
        assert row["overflow_fraction"] == 0
        assert row["preserved_fraction"] == pytest.approx(1.0 - row["underflow_fraction"])
        assert row["block_evaluations"] > 0
    with pytest.raises(EmptyInputError):
        saturation_stats(toy_model, toy_batches, toy_calibration, [])


def test_single_pass_underflows_more(spread_model, toy_batches, spread_calibration):
    two = saturation_stats(spread_model, toy_batches, spread_calibration, [2])[0]
    one = saturation_stats(spread_model, toy_batches, spread_calibration, [2], two_pass=False)[0]
    assert one["underflow_fraction"] >= two["underflow_fraction"]
    four = saturation_stats(spread_model, toy_batches, spread_calibration, [4], two_pass=False)[0]
    assert four["underflow_fraction"] == pytest.approx(two["underflow_fraction"])


@pytest.mark.slow
def test_compare_strategies_reports_every_variant(toy_model, toy_batches, toy_calibration):
    results = compare_strategies(
        toy_model, toy_batches, calibrations={TargetStrategy.ROW_HIST: toy_calibration}
    )
    assert set(results) == set(STRATEGY_VARIANTS)
    for entry in results.values():
        assert entry["mean_layer_error"] >= 0
        assert entry["end_to_end_error"] >= 0


def test_store_round_trip(tmp_path, toy_model, toy_calibration):
    store = CalibrationStore(tmp_path / "bundle")
    assert store.load() is None
    with pytest.raises(CalibrationMissingError):
        store.require()
    store.save(toy_calibration)
    loaded = store.require(toy_model)
    assert loaded.strategy is TargetStrategy.ROW_HIST
    assert loaded.model_hash == toy_calibration.model_hash
    for name, entry in toy_calibration.layers.items():
        assert loaded.for_layer(name).target_exponent == entry.target_exponent
        assert loaded.for_layer(name).adc_fullscale == entry.adc_fullscale
        assert loaded.for_layer(name).histogram.totals == entry.histogram.totals
    data = json.loads((tmp_path / "bundle" / "calibration.json").read_text())
    first = data["per_layer"][0]
    assert first["E_N2"] == first["E_N"] - 3
    assert store.clear() and not store.exists()
    assert not store.clear()


def test_bad_calibration_files(tmp_path):
    with pytest.raises(FileFormatError):
        ModelCalibration.from_json({"strategy": "row_hist"})
    with pytest.raises(FileFormatError):
        ModelCalibration.from_json({"strategy": "row_hist", "model_hash": "x",
                                    "per_layer": [{"name": "layer00.q"}]})
    store = CalibrationStore(tmp_path)
    (tmp_path / "calibration.json").write_text("{not json")
    with pytest.raises(FileFormatError):
        store.load()
