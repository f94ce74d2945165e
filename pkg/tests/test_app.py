import csv
import json

import numpy as np
import pytest

from app import EXIT_OK, EXIT_USAGE, main, parse_range
from src.api.tensor_files import read_mxt1, write_f64m
from src.core.errors import ConfigurationError, EmptyInputError

SMALL_RUN = ["--sequences", "2", "--tokens", "32"]


@pytest.fixture(autouse=True)
def clean_environment(monkeypatch):
    monkeypatch.delenv("MXSIM_THREADS", raising=False)
    monkeypatch.delenv("MXSIM_CONFIG_DIR", raising=False)


@pytest.fixture(scope="module")
def calibrated_bundle(tmp_path_factory):
    bundle = tmp_path_factory.mktemp("models") / "toy"
    assert main(["build", str(bundle), "--model", "toy", "--seed", "0"]) == EXIT_OK
    out = bundle.parent / "calibration-summary.json"
    assert main(["calibrate", str(bundle), "--cm", "99", "--out", str(out), *SMALL_RUN]) == EXIT_OK
    assert (bundle / "calibration.json").exists()
    return bundle


def read_csv(path):
    lines = path.read_text().splitlines()
    assert lines[0].startswith("# manifest=")
    return list(csv.DictReader(lines[1:]))


def test_parse_range():
    assert parse_range("32:96:32") == [32, 64, 96]
    assert parse_range("8,10,ideal") == [8, 10, None]
    with pytest.raises(ConfigurationError):
        parse_range("1:5:0")
    with pytest.raises(EmptyInputError):
        parse_range("5:1")


def test_quantize_writes_tensor_and_stats(tmp_path):
    matrix = np.zeros((2, 32))
    matrix[0, 3] = 96.0
    source = write_f64m(tmp_path / "m.f64m", matrix)
    out = tmp_path / "m.mxt1"
    assert main(["quantize", str(source), "--out", str(out)]) == EXIT_OK
    np.testing.assert_array_equal(read_mxt1(out).dequantize(), matrix)
    stats = json.loads((tmp_path / "m.mxt1.json").read_text())
    assert stats["stats"]["max_exponent"] == 4
    assert stats["stats"]["zero_blocks"] == 1
    assert len(stats["manifest"]["hash"]) == 64


def test_tables_within_tolerance(tmp_path):
    out = tmp_path / "tables.csv"
    assert main(["tables", "--out", str(out)]) == EXIT_OK
    rows = read_csv(out)
    assert {row["table"] for row in rows} == {"t1", "t3", "t5", "t8"}
    assert all(row["within"] == "True" for row in rows)


def test_usage_errors(tmp_path):
    assert main(["tables", "t9"]) == EXIT_USAGE
    assert main(["run", str(tmp_path / "missing"), "--mode", "digital"]) == EXIT_USAGE
    with pytest.raises(SystemExit) as excinfo:
        main(["run", str(tmp_path), "--mode", "hybrid"])
    assert excinfo.value.code == 2


def test_analog_run_needs_calibration(tmp_path):
    bundle = tmp_path / "toy"
    assert main(["build", str(bundle), "--model", "toy"]) == EXIT_OK
    assert main(["run", str(bundle), "--mode", "analog", *SMALL_RUN]) == EXIT_USAGE


def test_unbounded_analog_run_matches_digital(tmp_path, calibrated_bundle):
    out = tmp_path / "report.json"
    args = ["run", str(calibrated_bundle), "--mode", "analog", "--cm", "99", "--adc", "ideal",
            "--out", str(out), *SMALL_RUN]
    assert main(args) == EXIT_OK
    report = json.loads(out.read_text())
    assert report["analog_config"] == "row_hist+0/cminf/ideal/2pass"
    assert report["max_abs_diff_analog_vs_digital"] == 0.0
    assert report["manifest"]["command"] == "run"
    assert report["manifest"]["settings"]["cm"] is None


def test_digital_run_reports_reference_error(tmp_path):
    bundle = tmp_path / "toy"
    assert main(["build", str(bundle), "--model", "toy", "--scale-spread", "0"]) == EXIT_OK
    out = tmp_path / "digital.json"
    assert main(["run", str(bundle), "--mode", "digital", "--out", str(out), *SMALL_RUN]) == EXIT_OK
    report = json.loads(out.read_text())
    assert len(report["predictions"]) == 2
    per_layer = report["digital_vs_reference_per_layer"]
    assert len(per_layer) == 2
    assert all(0 < e < 0.15 for e in per_layer)
    assert all(0 < e < 0.25 for e in report["digital_vs_reference"])


def test_analog_run_applies_the_stored_strategy(tmp_path):
    bundle = tmp_path / "toy"
    assert main(["build", str(bundle), "--model", "toy"]) == EXIT_OK
    calibrate = ["calibrate", str(bundle), "--strategy", "row0", "--out", str(tmp_path / "cal.json"), *SMALL_RUN]
    assert main(calibrate) == EXIT_OK
    out = tmp_path / "row0.json"
    assert main(["run", str(bundle), "--mode", "analog", "--out", str(out), *SMALL_RUN]) == EXIT_OK
    report = json.loads(out.read_text())
    assert report["analog_config"].startswith("row0+0/")
    assert report["manifest"]["settings"]["strategy"] == "row0"
    # an explicit flag still wins over the stored strategy
    assert main(["run", str(bundle), "--mode", "analog", "--strategy", "row_hist", *SMALL_RUN]) == EXIT_USAGE


def test_seq_sweep_peaks_near_balance(tmp_path):
    out = tmp_path / "seq.csv"
    assert main(["sweep", "seq", "--system", "base", "--out", str(out)]) == EXIT_OK
    rows = read_csv(out)
    assert [int(r["N"]) for r in rows] == list(range(32, 513, 32))
    peak = max(rows, key=lambda r: float(r["tops"]))
    assert 224 <= int(peak["N"]) <= 288


def test_adc_sweep_error_falls_with_resolution(tmp_path, calibrated_bundle):
    out = tmp_path / "adc.csv"
    args = ["sweep", "adc", "--model-dir", str(calibrated_bundle), "--range", "6,10", "--cm", "inf",
            "--out", str(out), *SMALL_RUN]
    assert main(args) == EXIT_OK
    rows = read_csv(out)
    assert [r["adc_bits"] for r in rows] == ["6", "10"]
    assert float(rows[0]["end_to_end_error"]) > float(rows[1]["end_to_end_error"])


def test_flops_sweep_covers_the_zoo(tmp_path):
    out = tmp_path / "flops.csv"
    assert main(["sweep", "flops", "--out", str(out)]) == EXIT_OK
    rows = read_csv(out)
    assert "BERT-Base" in {r["model"] for r in rows}
    assert all(0 < float(r["static_fraction"]) < 1 for r in rows)
