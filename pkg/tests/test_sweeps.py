import pytest

from src.core.errors import ConfigurationError, EmptyInputError
from src.services.presets import PresetLibrary
from src.services.sweeps import TABLE_COLUMNS, _compare, build_tables, cm_sweep, seq_sweep


def test_compare_cells():
    assert _compare("t1", "x", "max_batch", 150, 150, {"rel": 0})["within"]
    assert not _compare("t1", "x", "max_batch", 151, 150, {"rel": 0})["within"]
    cell = _compare("t5", "base", "tops", 1600.0, 1515.14, {"rel": 0.10})
    assert cell["within"] and cell["rel_deviation"] == pytest.approx(0.056, abs=1e-3)
    assert _compare("t5", "base", "balance_seq_len", 280, 256, {"abs": 32})["within"]
    assert not _compare("t5", "base", "balance_seq_len", 320, 256, {"abs": 32})["within"]


@pytest.mark.parametrize("table", ["t1", "t3", "t5", "t8"])
def test_each_table_reproduces_within_tolerance(table):
    rows, columns, all_within = build_tables(PresetLibrary(), [table])
    assert columns == TABLE_COLUMNS
    assert rows and all_within


def test_unknown_table():
    with pytest.raises(ConfigurationError):
        build_tables(PresetLibrary(), ["t2"])


def test_seq_sweep_rows():
    library = PresetLibrary()
    system = library.system("large")
    rows, columns, balance = seq_sweep(system.filling_model(), system, range(64, 513, 64))
    assert len(rows) == 8 and list(rows[0]) == columns
    assert balance == 192
    with pytest.raises(EmptyInputError):
        seq_sweep(system.filling_model(), system, [])


def test_cm_sweep_error_shrinks_with_budget(spread_model, toy_batches, spread_calibration):
    rows, columns = cm_sweep(spread_model, toy_batches, spread_calibration, [1, 6, None])
    assert columns[0] == "cm"
    assert [row["cm"] for row in rows] == [1, 6, "inf"]
    assert rows[0]["underflow_blocks"] > rows[1]["underflow_blocks"] >= rows[2]["underflow_blocks"] == 0
    assert rows[0]["mean_layer_error"] > rows[2]["mean_layer_error"]
