import pytest

from src.core.errors import ConfigurationError, EmptyInputError
from src.services.perf_model import (
    SystemConfig,
    check_mapping,
    io_penalty,
    macro_summary,
    macro_tops,
    max_batch,
    model_throughput,
    pipeline_period,
    power_estimate,
    stage_times,
    static_fraction,
    system_peak,
    tops_curve,
)
from src.services.presets import PresetLibrary


@pytest.fixture(scope="module")
def library():
    return PresetLibrary()


@pytest.fixture(scope="module")
def base(library):
    return library.system("base")


@pytest.fixture(scope="module")
def bert_base(library):
    return library.model("BERT-Base")


def test_macro_tops(base, library):
    assert macro_tops(768, 768, 10, 169e6) == pytest.approx(2 * 768 * 768 * 169e6 / 10 / 1e12)
    assert macro_tops(768, 768, 10, 169e6) == pytest.approx(19.936, rel=1e-4)
    assert macro_tops(768, 768, 10, 169e6) == pytest.approx(20.02, rel=0.01)
    assert macro_tops(1024, 1024, 10, 169e6) == pytest.approx(35.72, rel=0.01)
    assert macro_tops(768, 768, 10, 169e6, passes=2) == pytest.approx(2 * 768 * 768 * 169e6 / 10 / 1e12 / 2)
    one, two = macro_summary(base, 1), macro_summary(base, 2)
    assert two["tops_per_w"] == pytest.approx(one["tops_per_w"] / 2)
    assert one["area_mm2"] == two["area_mm2"]
    with pytest.raises(ConfigurationError):
        macro_tops(768, 768, 0, 169e6)


def test_max_batch_and_io_penalty(library, bert_base):
    assert max_batch(bert_base) == 150
    assert max_batch(library.model("BERT-Large")) == 112
    assert io_penalty(bert_base, 1) == pytest.approx(140, rel=0.01)
    assert io_penalty(bert_base, 150) < io_penalty(bert_base, 1)
    with pytest.raises(ConfigurationError):
        io_penalty(bert_base, 0)


def test_stage_bound_moves_from_analog_to_digital(base, bert_base):
    assert model_throughput(bert_base, base, 32).bound == "analog"
    assert model_throughput(bert_base, base, 512).bound == "digital"
    t_analog, t_digital, t_link = stage_times(bert_base, base, 256)
    assert t_link == 0.0
    assert pipeline_period(bert_base, base, 256) == max(t_analog, t_digital)


def test_static_fraction_falls_with_sequence_length(bert_base):
    fractions = [static_fraction(bert_base, n) for n in (32, 128, 512)]
    assert fractions == sorted(fractions, reverse=True)
    assert 0 < fractions[-1] < fractions[0] < 1


def test_balance_points(library, base):
    _, balance = tops_curve(base.filling_model(), base, range(32, 513, 32))
    assert 224 <= balance <= 288
    peak = system_peak(base)
    assert peak["balance_seq_len"] == 256
    # at the reference length every component runs at its measured power
    assert peak["power_w"] == pytest.approx(163.16)
    assert system_peak(library.system("large"))["balance_seq_len"] == 192
    with pytest.raises(EmptyInputError):
        tops_curve(base.filling_model(), base, [])


def test_power_grows_with_digital_duty(base, bert_base):
    assert power_estimate(bert_base, base, 512) > power_estimate(bert_base, base, 64)


def test_two_chip_mappings_add_a_short_link_stage(library):
    for config in library.zoo():
        system = library.mapped_system(config.name)
        report = model_throughput(config, system)
        if system.chips > 1:
            assert 0 < report.t_link < report.period
        else:
            assert report.t_link == 0.0


def test_mapping_errors(library, base):
    bert_large = library.model("BERT-Large")
    with pytest.raises(ConfigurationError):
        check_mapping(bert_large, base)
    with pytest.raises(ConfigurationError):
        check_mapping(bert_large, library.system("large"))
    check_mapping(bert_large, library.system("large", chips=2))
    with pytest.raises(ConfigurationError):
        model_throughput(library.model("BERT-Base"), base, 1024)


def test_system_config_validation(base):
    with pytest.raises(ConfigurationError):
        base.with_passes(3)
    with pytest.raises(ConfigurationError):
        SystemConfig.from_dict({**base.to_dict(), "voltage": 0.8})
    with pytest.raises(ConfigurationError):
        SystemConfig.from_dict({**base.to_dict(), "components": {"x": {"power_w": 1, "area_mm2": 1, "group": "io"}}})
