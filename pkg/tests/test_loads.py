import pytest
import numpy as np
import pandas as pd
from scipy import integrate
from dnn_dsse.loads import LoadModeler, LoadPdf, LoadModelError, SamplerConfig, SmartMeterSeries


@pytest.fixture
def meter_series():
    return [
        SmartMeterSeries("m1", "T1", ((1.0, 2.0), (1.0, 4.0), (1.0, 6.0))),
        SmartMeterSeries("m2", "T1", ((1.0, 1.0), (1.0, 1.0), (1.0, 1.0))),
        SmartMeterSeries("m3", "T2", ((0.5, 1.0), (0.5, 2.0), (0.5, 3.0))),
    ]


def test_series_validation():
    with pytest.raises(LoadModelError):
        SmartMeterSeries("m", "T", ((0.0, 1.0),))
    with pytest.raises(LoadModelError):
        SmartMeterSeries("m", "T", ((1.0, -1.0),))


def test_aggregate_to_transformer(meter_series):
    aggregated = LoadModeler.aggregate_to_transformer(meter_series)
    assert np.allclose(aggregated["T1"], [3.0, 5.0, 7.0])
    assert np.allclose(aggregated["T2"], [2.0, 4.0, 6.0])
    with pytest.raises(LoadModelError, match="T9"):
        LoadModeler.aggregate_to_transformer(meter_series, ["T9"])


def test_aggregate_time_base_mismatch(meter_series):
    meter_series.append(SmartMeterSeries("m4", "T2", ((1.0, 1.0), (1.0, 1.0), (1.0, 1.0))))
    with pytest.raises(LoadModelError, match="time base"):
        LoadModeler.aggregate_to_transformer(meter_series)


def test_meter_file_round_trip(meter_series, tmp_path):
    path = tmp_path / "meters.csv"
    LoadModeler.to_frame(meter_series).to_csv(path, index=False)
    loaded = LoadModeler.read_meter_file(str(path))
    assert [s.meter_id for s in loaded] == ["m1", "m2", "m3"]
    assert loaded[0] == meter_series[0]


def test_meter_file_errors(tmp_path):
    path = tmp_path / "meters.csv"
    pd.DataFrame({"meter_id": ["m1"], "energy_kwh": [1.0]}).to_csv(path, index=False)
    with pytest.raises(LoadModelError, match="lacks columns"):
        LoadModeler.read_meter_file(str(path))
    pd.DataFrame({"meter_id": ["m1", "m1"], "transformer_group": ["T1", "T2"], "interval_hours": [1, 1],
                  "energy_kwh": [1.0, 2.0]}).to_csv(path, index=False)
    with pytest.raises(LoadModelError, match="exactly one"):
        LoadModeler.read_meter_file(str(path))


def test_fit_kde_too_few_samples():
    with pytest.raises(LoadModelError, match="at least"):
        LoadModeler.fit_kde(np.ones(10), group_id="T1")


def test_fit_kde_constant_load():
    pdf = LoadModeler.fit_kde(np.full(100, 12.5), group_id="T1")
    assert pdf.point_mass
    draws = pdf.draw(np.random.default_rng(0), 1000)
    assert np.all(np.abs(draws - 12.5) <= 4 * pdf.bandwidth)


def test_fit_kde_reproduces_data():
    samples = np.random.default_rng(3).gamma(4.0, 25.0, size=2000)
    pdf = LoadModeler.fit_kde(samples, group_id="T1", seed=11)
    assert pdf.bandwidth > 0
    assert pdf.mean() == pytest.approx(samples.mean())
    mass, _ = integrate.quad(lambda x: pdf.density(x)[0], samples.min() - 10 * pdf.bandwidth,
                             samples.max() + 10 * pdf.bandwidth, limit=200)
    assert mass == pytest.approx(1.0, abs=1e-3)
    lo, hi = pdf.quantile(0.025), pdf.quantile(0.975)
    assert np.mean((samples >= lo) & (samples <= hi)) >= 0.94
    assert pdf.cdf(pdf.quantile(0.3)) == pytest.approx(0.3, abs=1e-8)
    # fitting is deterministic for a given seed
    assert LoadModeler.fit_kde(samples, group_id="T1", seed=11).bandwidth == pdf.bandwidth


def test_pdf_round_trip():
    pdf = LoadPdf("T1", np.array([1.0, 2.0, 4.0]), 0.5)
    again = LoadPdf.from_dict(pdf.to_dict())
    assert again.group_id == "T1" and again.bandwidth == 0.5
    assert np.array_equal(again.sample_points, pdf.sample_points)
    assert pdf.variance() == pytest.approx(np.var([1.0, 2.0, 4.0]) + 0.25)
    with pytest.raises(LoadModelError):
        LoadPdf("T1", np.array([1.0]), 0.0)


def test_fit_all_on_synthetic_history(small_feeder):
    series = LoadModeler.synthesize_meter_year(small_feeder, seed=3, hours=24 * 40)
    pdfs = LoadModeler.fit_all(series, small_feeder, seed=3)
    assert sorted(pdfs) == ["TB", "TC"]
    assert pdfs["TB"].mean() == pytest.approx(300.0, rel=0.2)
    assert pdfs["TC"].mean() == pytest.approx(50.0, rel=0.2)


def test_synthesize_meter_year(small_feeder):
    series = LoadModeler.synthesize_meter_year(small_feeder, seed=1, hours=48)
    groups = {s.transformer_group for s in series}
    assert groups == {"TB", "TC"}
    assert all(len(s.readings) == 48 for s in series)
    for group in groups:
        assert 2 <= sum(s.transformer_group == group for s in series) <= 5
    again = LoadModeler.synthesize_meter_year(small_feeder, seed=1, hours=48)
    assert again == series


def test_sample_scenario(small_feeder, small_pdfs, sampler):
    rng = LoadModeler.scenario_rng(sampler.master_seed, 0)
    injections = LoadModeler.sample_scenario(small_pdfs, small_feeder, sampler, rng)
    assert set(injections) == {"LB", "LC", "LAD", "DGB"}

    # one draw per metered group, spread pro rata to nameplate
    lb = {ph: kw for ph, kw, _ in injections["LB"]}
    assert lb["a"] / lb["b"] == pytest.approx(100 / 80)
    assert lb["c"] / lb["a"] == pytest.approx(120 / 100)

    max_q_ratio = np.tan(np.arccos(0.95))
    for element in ("LB", "LC", "LAD"):
        for _, kw, kvar in injections[element]:
            assert kw >= 0
            assert 0 <= kvar <= kw * max_q_ratio + 1e-12

    _, kw, _ = injections["LAD"][0]
    assert 0.5 * 60 <= kw <= 1.5 * 60
    for _, kw, kvar in injections["DGB"]:
        assert -1.5 * 30 <= kw <= -0.5 * 30
        assert kvar <= 0


def test_sample_loads_deterministic(small_feeder, small_pdfs, sampler):
    first = LoadModeler.sample_loads(small_pdfs, small_feeder, sampler, 5)
    again = LoadModeler.sample_loads(small_pdfs, small_feeder, sampler, 5)
    assert first == again
    shifted = LoadModeler.sample_loads(small_pdfs, small_feeder, sampler, 3, start=2)
    assert shifted == first[2:]
    other_topology = LoadModeler.sample_loads(small_pdfs, small_feeder, sampler, 5, topology=1)
    assert other_topology != first


def test_sample_missing_pdf(small_feeder, small_pdfs, sampler):
    small_pdfs.pop("TC")
    with pytest.raises(LoadModelError, match="TC"):
        LoadModeler.sample_loads(small_pdfs, small_feeder, sampler, 1)


def test_ks_two_sample():
    rng = np.random.default_rng(0)
    x = rng.normal(size=500)
    assert not LoadModeler.ks_two_sample(x, x).reject
    shifted = LoadModeler.ks_two_sample(x, x + 1.0)
    assert shifted.reject
    assert shifted.p_value < 1e-6
    small = LoadModeler.ks_two_sample(x[:20], x[20:40])
    assert 0 <= small.statistic <= 1
    with pytest.raises(LoadModelError):
        LoadModeler.ks_two_sample([], x)


@pytest.mark.parametrize("data", [
    {"pf_range": [0.0, 1.0]},
    {"pf_range": [0.99, 0.95]},
    {"pf_range": [0.9, 1.1]},
    {"dg_variation": [1.5, 0.5]},
    {"dg_variation": [0.0, 1.0]},
])
def test_sampler_config_validation(data):
    with pytest.raises(LoadModelError):
        SamplerConfig.from_dict(data)


def test_sampler_config_defaults():
    cfg = SamplerConfig.from_dict({}, master_seed=9)
    assert cfg.pf_range == (0.95, 1.0)
    assert cfg.dg_variation == (0.5, 1.5)
    assert cfg.master_seed == 9


if __name__ == '__main__':
    pytest.main()
