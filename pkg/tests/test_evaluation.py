import math
from importlib import resources

import numpy as np
import pytest
from hypothesis import assume, given, settings, strategies as st

from stalk_gauge.evaluation import (ABLATION_NAMES, AblationConfigSet, AblationSample, SamplePair,
                                    evaluate, format_number, load_pairs, mae, mape, parse_pairs,
                                    r_squared, rmse, run_ablation)
from stalk_gauge.slicing import PipelineConfig, measure_stalk, with_overrides
from stalk_gauge.synthscene import SYNTH_INTRINSICS, random_specs, render_depth

REFERENCE = resources.files("stalk_gauge") / "data" / "reference_pairs.csv"

values = st.floats(1e-3, 0.1)
datasets = st.lists(st.tuples(values, values), min_size=2, max_size=30)


def _pairs(rows):
    return [SamplePair(f"s{i}", p, a) for i, (p, a) in enumerate(rows)]


def test_reference_metrics():
    rep = evaluate(load_pairs(REFERENCE))
    assert rep.n == 10
    assert abs(rep.mae - 0.000539) <= 5e-6
    assert abs(rep.mape - 4.08) <= 0.05
    assert abs(rep.rmse - 0.000681) <= 5e-6
    assert abs(rep.r2 - 0.7020) <= 0.005


def test_reference_frozen_values():
    rep = evaluate(load_pairs(REFERENCE))
    assert format_number(rep.mae) == "0.00054"
    assert format_number(rep.mape) == "4.08335"
    assert format_number(rep.rmse) == "0.000680985"
    assert format_number(rep.r2) == "0.702166"


def test_metric_examples():
    one = _pairs([(0.010, 0.012)])
    assert mae(one) == pytest.approx(0.002, abs=1e-15)
    assert mape(_pairs([(0.011, 0.010)])) == pytest.approx(10.0)
    two = _pairs([(0.013, 0.010), (0.016, 0.020)])
    assert mae(two) == pytest.approx(0.0035)
    assert rmse(two) == pytest.approx(math.sqrt(12.5) * 1e-3)
    perfect = _pairs([(0.01, 0.01), (0.02, 0.02)])
    assert mae(perfect) == 0 and mape(perfect) == 0 and rmse(perfect) == 0
    assert r_squared(perfect) == 1.0
    mean_pred = _pairs([(0.015, 0.01), (0.015, 0.02)])
    assert r_squared(mean_pred) == 0.0


def test_metric_preconditions():
    with pytest.raises(ValueError):
        mae([])
    with pytest.raises(ValueError):
        mape(_pairs([(0.01, 0.0)]))
    with pytest.raises(ValueError):
        r_squared(_pairs([(0.01, 0.02)]))
    with pytest.raises(ValueError):
        r_squared(_pairs([(0.01, 0.02), (0.03, 0.02)]))
    assert evaluate(_pairs([(0.01, 0.02)])).r2 is None


@given(datasets)
def test_mae_not_above_rmse(rows):
    p = _pairs(rows)
    assert mae(p) <= rmse(p) * (1 + 1e-12)


def test_mae_not_above_rmse_on_1000_datasets():
    rng = np.random.default_rng(123)
    for _ in range(1000):
        n = int(rng.integers(1, 50))
        act = rng.uniform(0.005, 0.03, n)
        p = _pairs(zip(act + rng.normal(0, 0.002, n), act))
        assert mae(p) <= rmse(p) * (1 + 1e-12)


@given(datasets, st.randoms(use_true_random=False))
def test_permutation_invariance(rows, rnd):
    p = _pairs(rows)
    q = list(p)
    rnd.shuffle(q)
    assume(len({a for _, a in rows}) > 1)
    a, b = evaluate(p), evaluate(q)
    assert b.mae == pytest.approx(a.mae, rel=1e-12)
    assert b.mape == pytest.approx(a.mape, rel=1e-12)
    assert b.rmse == pytest.approx(a.rmse, rel=1e-12)
    assert b.r2 == pytest.approx(a.r2, rel=1e-9, abs=1e-12)


@given(datasets)
def test_unit_change(rows):
    assume(len({a for _, a in rows}) > 1)
    m = evaluate(_pairs(rows))
    mm = evaluate(_pairs([(1000 * p, 1000 * a) for p, a in rows]))
    assert mm.mae == pytest.approx(1000 * m.mae, rel=1e-12)
    assert mm.rmse == pytest.approx(1000 * m.rmse, rel=1e-12)
    assert mm.mape == pytest.approx(m.mape, rel=1e-12)
    assert mm.r2 == pytest.approx(m.r2, rel=1e-9, abs=1e-12)
    assert m.r2 <= 1


@pytest.mark.parametrize("text,line", [
    ("sample_id,pred,actual_m\n", 1),
    ("sample_id,predicted_m,actual_m\na,0.01,0.02\nb,0.01\n", 3),
    ("sample_id,predicted_m,actual_m\na,x,0.02\n", 2),
    ("sample_id,predicted_m,actual_m\na,0.01,0.02\nb,0.01,0.02\nc,0.01,0\n", 4),
    ("sample_id,predicted_m,actual_m\na,nan,0.02\n", 2),
])
def test_malformed_csv_names_the_line(text, line):
    with pytest.raises(ValueError, match=rf"f\.csv:{line}:"):
        parse_pairs(text, "f.csv")


def test_format_number_golden():
    assert format_number(0.000539) == "0.000539"
    assert format_number(1234567.0) == "1.23457e+06"
    assert format_number(0.015) == "0.015"
    assert format_number(None) == ""


def test_config_set_shape():
    cs = AblationConfigSet.standard()
    assert cs.names == ABLATION_NAMES
    base = cs["baseline"].to_flat()
    for name, cfg in cs:
        diff = {k for k, v in cfg.to_flat().items() if base[k] != v}
        assert len(diff) == (0 if name == "baseline" else 1)
    with pytest.raises(ValueError, match="unknown"):
        AblationConfigSet.standard(names=("baseline", "no_axis"))
    with pytest.raises(ValueError, match="baseline"):
        AblationConfigSet.standard(names=("no_sor",))


@pytest.fixture(scope="module")
def small_dataset():
    out = []
    for i, spec in enumerate(random_specs(3, 5, visibility="half", interior_fraction=0.2,
                                          noise_sigma=2e-4, length=0.08)):
        s = render_depth(spec, SYNTH_INTRINSICS)
        out.append(AblationSample(f"stalk{i}", s.depth, s.mask, s.intr, spec.diameter))
    return out


def test_ablation_baseline_equals_direct_measurement(small_dataset, monkeypatch):
    base = with_overrides(PipelineConfig(), dbscan_eps=0.0005)
    configs = AblationConfigSet.standard(base)
    direct = {name: [measure_stalk(s.depth, s.mask, s.intr, cfg).predicted_diameter
                     for s in small_dataset] for name, cfg in configs}
    for threads in ("1", "3"):
        monkeypatch.setenv("STALK_GAUGE_THREADS", threads)
        assert run_ablation(small_dataset, configs).predictions == direct


def test_ablation_ranking_shape(small_dataset):
    res = run_ablation(small_dataset, AblationConfigSet.standard(
        with_overrides(PipelineConfig(), dbscan_eps=0.0005)))
    ranking = res.ranking()
    assert [r for _, r, _ in ranking] == [1, 2, 3, 4]
    deltas = [d for _, _, d in ranking]
    assert deltas == sorted(deltas, reverse=True)
    d = res.deltas()
    circle = next(x for c, _, x in ranking if c == "circle_fit")
    assert circle == max(d["fit_mean"], d["fit_median"])
    assert len(res.table_rows()) == 6 and res.table_rows()[0][0] == "baseline"


def test_ablation_needs_two_samples(small_dataset):
    with pytest.raises(ValueError):
        run_ablation(small_dataset[:1])


def test_ablation_failure_is_excluded_with_warning(small_dataset):
    blank = AblationSample("blank", np.zeros_like(small_dataset[0].depth),
                           np.zeros_like(small_dataset[0].mask), SYNTH_INTRINSICS, 0.01)
    with pytest.warns(RuntimeWarning, match="1 sample"):
        res = run_ablation(small_dataset[:2] + [blank],
                           AblationConfigSet.standard(names=("baseline", "no_sor")))
    assert res.predictions["baseline"][2] is None
    assert res.reports["baseline"].n == 2
    assert res.failures["no_sor"][0][0] == "blank"


def test_clean_clouds_make_every_configuration_agree():
    from stalk_gauge.slicing import measure_cloud
    from stalk_gauge.synthscene import sample_stalk_cloud
    configs = AblationConfigSet.standard(with_overrides(PipelineConfig(), dbscan_eps=0.005))
    for spec in random_specs(5, 1, rings=37):
        cloud, _ = sample_stalk_cloud(spec)
        preds = {name: measure_cloud(cloud, cfg).predicted_diameter for name, cfg in configs}
        for name, value in preds.items():
            assert abs(value - preds["baseline"]) <= 1e-9 * spec.diameter, name
