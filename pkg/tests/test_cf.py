import math

import numpy as np
import pytest

from cfdgp import errors
from cfdgp.cf import (
    FixedForecast,
    baseline_average,
    baseline_prediction_based,
    cf_dgp_estimate,
    cf_estimate,
    correlation_matrix,
    energy_consistency,
    historical_means,
    pearson,
    read_pseudo_csv,
    select_neighbors,
    write_pseudo_csv,
)
from cfdgp.data import FAST, LoadSeries, TwoScaleDataset, aggregate_fast_to_slow

from oracles import cf_loop, pearson_loop


def dataset(fast_map, T=12, dt=1 / 12, slow_only=None):
    """Dataset with slow series aggregated from ``fast_map`` (plus ``slow_only`` nodes' truth)."""
    fast = {k: LoadSeries(k, FAST, 0, v, True) for k, v in fast_map.items()}
    hidden = {k: LoadSeries(k, FAST, 0, v, True) for k, v in (slow_only or {}).items()}
    slow = {k: aggregate_fast_to_slow(s, T, dt, allow_negative=True) for k, s in {**fast, **hidden}.items()}
    return TwoScaleDataset(fast, slow, T, dt), hidden


# -- pearson -------------------------------------------------------------------------

def test_pearson_examples():
    w = np.array([1.0, 2.0, 3.0, 4.0])
    assert pearson(w, w, min_support=4) == pytest.approx(1.0)
    assert pearson(w, 3 - w, min_support=4) == pytest.approx(-1.0)
    assert pearson(w, [1.0, 3.0, 2.0, 4.0], min_support=4) == pytest.approx(0.8, abs=1e-12)


def test_pearson_errors_and_gaps():
    with pytest.raises(errors.InsufficientSupport):
        pearson([1.0, 2.0, 3.0], [1.0, 2.0, 3.0], min_support=4)
    with pytest.raises(errors.ZeroVariance):
        pearson(np.ones(30), np.arange(30.0))
    a = np.arange(30.0)
    b = np.sin(a)
    a[3] = np.nan
    b[7] = np.nan
    assert pearson(a, b) == pytest.approx(pearson_loop(a.tolist(), b.tolist()), abs=1e-12)


def test_correlation_matrix_marks_unusable_pairs():
    rng = np.random.default_rng(0)
    ds, _ = dataset({"a": rng.normal(size=360), "b": rng.normal(size=360), "c": np.ones(360)})
    corr = correlation_matrix(ds)
    assert corr.usable[0, 1] and not corr.usable[0, 2]
    assert corr.reasons[("a", "c")] is errors.ZeroVariance
    assert corr.coefficient("a", "a") == 1.0
    np.testing.assert_array_equal(corr.r[:2, :2], corr.r[:2, :2].T)


# -- CF ------------------------------------------------------------------------------

def test_cf_single_neighbour_substitution():
    # p_bar_i = 5, p_bar_j = 6, p_j = 7, r = 1 -> 6
    assert cf_loop(5.0, [(1.0, 6.0, 7.0)]) == 6.0
    ds, _ = dataset({"j": np.r_[np.full(24, 6.0), np.full(12, 7.0)]}, slow_only={"i": np.full(36, 5.0)})
    view = ds.withhold("i")
    corr = correlation_matrix(view, min_support=2)
    # constant series have no coefficient: supply the fixture's r = 1 directly
    means = {"i": 5.0, "j": 6.0}
    corr.r[:] = 1.0
    corr.usable[:] = True
    est = cf_estimate(view, corr, "i", (2, 3), means=means)
    np.testing.assert_allclose(est.mean, 6.0)


def test_cf_clone_set_recovers_truth():
    rng = np.random.default_rng(1)
    truth = 3 + np.repeat(rng.normal(size=40), 12) * 0.5 + rng.normal(size=480) * 0.1
    ds, hidden = dataset({"j1": truth, "j2": truth}, slow_only={"i": truth})
    view = ds.withhold("i")
    corr = correlation_matrix(view)
    est = cf_estimate(view, corr, "i", (30, 40), means={"i": 2.0, "j1": 2.0, "j2": 2.0})
    np.testing.assert_allclose(est.mean, truth[360:480], atol=1e-12)


def test_cf_matches_loop_with_mixed_signs():
    rng = np.random.default_rng(2)
    n = 12 * 40
    base = np.repeat(rng.normal(size=40), 12)
    fast = {"j1": base + rng.normal(size=n) * 0.3, "j2": -base + rng.normal(size=n) * 0.3,
            "j3": 0.3 * base + rng.normal(size=n)}
    ds, _ = dataset(fast, slow_only={"i": base + 5})
    view = ds.withhold("i")
    corr = correlation_matrix(view, windows=(0, 30))
    est = cf_estimate(view, corr, "i", (30, 40), history=(0, 30))
    means = historical_means(view, ["j1", "j2", "j3"], "i", (0, 30))
    r = {j: corr.coefficient("i", j) for j in fast}
    assert r["j2"] < 0 < r["j1"]
    for t in range(120):
        expect = cf_loop(means["i"], [(r[j], means[j], fast[j][360 + t]) for j in sorted(fast)])
        assert est.mean[t] == pytest.approx(expect, abs=1e-12)


def test_cf_requires_neighbours():
    ds, _ = dataset({}, slow_only={"i": np.ones(48)})
    corr = correlation_matrix(ds, min_support=2)
    with pytest.raises(errors.NoUsableNeighbors):
        cf_estimate(ds.withhold("i"), corr, "i", (2, 4))


# -- CF-DGP ---------------------------------------------------------------------------

def test_cf_dgp_oracle_collapse():
    rng = np.random.default_rng(3)
    p_j = 2 + rng.normal(size=60)
    p_i = 1 + rng.uniform(size=60)
    ds, _ = dataset({"j": p_j}, slow_only={"i": p_i})
    view = ds.withhold("i")
    corr = correlation_matrix(view, min_support=2)
    corr.r[:] = 1.0
    slow = FixedForecast(view.slow["i"].values)
    est = cf_dgp_estimate(view, corr, "i", (1, 4), slow, {"j": FixedForecast(p_j)})
    T, dt = 12, 1 / 12
    for t in range(12, 48):
        k = t // T
        end = (k + 1) * T
        expect = view.slow["i"].values[k] / (T * dt) + (p_j[t] - p_j[end])
        assert est.mean[t - 12] == pytest.approx(expect, abs=1e-12)


def test_cf_dgp_zero_trend_is_predicted_average():
    ds, _ = dataset({"j": np.full(48, 3.0), "k": np.full(48, -1.0)}, slow_only={"i": np.arange(48.0)})
    view = ds.withhold("i")
    corr = correlation_matrix(view, min_support=2)
    corr.r[:] = 0.5
    corr.usable[:] = True
    W = np.array([4.0, 8.0, 2.0, 6.0])
    models = {"j": FixedForecast(np.full(60, 3.0)), "k": FixedForecast(np.full(60, -1.0))}
    for ref in ("window_end", "window_mean"):
        est = cf_dgp_estimate(view, corr, "i", (0, 4), FixedForecast(W), models, reference=ref)
        np.testing.assert_allclose(est.mean, np.repeat(W, 12), atol=1e-12)


def test_cf_dgp_needs_trained_models():
    ds, _ = dataset({"j": np.sin(np.arange(48.0))}, slow_only={"i": np.cos(np.arange(48.0))})
    view = ds.withhold("i")
    corr = correlation_matrix(view, min_support=2)
    with pytest.raises(errors.UntrainedModel):
        cf_dgp_estimate(view, corr, "i", (1, 3), None, {})


def test_cf_dgp_window_mean_reference_preserves_predicted_energy():
    rng = np.random.default_rng(4)
    p_j = rng.uniform(1, 3, 72)
    ds, _ = dataset({"j": p_j}, slow_only={"i": rng.uniform(1, 2, 72)})
    view = ds.withhold("i")
    corr = correlation_matrix(view, min_support=2)
    W = np.array([3.0, 1.0, 2.0, 5.0])
    est = cf_dgp_estimate(view, corr, "i", (1, 5), FixedForecast(W, start_index=1),
                          {"j": FixedForecast(p_j)},
                          reference="window_mean")
    np.testing.assert_allclose(est.mean.reshape(-1, 12).sum(axis=1) / 12, W, atol=1e-12)


# -- baselines -----------------------------------------------------------------------

def test_average_examples():
    ds, _ = dataset({}, slow_only={"i": np.full(24, 12.0)})
    assert ds.slow["i"].values[0] == pytest.approx(12.0)
    np.testing.assert_allclose(baseline_average(ds, "i", (0, 2)).mean, 12.0)
    ramp = np.linspace(0, 2, 1201)
    ramp = (ramp[:-1] + ramp[1:]) / 2  # midpoint samples of a 0 -> 2 kW ramp
    ds, _ = dataset({}, slow_only={"i": ramp}, T=1200, dt=1 / 1200)
    est = baseline_average(ds, "i", (0, 1)).mean
    np.testing.assert_allclose(est, 1.0, atol=1e-12)
    rmse = math.sqrt(np.mean((est - ramp) ** 2))
    assert rmse == pytest.approx(2 / math.sqrt(12), rel=1e-5)


def test_average_missing_reading():
    v = np.ones(24)
    v[3] = np.nan
    ds, _ = dataset({}, slow_only={"i": v})
    with pytest.raises(errors.MissingSlowReading):
        baseline_average(ds, "i", (0, 2))


def test_prediction_based_examples():
    ds, _ = dataset({}, slow_only={"i": np.full(36, 2.5)})
    est = baseline_prediction_based(ds, "i", FixedForecast(np.full(3, 2.5)), (1, 3))
    np.testing.assert_allclose(est.mean, 2.5)
    ds, _ = dataset({}, slow_only={"i": [1.0, 1.0, 2.0, 2.0]}, T=2, dt=1.0)
    est = baseline_prediction_based(ds, "i", FixedForecast([2.0, 4.0]), (1, 2))
    np.testing.assert_allclose(est.mean, [1.0, 2.0])
    with pytest.raises(errors.UntrainedModel):
        baseline_prediction_based(ds, "i", None, (1, 2))
    with pytest.raises(errors.MissingSlowReading):
        baseline_prediction_based(ds, "i", FixedForecast([2.0, 4.0]), (0, 1))


# -- outputs -------------------------------------------------------------------------

def test_pseudo_csv_round_trip(tmp_path):
    rng = np.random.default_rng(5)
    ds, _ = dataset({"j": rng.uniform(1, 2, 48)}, slow_only={"i": rng.uniform(1, 2, 48)})
    view = ds.withhold("i")
    corr = correlation_matrix(view, min_support=2)
    series = [baseline_average(view, "i", (1, 4)),
              cf_dgp_estimate(view, corr, "i", (1, 3), FixedForecast(np.ones(4)),
                              {"j": FixedForecast(np.ones(60), variance=np.full(60, 0.1))})]
    path = tmp_path / "p.csv"
    write_pseudo_csv(series, view, path)
    back = read_pseudo_csv(path, view)
    assert [s.method for s in back] == ["Average", "CF-DGP"]
    for a, b in zip(series, back):
        np.testing.assert_array_equal(a.mean, b.mean)
        assert a.start_index == b.start_index
    np.testing.assert_array_equal(back[1].variance, series[1].variance)
    assert path.read_text().splitlines()[0] == "node_id,method,timestamp,mean_kw,var_kw2,window_ts"


def test_energy_consistency_is_exact_for_average():
    rng = np.random.default_rng(6)
    ds, _ = dataset({}, slow_only={"i": rng.uniform(0, 3, 60)})
    gaps = energy_consistency(baseline_average(ds, "i", (0, 5)), ds)
    assert len(gaps) == 5
    assert max(abs(g.gap_kwh) for g in gaps) < 1e-12


def test_neighbour_threshold():
    rng = np.random.default_rng(7)
    base = np.repeat(rng.normal(size=40), 12)
    ds, _ = dataset({"good": base + 0.1 * rng.normal(size=480), "weak": rng.normal(size=480)},
                    slow_only={"i": base})
    view = ds.withhold("i")
    corr = correlation_matrix(view)
    assert set(select_neighbors(view, corr, "i")) == {"good", "weak"}
    assert set(select_neighbors(view, corr, "i", r_min=0.5)) == {"good"}
