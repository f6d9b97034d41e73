import dataclasses
import json

import numpy as np
import pytest

from sgdm_diag import harness
from sgdm_diag.core import HyperParams, InvalidArgument, RngStream, RunRecord, UnsupportedError
from sgdm_diag.diagnostic import run_with_diagnostic
from sgdm_diag.harness import ErrorCriteria, classify_run


def _trace(thetas, activation):
    rec = RunRecord()
    rec.add_iterate(thetas[0])
    for n, t in enumerate(thetas[1:], start=1):
        rec.append(n, 0.0, 0.0, 0.0, None, 0.0, 0.0, 0.1, 0.0)
        rec.add_iterate(t)
    rec.diagnostic_activation_at = activation
    return rec


CRIT = ErrorCriteria(eta=1e-2, kappa=0.5)


def test_type1_when_far_from_optimum():
    star = np.zeros(2)
    thetas = [np.array([1.0, 0.0])] * 5
    thetas[4] = np.array([np.sqrt(2 * CRIT.eta), 0.0])  # distance 2 eta
    out = classify_run(_trace(thetas, 4), star, CRIT)
    assert out.label == "type1" and out.dist_sq == pytest.approx(2 * CRIT.eta)


def test_type2_when_settled_long_before():
    # at rest at theta* from k = 2, activation at n = 10: K = 0.8 > kappa
    thetas = [np.array([1.0]), np.array([0.5])] + [np.array([0.0])] * 9
    out = classify_run(_trace(thetas, 10), np.zeros(1), CRIT)
    assert out.label == "type2" and out.K == pytest.approx((10 - 1) / 10)


def test_good_when_recently_moving():
    thetas = [np.array([1.0 - 0.12 * n]) for n in range(9)] + [np.array([0.0])] * 2
    thetas[8] = np.array([0.01])
    out = classify_run(_trace(thetas, 10), np.zeros(1), CRIT)
    assert out.label == "good" and out.K <= CRIT.kappa


def test_no_activation_and_missing_optimum():
    rec = _trace([np.zeros(1)] * 3, None)
    assert classify_run(rec, np.zeros(1), CRIT).label == "no_activation"
    with pytest.raises(UnsupportedError):
        classify_run(rec, None, CRIT)


def test_classification_is_pure():
    thetas = [np.array([1.0]), np.array([0.5])] + [np.array([0.0])] * 9
    rec = _trace(thetas, 10)
    assert classify_run(rec, np.zeros(1), CRIT) == classify_run(rec, np.zeros(1), CRIT)


def test_good_minimum_gate():
    star = np.array([1.0, -1.0])
    np.testing.assert_array_equal(harness.good_minimum_gate(-star + 0.01, star, 1e-2), -star)
    np.testing.assert_array_equal(harness.good_minimum_gate(star, star, 1e-2), star)
    assert harness.good_minimum_gate(np.zeros(2), star, 1e-2) is None


def test_single_run_report():
    rep = harness.error_rate_experiment("Q-High", runs=1, seed=3)
    assert rep.runs == 1
    assert {rep.type1_pct, rep.type2_pct, rep.good_pct} <= {0.0, 100.0}
    assert json.dumps(rep.to_dict(), default=str)


def test_error_rates_reproducible_and_parallel_safe():
    a = harness.error_rate_experiment("PR-Low", runs=6, seed=5)
    b = harness.error_rate_experiment("PR-Low", runs=6, seed=5, jobs=2)
    assert a.to_dict() == b.to_dict()


def test_q_low_nearly_always_activates():
    rep = harness.error_rate_experiment("Q-Low", runs=100, seed=0)
    assert rep.activated >= 95


def test_unknown_setting():
    with pytest.raises(InvalidArgument):
        harness.error_rate_experiment("Q-Mid", runs=1)


def test_calibrated_custom_setting():
    base = harness.SETTINGS["Q-High"]
    custom = dataclasses.replace(base, name="custom", problem=harness.ProblemSpec("quadratic", 10, 500, 1.0),
                                 criteria=None, target_pct=None)
    crit = harness.calibrate_criteria(custom, runs=4, seed=1)
    assert crit.eta > 0 and 0 < crit.kappa < 1
    rep = harness.error_rate_experiment(dataclasses.replace(custom, criteria=crit), runs=4, seed=9)
    assert rep.runs == 4


@pytest.fixture(scope="module")
def paired():
    return [harness.paired_stationary_runs(0, i, epochs=50)[2] for i in range(25)]


def test_phase_split_rules_agree(paired):
    eta = harness.SETTINGS["Q-Low"].criteria.eta
    for recs in paired[:10]:
        rec = recs[0.2]
        n = len(rec)
        a, b = harness.phase_boundary(rec, "slope"), harness.phase_boundary(rec, "eta", eta=eta)
        labels_a, labels_b = np.arange(n) >= a, np.arange(n) >= b
        assert np.mean(labels_a == labels_b) >= 0.8


def test_phase_boundary_errors(paired):
    rec = paired[0][0.2]
    with pytest.raises(InvalidArgument):
        harness.phase_boundary(rec, "eta")
    with pytest.raises(InvalidArgument):
        harness.phase_boundary(rec, "median")


def test_low_momentum_distribution(paired):
    rec = paired[0][0.2]
    st = harness.ip_distribution(rec, "stationary")
    tr = harness.ip_distribution(rec, "transient", min_samples=10)
    assert st.skewness < 0 and tr.mean > 0
    assert st.counts.sum() == st.n_samples and st.scatter.shape == (st.n_samples, 2)
    with pytest.raises(InvalidArgument):
        harness.ip_distribution(rec, "late")


def _keys(rec):
    b = harness.phase_boundary(rec)
    return harness.key_iterate_scatter(rec, (b, len(rec)))[1], (len(rec) - b) / 50


def test_key_iterates_low_momentum(paired):
    counts, epochs = zip(*(_keys(r[0.2]) for r in paired))
    assert sum(counts) / sum(epochs) >= 1


def test_key_iterates_fewer_with_high_momentum(paired):
    lower = []
    for recs in paired:
        window = harness.common_stationary_window(recs)
        low, high = (harness.key_iterate_scatter(recs[b], window)[1] for b in (0.2, 0.8))
        lower.append(high < low)
    assert np.mean(lower) >= 0.9


def test_common_window_is_stationary_for_all(paired):
    recs = paired[0]
    start, stop = harness.common_stationary_window(recs)
    assert start == max(harness.phase_boundary(r) for r in recs.values()) and stop == len(recs[0.2])


def test_key_iterates_identical_gradients():
    rec = RunRecord(keep_iterates=False)
    for n in range(1, 201):
        rec.append(n, 1.0, 0.0, 0.0, None, 1.0 + n, 1.0, 0.1, 0.0)
    assert harness.key_iterate_scatter(rec, (0, 200))[1] == 0


@pytest.fixture(scope="module")
def logistic():
    return harness.logistic_task(0, n_train=2000, n_test=1000)


def test_ablation_high_momentum_stays_positive(logistic):
    model, _ = logistic
    traces, slopes = harness.statistic_trace_ablation([0.8], False, model, gamma=0.1, epochs=10)
    assert np.all(traces[0.8] >= 0) and slopes[0.8] > 0


def test_ablation_beta_zero_matches_sgd(logistic):
    model, _ = logistic
    traces, _ = harness.statistic_trace_ablation([0.0], False, model, seed=2, gamma=0.1, epochs=2)
    hp = HyperParams(gamma=0.1, batch_size=20, epochs=2)
    _, rec = run_with_diagnostic(model, hp, harness.NO_SWITCH, RngStream(2, 0), stop_on_activation=False)
    ip = np.nan_to_num(rec.inner_product)
    ip[:100] = 0.0
    assert np.array_equal(traces[0.0], np.cumsum(ip))


def test_robustness_cells(logistic):
    model, test = logistic
    hp = HyperParams(gamma=1.0, beta=0.8, beta_final=0.2, batch_size=20, epochs=2)
    auto = harness.robustness_sweep(model, [1.0, 0.1], "auto", 0, test, hp, stage_epochs=2)
    dec = harness.robustness_sweep(model, [1.0, 0.1], "decreasing", 0, test, hp)
    for c in auto + dec:
        assert 0.5 < c["accuracy"] <= 1.0 and not c["diverged"]
    assert auto[0]["stages"] and dec[0]["stages"] is None
    assert harness.spread(auto) >= 0
    assert harness.spread([{"accuracy": 0.9, "diverged": False}, {"accuracy": np.nan, "diverged": True}]) == np.inf
    with pytest.raises(InvalidArgument):
        harness.robustness_sweep(model, [1.0], "cyclic", 0, test, hp)


def test_write_experiment(tmp_path):
    paths = harness.write_experiment(tmp_path, "exp", {"seed": 1}, {"x": np.float64(2.0)},
                                     {"hist": (["lo", "hi"], [[0, 1], [1, 2]]), "runs": (None, [{"a": 1}])})
    names = sorted(p.name for p in paths)
    assert names == ["exp_config.json", "exp_hist.csv", "exp_report.json", "exp_runs.csv"]
    assert (tmp_path / "exp_hist.csv").read_text().splitlines()[0] == "lo,hi"
    assert json.loads((tmp_path / "exp_report.json").read_text()) == {"x": 2.0}
