import numpy as np
import pytest

from sgdm_diag.core import HyperParams, InvalidArgument, RngStream
from sgdm_diag.diagnostic import (DiagnosticConfig, DiagnosticState, check_activation, heuristic_value,
                                  momentum_switch, pflug_update, run_with_diagnostic)
from sgdm_diag.problems import Dataset, LossModel, gen_quadratic

G = np.array([1.0, -2.0])


def _state(alpha=0, burnin=1, period=10):
    cfg = DiagnosticConfig(check_period_c=period, burnin=burnin)
    return DiagnosticState.fresh(cfg, alpha=alpha)


def test_update_before_switch_is_ignored():
    ds = pflug_update(_state(alpha=0), G, G, 100)
    assert ds.statistic == 0.0 and ds.n_accumulated == 0


@pytest.mark.parametrize("sign", [1.0, -1.0])
def test_update_after_switch(sign):
    ds = pflug_update(_state(alpha=5, burnin=2), G, sign * G, 8)
    assert ds.statistic == sign * 5.0 and ds.n_accumulated == 1


def test_update_respects_burnin():
    ds = _state(alpha=5, burnin=3)
    assert not ds.guard(8)
    assert ds.guard(9)
    pflug_update(ds, G, G, 8)
    assert ds.statistic == 0.0


def test_switch_fires_once():
    cfg = DiagnosticConfig(threshold_T=0.5, check_period_c=10, relative=False)
    ds = DiagnosticState.fresh(cfg)
    ds, fired = momentum_switch(ds, cfg, 0.6, 10)
    assert not fired
    ds, fired = momentum_switch(ds, cfg, 0.5, 20)
    assert not fired
    ds, fired = momentum_switch(ds, cfg, 0.1, 25)
    assert not fired  # not an epoch boundary
    ds, fired = momentum_switch(ds, cfg, 0.1, 30)
    assert fired and ds.alpha == 30
    ds, fired = momentum_switch(ds, cfg, 0.0, 40)
    assert not fired and ds.alpha == 30


def test_relative_switch_uses_first_value():
    cfg = DiagnosticConfig(threshold_T=0.5, check_period_c=10)
    ds = DiagnosticState.fresh(cfg)
    ds, fired = momentum_switch(ds, cfg, 2.0, 10)
    assert not fired and ds.reference_h == 2.0
    ds, fired = momentum_switch(ds, cfg, 1.0, 20)
    assert not fired
    ds, fired = momentum_switch(ds, cfg, 0.99, 30)
    assert fired


def test_zero_threshold_never_fires():
    cfg = DiagnosticConfig(threshold_T=0.0, check_period_c=1, relative=False)
    ds = DiagnosticState.fresh(cfg)
    assert not momentum_switch(ds, cfg, 0.0, 1)[1]


def test_heuristic_values():
    ds = _state(period=3)
    assert heuristic_value(ds, "iterate_distance") is None
    for _ in range(3):
        ds.observe(0.0, float(G @ G))
    assert heuristic_value(ds, "iterate_distance") == 0.0
    assert heuristic_value(ds, "grad_norm") == 5.0
    a, b = _state(period=2), _state(period=2)
    for s in (0.1, 0.3):
        a.observe(s * s, 0.0)
        b.observe((2 * s) ** 2, 0.0)
    assert heuristic_value(b, "iterate_distance") == pytest.approx(4 * heuristic_value(a, "iterate_distance"))
    with pytest.raises(InvalidArgument):
        heuristic_value(a, "loss")


@pytest.mark.parametrize("S, n, expected", [(-0.5, 20, True), (-0.5, 15, False), (0.0, 20, False)])
def test_check_activation(S, n, expected):
    ds = _state(period=10)
    ds.S.add(S)
    ds.n_accumulated = 3
    assert check_activation(ds, n) is expected


def test_activation_needs_accumulated_terms():
    ds = _state(period=10)
    ds.S.add(-1.0)
    assert not check_activation(ds, 10)


def test_new_stage_resets_statistic_only():
    ds = _state(alpha=5)
    ds.S.add(-2.0)
    ds.n_accumulated = 4
    ds.reference_h = 1.0
    ds.new_stage()
    assert (ds.statistic, ds.n_accumulated, ds.alpha, ds.reference_h) == (0.0, 0, 5, 1.0)


@pytest.mark.parametrize("kwargs", [dict(threshold_T=-1.0), dict(check_period_c=0), dict(burnin=0),
                                    dict(heuristic_kind="loss"), dict(beta_final=1.0)])
def test_config_invariants(kwargs):
    with pytest.raises(InvalidArgument, match="DiagnosticConfig"):
        DiagnosticConfig(**kwargs)


def test_zero_noise_full_batch_never_activates():
    ds = gen_quadratic(5, 50, 1.0, RngStream(0))
    model = LossModel("quadratic", Dataset(ds.xs, ds.xs @ ds.optimum, ds.optimum))
    hp = HyperParams(gamma=0.05, beta=0.2, batch_size=50, epochs=200)
    theta, rec = run_with_diagnostic(model, hp, DiagnosticConfig(threshold_T=0.5), RngStream(1))
    assert theta is None and rec.diagnostic_activation_at is None
    assert rec.momentum_switch_at is not None
    assert np.all(rec.statistic_S >= 0)


def test_events_and_rows():
    model = LossModel("quadratic", gen_quadratic(20, 1000, 1.0, RngStream(0).child(0)))
    hp = HyperParams(gamma=1e-2, beta=0.8, beta_final=0.2, batch_size=20, epochs=20)
    theta, rec = run_with_diagnostic(model, hp, DiagnosticConfig(threshold_T=0.5), RngStream(0))
    rec.check_invariants()
    n = rec.diagnostic_activation_at
    assert theta is not None and n == rec.iteration[-1] and n % 50 == 0
    np.testing.assert_array_equal(theta, rec.thetas[n])
    sw = rec.momentum_switch_at
    beta = rec.beta_in_effect
    assert np.all(beta[rec.iteration <= sw] == 0.8) and np.all(beta[rec.iteration > sw] == 0.2)
    assert np.all(rec.statistic_S[rec.iteration <= sw + 50] == 0.0)


def test_high_momentum_without_switch_stays_positive():
    hp = HyperParams(gamma=1e-2, beta=0.8, beta_final=0.2, batch_size=20, epochs=20)
    activated, increments = 0, []
    for i in range(10):
        rng = RngStream(0, i)
        model = LossModel("quadratic", gen_quadratic(20, 1000, 1.0, rng.child(0)))
        _, rec = run_with_diagnostic(model, hp, DiagnosticConfig(threshold_T=0.0), rng, keep_iterates=False)
        activated += rec.diagnostic_activation_at is not None
        ip = rec.inner_product
        increments.append(np.nanmean(ip[len(ip) // 2:]))
    assert activated <= 3
    assert np.mean(increments) > 0


def test_seeded_runs_are_reproducible():
    hp = HyperParams(gamma=1e-2, beta=0.2, batch_size=20, epochs=5)
    out = []
    for _ in range(2):
        rng = RngStream(11, 4)
        model = LossModel("quadratic", gen_quadratic(20, 200, 1.0, rng.child(0)))
        out.append(run_with_diagnostic(model, hp, DiagnosticConfig(threshold_T=0.5), rng)[1])
    np.testing.assert_array_equal(out[0].statistic_S, out[1].statistic_S)
    np.testing.assert_array_equal(out[0].thetas, out[1].thetas)


def test_beta_final_must_be_lower():
    model = LossModel("quadratic", gen_quadratic(2, 20, 1.0, RngStream(0)))
    with pytest.raises(InvalidArgument):
        run_with_diagnostic(model, HyperParams(gamma=0.1, beta=0.5), DiagnosticConfig(beta_final=0.6),
                            RngStream(0))
