import logging
import math

import numpy as np
import pytest

from sgdm_diag.core import HyperParams, InvalidArgument, RngStream
from sgdm_diag.diagnostic import DiagnosticConfig
from sgdm_diag.problems import LossModel, gen_quadratic
from sgdm_diag.schedule import ScheduleConfig, auto_lr, decreasing_lr_baseline


@pytest.fixture(scope="module")
def model():
    return LossModel("quadratic", gen_quadratic(20, 1000, 1.0, RngStream(0).child(0)))


def test_stage_gammas():
    cfg = ScheduleConfig(gamma0=0.1, gamma_min=0.02, rho=0.5)
    assert cfg.stage_gammas() == pytest.approx([0.1, 0.05, 0.025])


@pytest.mark.parametrize("kwargs", [dict(gamma0=0.1, rho=1.0), dict(gamma0=0.1, rho=0.0),
                                    dict(gamma0=0.0), dict(gamma0=0.1, gamma_min=-1.0),
                                    dict(gamma0=0.1, max_epochs=0)])
def test_config_invariants(kwargs):
    with pytest.raises(InvalidArgument, match="ScheduleConfig"):
        ScheduleConfig(**kwargs)


def test_zero_stages_returns_start(model):
    cfg = ScheduleConfig(gamma0=0.01, gamma_min=0.01)
    theta0 = np.full(20, 0.3)
    trace = auto_lr(model, cfg, RngStream(1), theta0=theta0)
    assert trace.stages == [] and len(trace.record) == 0
    np.testing.assert_array_equal(trace.theta, theta0)


def test_auto_lr_stages(model):
    hp = HyperParams(gamma=0.01, beta=0.8, beta_final=0.2)
    cfg = ScheduleConfig(gamma0=0.01, gamma_min=0.0005, rho=0.5, max_epochs=20,
                         diag=DiagnosticConfig(threshold_T=0.5), hp=hp)
    trace = auto_lr(model, cfg, RngStream(2))
    rec = trace.record
    assert trace.gammas == pytest.approx([0.01, 0.005, 0.0025, 0.00125, 0.000625])
    assert all(s.activation == "diagnostic" for s in trace.stages)
    assert sum(s.iterations for s in trace.stages) == len(rec)
    # each reduction starts exactly one row after the previous stage ended
    ends = np.cumsum([s.iterations for s in trace.stages])[:-1]
    assert rec.lr_reductions == list(ends)
    gammas = rec.gamma_in_effect
    for end, g in zip(ends, trace.gammas[1:]):
        assert gammas[end] == g
    assert rec.momentum_switch_at is not None and rec.momentum_switch_at < ends[0]
    np.testing.assert_array_equal(trace.theta, rec.thetas[-1])
    trace.to_dict()


def test_stage_timeout_warns(model, caplog):
    hp = HyperParams(gamma=0.01, beta=0.8, beta_final=0.2)
    cfg = ScheduleConfig(gamma0=0.01, gamma_min=0.004, rho=0.5, max_epochs=1,
                         diag=DiagnosticConfig(threshold_T=0.0), hp=hp)
    with caplog.at_level(logging.WARNING):
        trace = auto_lr(model, cfg, RngStream(3))
    assert [s.activation for s in trace.stages] == ["stage-timeout", "stage-timeout"]
    assert "without activation" in caplog.text
    assert len(trace.record) == 100


def test_baseline_rates(model):
    hp = HyperParams(gamma=0.5, beta=0.2, batch_size=20)
    rec, theta = decreasing_lr_baseline(model, 0.5, hp, 1, RngStream(4))
    g = rec.gamma_in_effect
    assert g[0] == 0.5
    np.testing.assert_allclose(g, 0.5 / np.arange(1, 51))
    assert g.sum() < 0.5 * (1 + math.log(50))
    assert np.all(rec.beta_in_effect == 0.2)
    assert theta.shape == (20,)


def test_baseline_rejects_bad_gamma(model):
    with pytest.raises(InvalidArgument):
        decreasing_lr_baseline(model, 0.0, HyperParams(gamma=0.1), 1, RngStream(0))
