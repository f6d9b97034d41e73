import json
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from sgdm_diag.core import (CompensatedSum, DegenerateInput, HyperParams, InvalidArgument, RngStream,
                            RunRecord, UnsupportedError, as_param, cosine_similarity, dot, write_json)


@pytest.mark.parametrize("a, b, expected", [
    ((1, 0), (1, 0), 1.0),
    ((1, 0), (0, 1), 0.0),
    ((2, -3), (-1, 4), -14.0),
])
def test_dot(a, b, expected):
    assert dot(a, b) == expected


@pytest.mark.parametrize("a, b, expected", [
    ((1, 0), (2, 0), 1.0),
    ((1, 0), (-3, 0), -1.0),
    ((1, 1), (1, -1), 0.0),
])
def test_cosine(a, b, expected):
    assert cosine_similarity(a, b) == pytest.approx(expected, abs=1e-15)


def test_cosine_zero_vector_rejected():
    with pytest.raises(DegenerateInput):
        cosine_similarity((0, 0), (1, 0))


def test_dimension_mismatch():
    with pytest.raises(InvalidArgument):
        dot((1, 2), (1, 2, 3))


@pytest.mark.parametrize("bad", [[math.nan, 1.0], [math.inf], [[1.0, 2.0]], []])
def test_as_param_rejects(bad):
    with pytest.raises(InvalidArgument):
        as_param(bad)


def test_compensated_sum_recovers_small_terms():
    s = CompensatedSum()
    for x in [1e16, 1.0, -1e16] * 1000:
        s.add(x)
    assert s.value == 1000.0
    s.reset()
    assert s.value == 0.0


@given(st.lists(st.floats(-1e6, 1e6), max_size=200))
def test_compensated_sum_matches_fsum(xs):
    s = CompensatedSum()
    for x in xs:
        s.add(x)
    assert s.value == pytest.approx(math.fsum(xs), abs=1e-6)


@pytest.mark.parametrize("kwargs", [
    dict(gamma=0.0),
    dict(gamma=-1.0),
    dict(gamma=0.1, beta=1.0),
    dict(gamma=0.1, beta=-0.1),
    dict(gamma=0.1, beta=0.5, beta_final=0.5),
    dict(gamma=0.1, beta=0.5, beta_final=0.7),
    dict(gamma=0.1, beta=0.0, beta_final=0.1),
    dict(gamma=0.1, batch_size=0),
    dict(gamma=0.1, epochs=0),
])
def test_hyperparams_invariants(kwargs):
    with pytest.raises(InvalidArgument, match="HyperParams"):
        HyperParams(**kwargs)


def test_hyperparams_valid():
    hp = HyperParams(gamma=0.01, beta=0.8, beta_final=0.2)
    assert (hp.beta, hp.beta_final) == (0.8, 0.2)
    assert HyperParams(gamma=0.01).beta == 0.0


def test_rng_determinism_and_independence():
    a = RngStream(7, 3).generator.standard_normal(1000)
    b = RngStream(7, 3).generator.standard_normal(1000)
    c = RngStream(7, 4).generator.standard_normal(1000)
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, c)
    # independent streams: sample correlation within ~4/sqrt(n)
    assert abs(np.corrcoef(a, c)[0, 1]) < 4 / math.sqrt(1000)


def test_rng_children_are_distinct_and_reproducible():
    r = RngStream(1, 0)
    x0 = r.child(0).generator.random(5)
    x1 = r.child(1).generator.random(5)
    assert not np.array_equal(x0, x1)
    np.testing.assert_array_equal(x0, RngStream(1, 0).child(0).generator.random(5))


def test_rng_rejects_negative():
    with pytest.raises(InvalidArgument):
        RngStream(-1)


def _record(n=5, keep=True):
    rec = RunRecord(keep_iterates=keep, config={"seed": 3})
    rec.add_iterate(np.zeros(2))
    for i in range(1, n + 1):
        ip = math.nan if i == 1 else 0.5 * i
        rec.append(i, ip, -0.1 * i, 1.0 / i, 0.01 * i, 2.0, math.nan if i == 1 else 0.1, 0.01, 0.2)
        rec.add_iterate(np.full(2, float(i)))
        rec.add_gradient(np.ones(2))
    return rec


def test_record_rows_increase():
    rec = _record(3)
    with pytest.raises(InvalidArgument):
        rec.append(3, 0, 0, 0, 0, 0, 0, 0.01, 0)


def test_record_columns_and_iterates():
    rec = _record(4)
    assert len(rec) == 4
    np.testing.assert_array_equal(rec.iteration, [1, 2, 3, 4])
    assert math.isnan(rec.inner_product[0])
    assert rec.thetas.shape == (5, 2)
    assert rec.gradients.shape == (4, 2)
    with pytest.raises(InvalidArgument):
        rec.column("nope")


def test_record_without_iterates():
    rec = _record(2, keep=False)
    with pytest.raises(UnsupportedError):
        rec.thetas


def test_record_event_order_invariant():
    rec = _record(3)
    rec.momentum_switch_at, rec.diagnostic_activation_at = 2, 3
    rec.check_invariants()
    rec.momentum_switch_at = 4
    with pytest.raises(InvalidArgument):
        rec.check_invariants()


def test_record_roundtrip(tmp_path):
    rec = _record(6)
    rec.momentum_switch_at, rec.diagnostic_activation_at = 2, 5
    rec.lr_reductions = [5]
    csv_path, json_path = rec.save(tmp_path / "run")
    back = RunRecord.from_files(tmp_path / "run")
    assert csv_path.read_text().splitlines()[0].startswith("iteration,inner_product,statistic_S")
    for name in ("iteration", "statistic_S", "loss_estimate", "dist_to_optimum_sq"):
        np.testing.assert_array_equal(back.column(name), rec.column(name))
    assert math.isnan(back.inner_product[0]) and back.inner_product[1] == rec.inner_product[1]
    assert back.events() == rec.events()
    assert back.config == {"seed": 3}
    assert json.loads(json_path.read_text())["events"]["diagnostic_activation_at"] == 5


def test_write_json_handles_numpy(tmp_path):
    p = write_json(tmp_path / "x.json", {"a": np.arange(3), "b": np.float64(1.5), "hp": HyperParams(0.1)})
    data = json.loads(p.read_text())
    assert data["a"] == [0, 1, 2] and data["b"] == 1.5 and data["hp"]["gamma"] == 0.1
