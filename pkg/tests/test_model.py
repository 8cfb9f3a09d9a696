import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from smpc.errors import InvalidInput
from smpc.model import (
    DisturbanceSpec,
    LtiModel,
    Policy,
    RiskSpec,
    required_gamma_count,
    required_scenario_count,
    rollout,
    sample_scenarios,
)
from tests.conftest import random_model


def _scalar_model(N=1):
    return LtiModel([[1.0]], [[1.0]], [[1.0]], [10.0], [[1.0]], [10.0], N)


def test_model_validation():
    with pytest.raises(InvalidInput):
        LtiModel(np.eye(2), np.ones((3, 1)), np.eye(2), np.ones(2), [[1.0]], [1.0], 2)
    with pytest.raises(InvalidInput):
        LtiModel(np.eye(1), np.ones((1, 1)), np.eye(1), np.ones(2), [[1.0]], [1.0], 2)
    with pytest.raises(InvalidInput):
        LtiModel(np.eye(1), np.ones((1, 1)), np.eye(1), np.ones(1), [[1.0]], [1.0], 0)
    with pytest.raises(InvalidInput):
        LtiModel([[np.inf]], np.ones((1, 1)), np.eye(1), np.ones(1), [[1.0]], [1.0], 1)


def test_model_round_trip(rng):
    m = random_model(rng)
    m2 = LtiModel.from_dict(m.to_dict())
    assert m2.digest() == m.digest()
    assert m.n_row == (m.N + 1) * (m.nc + m.ncu)


def test_risk_spec_validation():
    for eps, delta in ((0.0, 0.1), (1.0, 0.1), (0.1, 0.0), (0.1, 1.0)):
        with pytest.raises(InvalidInput):
            RiskSpec(eps, delta)


def test_disturbance_spec_validation():
    with pytest.raises(InvalidInput):
        DisturbanceSpec([1.0], [0.0])
    with pytest.raises(InvalidInput):
        DisturbanceSpec([-np.inf], [0.0])


# ------------------------------------------------------------- sampling


def test_degenerate_support_gives_zero_matrix():
    m = random_model(np.random.default_rng(0), n=3)
    scen = sample_scenarios(DisturbanceSpec(np.zeros(3), np.zeros(3), 5), m, 7)
    assert scen.W.shape == (7, 3 * (m.N + 1))
    assert not scen.W.any()


def test_sampling_is_reproducible():
    m = random_model(np.random.default_rng(1), n=2)
    spec = DisturbanceSpec([-1, -1], [1, 1], 42)
    a, b = sample_scenarios(spec, m, 50), sample_scenarios(spec, m, 50)
    assert np.array_equal(a.W, b.W)
    assert a.spec_hash == b.spec_hash
    c = sample_scenarios(spec, m, 50, seed=43)
    assert not np.array_equal(a.W, c.W)
    assert c.spec_hash != a.spec_hash


def test_lane_distribution_statistics():
    m = LtiModel(np.eye(4), np.ones((4, 1)), np.eye(4), np.ones(4), [[1.0]], [1.0], 5)
    lo = np.array([0, 0, -0.6, -0.8])
    spec = DisturbanceSpec(lo, -lo, 42)
    W = sample_scenarios(spec, m, 10_000).W.reshape(10_000, 6, 4)
    assert np.all(W >= lo) and np.all(W <= -lo)
    se = (2 * -lo[2:]) / math.sqrt(12) / math.sqrt(10_000)
    means = W[:, :, 2:].mean(axis=0)
    assert np.all(np.abs(means) <= 3 * se)


def test_sample_count_validation():
    m = random_model(np.random.default_rng(2), n=2)
    with pytest.raises(InvalidInput):
        sample_scenarios(DisturbanceSpec([0, 0], [1, 1]), m, 0)
    with pytest.raises(InvalidInput):
        sample_scenarios(DisturbanceSpec([0], [1]), m, 3)


# --------------------------------------------------------------- bounds


def test_required_scenario_count_examples():
    assert required_scenario_count(RiskSpec(0.5, 0.5), 1) == 65
    expect = math.ceil(100 * (math.log(400) + 10 * math.log(800)))
    assert required_scenario_count(RiskSpec(0.05, 0.01), 10) == expect
    with pytest.raises(InvalidInput):
        required_scenario_count(RiskSpec(0.5, 0.5), 0)


def test_required_gamma_count_examples():
    # 149.4 * ln(100) = 688.01..., so the smallest admissible integer is 689
    assert 7.47 / 0.05 * math.log(100) > 688
    assert required_gamma_count(RiskSpec(0.05, 0.01)) == 689
    assert required_gamma_count(RiskSpec(0.05, 0.01)) <= 2000
    assert required_gamma_count(RiskSpec(0.05, 1 - 1e-12)) == 1


def test_required_counts_monotone_on_grid():
    eps = np.linspace(0.01, 0.9, 10)
    deltas = np.linspace(0.001, 0.9, 10)
    for e in eps:
        for dl in deltas:
            r = RiskSpec(float(e), float(dl))
            counts = [required_scenario_count(r, d) for d in (1, 2, 4, 8, 16)]
            assert counts == sorted(counts)
    for d in (1, 5):
        seq = [required_scenario_count(RiskSpec(float(e), 0.01), d) for e in eps]
        assert seq == sorted(seq, reverse=True)
        seq = [required_scenario_count(RiskSpec(0.05, float(dl)), d) for dl in deltas]
        assert seq == sorted(seq, reverse=True)
    seq = [required_gamma_count(RiskSpec(float(e), 0.01)) for e in eps]
    assert seq == sorted(seq, reverse=True)


# -------------------------------------------------------------- rollout


def test_rollout_nominal(rng):
    m = random_model(rng)
    v = rng.normal(size=(m.N + 1, m.m))
    x0 = rng.normal(size=m.n)
    x, u = rollout(m, x0, Policy.open_loop(m, v), np.zeros((m.N + 1, m.n)))
    xb = x0.copy()
    for k in range(m.N + 1):
        np.testing.assert_allclose(x[k], xb, atol=1e-12)
        xb = m.A @ xb + m.B @ v[k]
    np.testing.assert_allclose(x[-1], xb, atol=1e-12)
    np.testing.assert_allclose(u, v)


def test_rollout_hand_expansion():
    m = _scalar_model(N=1)
    gains = np.zeros((2, 2, 1, 1))
    gains[1, 0] = 1.0
    w0, w1, x0 = 0.3, -0.7, 2.0
    x, u = rollout(m, [x0], Policy(gains, np.zeros((2, 1))), [[w0], [w1]])
    assert u[1, 0] == pytest.approx(w0)
    assert x[2, 0] == pytest.approx(x0 + 2 * w0 + w1)


def test_rollout_ignores_noncausal_gains(rng):
    m = random_model(rng, N=3)
    gains = rng.normal(size=(m.N + 1, m.N + 1, m.m, m.n))
    causal = gains.copy()
    causal[np.arange(m.N + 1)[:, None] <= np.arange(m.N + 1)[None, :]] = 0.0
    v = rng.normal(size=(m.N + 1, m.m))
    w = rng.normal(size=(m.N + 1, m.n))
    a = rollout(m, np.zeros(m.n), Policy(gains, v), w)
    b = rollout(m, np.zeros(m.n), Policy(causal, v), w)
    np.testing.assert_array_equal(a[0], b[0])


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_rollout_superposition(seed):
    r = np.random.default_rng(seed)
    m = random_model(r)
    gains = r.normal(size=(m.N + 1, m.N + 1, m.m, m.n))

    def run(x0, v, w):
        return rollout(m, x0, Policy(gains, v), w)[0]

    args1 = (r.normal(size=m.n), r.normal(size=(m.N + 1, m.m)), r.normal(size=(m.N + 1, m.n)))
    args2 = (r.normal(size=m.n), r.normal(size=(m.N + 1, m.m)), r.normal(size=(m.N + 1, m.n)))
    a, b = 0.7, -1.3
    combo = [a * p + b * q for p, q in zip(args1, args2)]
    np.testing.assert_allclose(run(*combo), a * run(*args1) + b * run(*args2), atol=1e-10)


def test_rollout_shape_check():
    m = _scalar_model(N=2)
    with pytest.raises(InvalidInput):
        rollout(m, [0.0], Policy(np.zeros((2, 2, 1, 1)), np.zeros(3)), np.zeros(3))
