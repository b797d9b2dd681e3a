import math
import warnings

import numpy as np
import pytest
from hypothesis import given, strategies as st

from ehiot.energy import (
    BatteryChain,
    HarvestModel,
    arrival_probability,
    availability_probability,
    build_battery_chain,
    credit_harvest,
    mean_energy_consumption,
    sample_harvest,
    stationary_distribution,
    stationary_residual,
    try_consume,
)
from ehiot.model import SimConfig


def test_arrival_probability_values():
    assert arrival_probability(1.0) == pytest.approx(0.36787944117144233, abs=1e-15)
    assert HarvestModel(0.1, 1.0, 10.0).mean_harvest == pytest.approx(0.9048374180359595, abs=1e-15)
    assert arrival_probability(0.0) == 0.0
    with pytest.raises(ValueError):
        arrival_probability(-1)


def test_sample_harvest_frequency():
    rng = np.random.default_rng(1)
    draws = sample_harvest(HarvestModel(1.0), rng, size=200_000)
    assert set(np.unique(draws)) <= {0.0, 1.0}
    assert draws.mean() == pytest.approx(math.exp(-1), abs=4e-3)


def test_try_consume():
    assert try_consume(5, 3) == (2, True)
    assert try_consume(2, 3) == (0, False)
    b, ok = try_consume(np.array([5, 2]), 3)
    assert b.tolist() == [2, 0] and ok.tolist() == [True, False]
    assert credit_harvest(99.5, 1.0, 100.0) == 100.0


def test_hand_built_chain():
    # levels 0..2, harvest +1 w.p. 1/2, then spend 1 w.p. 1/2
    cfg = SimConfig(e_max=2, e_b=1, e_tx=2, e_idle=1, e_wur=0.5)
    chain = build_battery_chain(cfg, {1: 0.5}, arrival_prob=0.5)
    np.testing.assert_allclose(chain.transition, [[0.75, 0.25, 0], [0.25, 0.5, 0.25], [0, 0.5, 0.5]])
    b = stationary_distribution(chain)
    np.testing.assert_allclose(b, [0.4, 0.4, 0.2], atol=1e-14)
    assert availability_probability(chain, 1) == pytest.approx(0.6)
    assert chain.unique


def test_default_chain_residual():
    cfg = SimConfig()
    chain = build_battery_chain(cfg, {1 / 14: 0.6, 1: 0.3, 11: 0.1})
    b = stationary_distribution(chain)
    assert chain.n_states == 1401
    assert b.sum() == pytest.approx(1, abs=1e-12)
    assert stationary_residual(chain) < 1e-10


def test_identity_chain_is_uniform_with_warning():
    chain = BatteryChain(np.arange(4.0), 1, np.eye(4))
    with pytest.warns(RuntimeWarning):
        b = stationary_distribution(chain)
    np.testing.assert_allclose(b, 0.25)
    assert chain.unique is False


def test_reducible_chain_ignores_transient_levels():
    R = np.array([[0.5, 0.5, 0], [0, 0.5, 0.5], [0, 0.5, 0.5]])
    b = stationary_distribution(BatteryChain(np.arange(3.0), 1, R))
    np.testing.assert_allclose(b, [0, 0.5, 0.5], atol=1e-14)


def test_threshold_above_capacity():
    cfg = SimConfig(e_max=10, e_tx=5)
    chain = build_battery_chain(cfg, {1: 0.5}, arrival_prob=0.5)
    with pytest.warns(RuntimeWarning):
        assert availability_probability(chain, 11) == 0.0


def test_spend_validation():
    with pytest.raises(ValueError):
        build_battery_chain(SimConfig(), {1: 0.7, 10: 0.5})


def test_mean_consumption_forms():
    cfg = SimConfig()
    assert mean_energy_consumption(delta=np.zeros((5, 3)), cfg=cfg) == pytest.approx(1 / 14)
    assert mean_energy_consumption(delta=np.ones((5, 3)), cfg=cfg) == pytest.approx(1.0)
    assert mean_energy_consumption(delta=np.ones((1, 1)), pr_transmit=0.1, cfg=cfg) == pytest.approx(2.0)
    assert mean_energy_consumption([[1, 2], [3, 4]]) == 2.5
    with pytest.raises(ValueError):
        mean_energy_consumption([])


@given(st.integers(2, 12), st.integers(0, 2**32 - 1))
def test_random_stochastic_matrices(n, seed):
    rng = np.random.default_rng(seed)
    R = rng.random((n, n)) + 1e-3
    R /= R.sum(axis=1, keepdims=True)
    chain = BatteryChain(np.arange(float(n)), 1, R)
    b = stationary_distribution(chain)
    assert abs(b.sum() - 1) < 1e-12
    assert np.all(b >= 0)
    assert stationary_residual(chain) < 1e-10


@given(st.floats(0.0, 1.0), st.floats(0.0, 0.5), st.floats(0.0, 0.5), st.sampled_from([1, 2, 5]))
def test_chain_rows_are_distributions(p, s1, s2, e_b):
    cfg = SimConfig(e_max=20, e_b=e_b, e_tx=10)
    chain = build_battery_chain(cfg, {1: s1, 10: s2}, arrival_prob=p)
    np.testing.assert_allclose(chain.transition.sum(axis=1), 1.0, atol=1e-12)
    assert np.all(chain.transition >= 0)
