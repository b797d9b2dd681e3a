import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from ehiot.model import (
    ALLOWED_TRANSITIONS,
    Aggregation,
    ConfigError,
    Device,
    DeviceState,
    EnergyTicks,
    Report,
    SimConfig,
    aggregate_information,
    aggregate_values,
    duty_cycle_is_on,
    duty_on_mask,
    energy_scale,
    sensing_probability,
)

infos = st.lists(st.floats(0, 1, allow_nan=False), max_size=12)


def test_defaults_match_parameter_table():
    c = SimConfig()
    assert (c.area_side, c.decay, c.psi, c.e_max, c.e_idle, c.e_tx, c.d_max) == (20, 1, 1, 100, 1, 10, 4)
    assert c.e_wur == pytest.approx(1 / 14)
    assert c.area == 400


def test_config_error_lists_every_problem():
    with pytest.raises(ConfigError) as exc:
        SimConfig(n_devices=-5, event_prob=1.5, e_b=-1)
    assert len(exc.value.problems) == 3


@pytest.mark.parametrize("bad", [{"e_idle": 11}, {"e_tx": 200}, {"decay": 0}, {"horizon": -1}, {"seed": -1}])
def test_config_rejects(bad):
    with pytest.raises(ConfigError):
        SimConfig(**bad)


def test_energy_ticks_are_exact():
    t = EnergyTicks.from_config(SimConfig())
    assert energy_scale(SimConfig()) == 14
    assert (t.e_max, t.e_idle, t.e_tx, t.e_wur, t.e_b) == (1400, 14, 140, 1, 14)


def test_sensing_probability():
    assert sensing_probability(0) == 1.0
    assert sensing_probability(1) == pytest.approx(math.exp(-1))
    assert sensing_probability(2, decay=0.5) == pytest.approx(math.exp(-1))
    np.testing.assert_allclose(sensing_probability([0, 1]), [1, math.exp(-1)])
    with pytest.raises(ValueError):
        sensing_probability(-0.1)


def test_aggregation_examples():
    cfg = SimConfig()
    assert aggregate_values([], Aggregation.MAX, 1) == 0
    assert aggregate_values([0.2, 0.5], Aggregation.MAX, 1) == 0.5
    assert aggregate_values([0.7, 0.6], Aggregation.SUM_SAT, 1) == 1.0
    assert aggregate_values([0.2, 0.3], Aggregation.SUM_SAT, 1) == pytest.approx(0.5)
    assert aggregate_information([Report(0, 0.9, False), Report(1, 0.4)], cfg) == 0.4


@given(infos, st.sampled_from(list(Aggregation)), st.floats(0, 1))
def test_aggregation_bounded_and_monotone(xs, mode, extra):
    v = aggregate_values(xs, mode, 1.0)
    assert 0 <= v <= 1.0
    assert aggregate_values(xs + [extra], mode, 1.0) >= v


def test_duty_cycle():
    d = Device(0, (0, 0), 1.0, t_on=2, t_drx=4, phase=1)
    assert [duty_cycle_is_on(d, k) for k in range(4)] == [True, False, False, True]
    mask = duty_on_mask(3, np.array([2]), np.array([4]), np.array([1]))
    assert mask.tolist() == [True]
    with pytest.raises(ValueError):
        Device(0, (0, 0), 1.0, t_on=3, t_drx=2)


def test_transition_arcs():
    S1, S2, S3, S4 = DeviceState
    assert (S2, S1) not in ALLOWED_TRANSITIONS
    assert (S4, S2) in ALLOWED_TRANSITIONS
    assert len(ALLOWED_TRANSITIONS) == 10
