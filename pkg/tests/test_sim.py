import json
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from helpers import scripted_world
from ehiot.model import ALLOWED_TRANSITIONS, EnergyTicks, SimConfig
from ehiot.policy import (
    AdjustedDutyCyclingPolicy,
    ConstantPolicy,
    GeniePolicy,
    KnnRoundRobinPolicy,
    PolicyDecision,
    RandomPolicy,
    SimpleFactory,
)
from ehiot.sim import (
    TtiOutcome,
    World,
    analytic_transition_matrix,
    collect_metrics,
    mix64,
    monte_carlo,
    records_to_csv,
    run_replication,
    step,
    wakeup_probability,
)
from ehiot.geometry import conditional_activation
from ehiot.model import Event


def test_mix64_reference_values():
    assert mix64(0, 0, 0) == 9271759356047530030
    assert mix64(1, 2, 3) == 5246500226706903259
    assert mix64(2**64 - 1, 0, 0) == 10848360887958333460
    assert mix64(1, 2, 3) != mix64(1, 3, 2)


def test_single_device_ledger_until_battery_runs_out():
    cfg = SimConfig(n_devices=1, eh_rate=0.0)
    w = scripted_world(cfg, [[10, 10]], epicenter=(10, 10))
    pol = ConstantPolicy(1)
    outs = [step(w, pol, trace=True) for _ in range(10)]
    assert [o.spend[0] for o in outs] == [11.0] * 9 + [1.0]
    assert [o.info for o in outs] == [1.0] * 9 + [0.0]
    assert outs[-1].misdetected and outs[-1].battery[0] == 0
    assert [r.success for r in outs[-1].reports] == [False]


def test_empty_battery_recovers_only_through_harvest():
    cfg = SimConfig(n_devices=1, eh_rate=1.0, e_b=1.0)
    w = scripted_world(cfg, [[10, 10]])
    w.battery[:] = 0
    pol = ConstantPolicy(0)
    prev = 0.0
    for _ in range(200):
        o = step(w, pol)
        assert o.battery[0] - prev == pytest.approx(o.harvest[0] - o.spend[0])
        prev = o.battery[0]


def test_no_events_without_event_probability():
    cfg = SimConfig(n_devices=5, event_prob=0.0, horizon=500)
    rec = run_replication(cfg, SimpleFactory("random"), 1)
    assert rec.events == 0 and rec.undefined
    assert math.isnan(rec.misdetection_rate)


def test_zero_horizon_gives_undefined_record():
    rec = run_replication(SimConfig(n_devices=5, horizon=0), SimpleFactory("random"), 1)
    assert rec.ttis == 0 and math.isnan(rec.energy_per_device_tti)


def test_all_sleep_costs_only_the_receiver():
    cfg = SimConfig(n_devices=10, horizon=400, eh_rate=0.0)
    rec = run_replication(cfg, SimpleFactory("sleep"), 3)
    assert rec.energy_per_device_tti == pytest.approx(1 / 14, abs=1e-12)
    assert rec.misdetection_rate == 1.0


def test_identical_seeds_are_bitwise_identical():
    cfg = SimConfig(n_devices=25, horizon=300)
    a = run_replication(cfg, SimpleFactory("knn"), 99)
    b = run_replication(cfg, SimpleFactory("knn"), 99)
    assert records_to_csv([a]) == records_to_csv([b])


def test_event_count_is_binomial():
    cfg = SimConfig(n_devices=1, horizon=100_000)
    w = World(cfg, 5)
    count = sum(w.event_row(k)[0] < cfg.event_prob for k in range(cfg.horizon))
    sd = math.sqrt(cfg.horizon * 0.1 * 0.9)
    assert abs(count - 10_000) < 3 * sd


def test_scheduled_fraction_of_a_fixed_cycle():
    cfg = SimConfig(n_devices=1, event_prob=0.0, eh_rate=1.0)
    w = World(cfg, 2)
    pol = AdjustedDutyCyclingPolicy(1, 4)
    on = sum(int(step(w, pol).scheduled[0]) for _ in range(20_000))
    assert on / 20_000 == pytest.approx(0.25, abs=0.01)


@pytest.mark.parametrize("name", ["random", "knn", "genie", "awake"])
def test_trace_arcs_and_tick_ledger(name):
    cfg = SimConfig(n_devices=40, event_prob=0.3)
    w = World(cfg, 17)
    pol = SimpleFactory(name)(cfg)
    scale = EnergyTicks.from_config(cfg).scale
    prev = w.battery.copy()
    for _ in range(300):
        o = step(w, pol, trace=True)
        for _, a, b in o.transitions:
            assert (a, b) in ALLOWED_TRANSITIONS
        now = np.rint(o.battery * scale).astype(int)
        delta = np.rint((o.harvest - o.spend) * scale).astype(int)
        assert np.array_equal(now, prev + delta)
        assert np.all((now >= 0) & (now <= cfg.e_max * scale))
        prev = now


def test_genie_never_wastes():
    cfg = SimConfig(n_devices=60, horizon=1500)
    rec = run_replication(cfg, SimpleFactory("genie"), 8)
    assert rec.wrong_activations_per_event == 0 and rec.wasted_energy_per_event == 0


def _outcome(k, event, info, spend, arrivals, battery, wakeups=(), wrong=0, wasted=0.0):
    o = TtiOutcome(k=k, decision=PolicyDecision(np.zeros(2)))
    if event:
        o.event = Event(k, (0, 0), k)
        o.info = info
        o.misdetected = info <= 0
    o.spend, o.arrivals, o.battery = map(np.array, (spend, arrivals, battery))
    o.wakeups, o.wrong_activations, o.wasted = list(wakeups), wrong, wasted
    return o


def test_metrics_on_hand_built_trace():
    cfg = SimConfig(n_devices=2, event_prob=0.5)
    outs = [
        _outcome(0, True, 0.5, [1, 0], [0, 1], [10, 5], wakeups=[1], wrong=1, wasted=1.0),
        _outcome(1, False, None, [0, 0], [0, 0], [10, 5]),
        _outcome(2, True, 0.0, [2, 1], [1, 1], [9, 5]),
    ]
    r = collect_metrics(outs, cfg)
    assert r.energy_per_device_tti == pytest.approx(4 / 6)
    assert r.harvest_per_device_tti == pytest.approx(0.5)
    assert r.net_energy == pytest.approx(-1 / 6)
    assert r.mean_battery == pytest.approx(44 / 6)
    assert r.low_energy_fraction == pytest.approx(4 / 6)
    assert r.info_per_event == pytest.approx(1 / 3)
    assert r.info_per_realized_event == pytest.approx(0.25)
    assert (r.misdetection_rate, r.wrong_activations_per_event, r.wakeups_per_event) == (0.5, 0.5, 0.5)
    assert r.wasted_energy_per_event == 0.5


def test_single_replication_has_undefined_ci():
    s = monte_carlo(SimConfig(n_devices=10, horizon=100, replications=1), SimpleFactory("random"))
    assert not s.ci_defined and math.isnan(s.half_widths["energy_per_device_tti"])


def test_ci_shrinks_like_inverse_sqrt():
    cfg = SimConfig(n_devices=8, horizon=100, seed=1)
    h = [monte_carlo(cfg.replace(replications=r), SimpleFactory("random")).half_widths["energy_per_device_tti"]
         for r in (10, 40, 160)]
    assert 1.3 < h[0] / h[1] < 3.0
    assert 1.3 < h[1] / h[2] < 3.0


def test_paired_policies_share_event_streams():
    cfg = SimConfig(n_devices=15, horizon=200, replications=3)
    a = monte_carlo(cfg, SimpleFactory("random"))
    b = monte_carlo(cfg, SimpleFactory("genie"))
    assert [r.event_digest for r in a.records] == [r.event_digest for r in b.records]
    c = monte_carlo(cfg, SimpleFactory("random"), paired=False, salt=1)
    assert [r.seed for r in c.records] != [r.seed for r in a.records]


def test_worker_count_does_not_change_results():
    cfg = SimConfig(n_devices=15, horizon=150, replications=3)
    one = monte_carlo(cfg, SimpleFactory("knn"), workers=1)
    two = monte_carlo(cfg, SimpleFactory("knn"), workers=2)
    assert records_to_csv(one.records) == records_to_csv(two.records)


def test_trace_file(tmp_path):
    cfg = SimConfig(n_devices=5, horizon=50, event_prob=0.5)
    run_replication(cfg, SimpleFactory("random"), 1, trace_path=tmp_path / "t.ndjson")
    lines = (tmp_path / "t.ndjson").read_text().splitlines()
    assert len(lines) == 50
    assert all("k" in json.loads(x) for x in lines)


def test_misdetection_falls_with_density():
    rates = []
    for n in (10, 60, 250):
        cfg = SimConfig(n_devices=n, horizon=1500, replications=3)
        rates.append(monte_carlo(cfg, SimpleFactory("random")).mean("misdetection_rate"))
    assert rates[0] >= rates[1] >= rates[2]


def test_analytic_matrix_arcs():
    P, diag = analytic_transition_matrix(1, 4, 0.1, 0.5, 0.8)
    assert P[3, 0] == pytest.approx(0.25)
    assert P[1, 2] == pytest.approx(0.8) and P[1, 3] == pytest.approx(0.2)
    assert P[0, 1] == pytest.approx(0.05)
    np.testing.assert_allclose(P.sum(axis=1), 1.0)
    assert diag == []


def test_analytic_matrix_reports_out_of_range_rows():
    P, diag = analytic_transition_matrix(4, 5, 0.1, 0.5, 0.8)
    assert any("S1" in d for d in diag)
    np.testing.assert_allclose(P.sum(axis=1), 1.0)
    assert np.all((P >= 0) & (P <= 1))
    _, diag = analytic_transition_matrix(2, 2, 0.1, 0.5, 0.8)
    assert any("zero denominator" in d for d in diag)


def test_wakeup_probability_uses_activation():
    assert wakeup_probability([2.0], [3.0]) == pytest.approx(conditional_activation(2, 3))
    assert wakeup_probability([2.0, 1.0], [3.0, 3.0]) == pytest.approx(
        max(conditional_activation(2, 3), conditional_activation(1, 3)))
    assert wakeup_probability([], []) == 0.0


@given(st.integers(0, 2**63), st.integers(0, 50), st.integers(0, 50))
def test_mix64_is_64_bit(a, b, c):
    assert 0 <= mix64(a, b, c) < 2**64
