"""TTI engine, metrics and Monte Carlo replication management.

Order of operations inside one TTI::

    decide -> harvest -> sensing / WuR charges -> event draw -> detection
           -> transmission -> wake-up loop -> settle -> metrics

Every random quantity comes from a dedicated stream (deployment, harvest,
events, detection coins, policy), so two policies run on the same seed see
identical deployments, energy arrivals and events.
"""
from __future__ import annotations

import csv
import hashlib
import io
import json
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields
from typing import Callable, Sequence

import numpy as np
from scipy import stats

from .energy import arrival_probability
from .geometry import Deployment, deploy, expected_min_information
from .model import (
    Aggregation,
    DeviceState,
    EnergyTicks,
    Event,
    Report,
    SimConfig,
    aggregate_values,
    sensing_probability,
)
from .policy import (
    Observation,
    Policy,
    PolicyContext,
    PolicyDecision,
    PolicyError,
    validate_delta,
    validate_wake_order,
)

S1, S2, S3, S4 = (int(s) for s in DeviceState)
_BLOCK = 512
MASK64 = (1 << 64) - 1


def mix64(*words: int) -> int:
    """Fold integers into one 64-bit seed with the splitmix64 finaliser.

    Replication ``r`` of sweep point ``i`` under master seed ``s`` uses
    ``mix64(s, i, r)``; the result does not depend on the worker count.
    """
    h = 0x9E3779B97F4A7C15
    for w in words:
        h = (h ^ (int(w) & MASK64)) & MASK64
        h = (h + 0x9E3779B97F4A7C15) & MASK64
        z = h
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
        h = z ^ (z >> 31)
    return h


PolicyFactory = Callable[[SimConfig], Policy]


@dataclass
class TtiOutcome:
    k: int
    decision: PolicyDecision
    event: Event | None = None
    reports: list = field(default_factory=list)
    wakeups: list = field(default_factory=list)
    info: float | None = None
    misdetected: bool = False
    wrong_activations: int = 0
    wasted: float = 0.0
    scheduled: np.ndarray | None = None  # devices put in S1 by delta and their duty slot
    spend: np.ndarray | None = None  # units, per device
    harvest: np.ndarray | None = None  # units actually credited, per device
    arrivals: np.ndarray | None = None  # units arriving before the capacity clamp
    battery: np.ndarray | None = None  # units, end of TTI
    transitions: list = field(default_factory=list)  # (device, from, to), trace mode only


class World:
    """Mutable state of one replication."""

    def __init__(self, cfg: SimConfig, seed: int, deployment: Deployment | None = None,
                 initial_battery: float | None = None):
        self.cfg = cfg
        self.energy = EnergyTicks.from_config(cfg)
        ss = np.random.SeedSequence(int(seed) & MASK64)
        streams = [np.random.default_rng(s) for s in ss.spawn(6)]
        self.rng_deploy, self.rng_harvest, self.rng_event, self.rng_sense, self.rng_policy, self.rng_setup = streams
        self.deployment = deployment if deployment is not None else deploy(cfg, self.rng_deploy)
        if self.deployment.n != cfg.n_devices:
            raise ValueError("deployment size does not match n_devices")
        n = cfg.n_devices
        self.n = n
        e = self.energy
        full = e.e_max if initial_battery is None else int(round(initial_battery * e.scale))
        self.battery = np.full(n, full, dtype=np.int64)
        self.state = np.full(n, S4, dtype=np.int8)
        self.delta = np.zeros(n, dtype=np.int8)
        self.sensing = np.zeros(n)
        self.k = 0
        self.event_count = 0
        self.p_harvest = arrival_probability(cfg.eh_rate, cfg.tti)
        self._hblock = None
        self._eblock = None
        self.digest = hashlib.blake2b(digest_size=8)
        self.duty = None
        self.p_dmax = sensing_probability(cfg.d_max, cfg.decay)

    def attach(self, policy: Policy) -> None:
        ctx = PolicyContext(self.cfg, self.deployment, self.rng_setup)
        duty = policy.reset(ctx)
        duty.validate(self.n)
        self.duty = duty

    def harvest_row(self, k: int) -> np.ndarray:
        i = k % _BLOCK
        if i == 0 or self._hblock is None:
            self._hblock = self.rng_harvest.random((_BLOCK, self.n)) < self.p_harvest
        return self._hblock[i]

    def event_row(self, k: int) -> np.ndarray:
        i = k % _BLOCK
        if i == 0 or self._eblock is None:
            self._eblock = self.rng_event.random((_BLOCK, 3))
        return self._eblock[i]

    def observation(self, with_event: Event | None = None) -> Observation:
        return Observation(
            k=self.k, cfg=self.cfg, energy=self.energy, positions=self.deployment.positions,
            battery_ticks=self.battery, delta=self.delta, state=self.state, sensing=self.sensing,
            event=with_event,
        )


def step(world: World, policy: Policy, trace: bool = False) -> TtiOutcome:
    """Advance ``world`` by one TTI under ``policy``."""
    cfg, e, n, k = world.cfg, world.energy, world.n, world.k
    if world.duty is None:
        world.attach(policy)
    bat = world.battery
    state = world.state
    trans = [] if trace else None
    prev = state.copy() if trace else None

    # 1. decision
    obs = world.observation()
    delta = validate_delta(policy.decide(obs, world.rng_policy), n)
    world.delta = delta
    world.sensing = np.zeros(n)
    duty = world.duty
    sched = (delta == 1) & ((k + duty.phase) % duty.t_drx < duty.t_on)
    state[:] = np.where(sched, S1, S4)
    if trace:
        _log(trans, prev, state)

    # 2. harvest
    arrivals = world.harvest_row(k) * e.e_b
    before = bat.copy()
    np.minimum(bat + arrivals, e.e_max, out=bat)
    credited = bat - before

    # 3. sensing and wake-up receiver upkeep
    spend = np.zeros(n, dtype=np.int64)
    idle = state == S1
    ok = bat >= e.e_idle
    fail = idle & ~ok
    cost = np.where(idle, e.e_idle, e.e_wur)
    paid = np.where(bat >= cost, cost, bat)
    spend += paid
    bat -= paid
    if fail.any():
        if trace:
            _log(trans, state, np.where(fail, S4, state))
        state[fail] = S4

    # 4. event
    u, ex, ey = world.event_row(k)
    event = None
    outcome = TtiOutcome(k=k, decision=PolicyDecision(delta), scheduled=sched)
    if u < cfg.event_prob:
        event = Event(world.event_count, (ex * cfg.area_side, ey * cfg.area_side), k)
        world.event_count += 1
        world.digest.update(np.array([k, ex, ey]).tobytes())
        _handle_event(world, policy, event, sched, spend, outcome, trans)

    # 8. settle transmitters
    tx = state == S3
    if tx.any():
        new = np.where(tx, np.where(sched, S1, S4), state).astype(np.int8)
        if trace:
            _log(trans, state, new)
        state[:] = new

    outcome.spend = spend / e.scale
    outcome.harvest = credited / e.scale
    outcome.arrivals = arrivals / e.scale
    outcome.battery = bat / e.scale
    if trace:
        outcome.transitions = trans
    world.k += 1
    policy.feedback(outcome)
    return outcome


def _log(trans, old, new):
    for j in np.flatnonzero(old != new):
        trans.append((int(j), DeviceState(int(old[j])), DeviceState(int(new[j]))))


def _handle_event(world: World, policy: Policy, event: Event, sched, spend, outcome: TtiOutcome, trans):
    cfg, e = world.cfg, world.energy
    bat, state = world.battery, world.state
    pos = world.deployment.positions
    d = np.hypot(pos[:, 0] - event.epicenter[0], pos[:, 1] - event.epicenter[1])
    p = np.exp(-cfg.decay * d)
    coins = world.rng_sense.random(world.n)

    # 5. detection by sensing devices
    detect = (state == S1) & (coins < p)
    reports = []
    if detect.any():
        if trans is not None:
            _log_mask(trans, detect, S1, S2)
        can = detect & (bat >= e.e_tx)
        drained = detect & ~can
        # 6. transmission attempt
        spend[can] += e.e_tx
        bat[can] -= e.e_tx
        spend[drained] += bat[drained]
        bat[drained] = 0
        state[can] = S3
        state[drained] = S4
        if trans is not None:
            _log_mask(trans, can, S2, S3)
            _log_mask(trans, drained, S2, S4)
        for j in np.flatnonzero(detect):
            reports.append(Report(int(j), float(cfg.psi * p[j]), bool(can[j])))

    good = [r for r in reports if r.success]
    info = aggregate_values([r.info for r in good], cfg.aggregation, cfg.psi)
    sensing = np.zeros(world.n)
    for r in good:
        sensing[r.device] = r.info / cfg.psi
    world.sensing = sensing

    # 7. wake-ups
    wrong = 0
    wasted = 0
    woken = []
    if good:
        obs = world.observation(event if policy.needs_oracle else None)
        obs.reporters = np.array([r.device for r in good], dtype=int)
        obs.report_info = np.array([r.info for r in good])
        obs.info = info
    elif policy.needs_oracle:
        obs = world.observation(event)
    else:
        obs = None
    if obs is not None:
        order = validate_wake_order(policy.on_event_reports(obs, world.rng_policy), state)
        target = policy.info_target
        for j in order:
            if target is not None and info >= target:
                break
            woken.append(j)
            state[j] = S2
            before = int(bat[j])
            if trans is not None:
                trans.append((j, DeviceState.SLEEP, DeviceState.ACTIVE))
            success = False
            if bat[j] >= e.e_idle:
                bat[j] -= e.e_idle
                if bat[j] >= e.e_tx:
                    bat[j] -= e.e_tx
                    success = True
                else:
                    bat[j] = 0
            else:
                bat[j] = 0
            used = before - int(bat[j])
            spend[j] += used
            if success:
                state[j] = S3
                r = Report(j, float(cfg.psi * p[j]), True)
                good.append(r)
                sensing[j] = p[j]
                info = aggregate_values([g.info for g in good], cfg.aggregation, cfg.psi)
            else:
                state[j] = S4
                reports.append(Report(j, float(cfg.psi * p[j]), False))
            if trans is not None:
                trans.append((j, DeviceState.ACTIVE, DeviceState(int(state[j]))))
            if not success or d[j] > cfg.d_max:
                wrong += 1
                wasted += used
            if success:
                reports.append(r)

    outcome.event = event
    outcome.reports = reports
    outcome.wakeups = woken
    outcome.info = info
    outcome.misdetected = info <= 0.0
    outcome.wrong_activations = wrong
    outcome.wasted = wasted / e.scale


def _log_mask(trans, mask, a, b):
    for j in np.flatnonzero(mask):
        trans.append((int(j), DeviceState(a), DeviceState(b)))


METRIC_FIELDS = (
    "info_per_event",
    "info_per_realized_event",
    "misdetection_rate",
    "energy_per_device_tti",
    "harvest_per_device_tti",
    "net_energy",
    "mean_battery",
    "low_energy_fraction",
    "wrong_activations_per_event",
    "wasted_energy_per_event",
    "wakeups_per_event",
    "info_floor",
)


@dataclass
class MetricsRecord:
    """Per-replication aggregates.  Event-normalised fields are NaN without events."""

    seed: int = 0
    n_devices: int = 0
    ttis: int = 0
    events: int = 0
    info_per_event: float = math.nan
    info_per_realized_event: float = math.nan
    misdetection_rate: float = math.nan
    energy_per_device_tti: float = math.nan
    harvest_per_device_tti: float = math.nan
    net_energy: float = math.nan
    mean_battery: float = math.nan
    low_energy_fraction: float = math.nan
    wrong_activations_per_event: float = math.nan
    wasted_energy_per_event: float = math.nan
    wakeups_per_event: float = math.nan
    info_floor: float = math.nan
    event_digest: str = ""

    @property
    def undefined(self) -> bool:
        return self.events == 0


class MetricsAccumulator:
    def __init__(self, cfg: SimConfig, n: int, low_threshold: float | None = None):
        self.cfg = cfg
        self.n = n
        self.low = cfg.e_tx if low_threshold is None else low_threshold
        self.ttis = 0
        self.events = 0
        self.misses = 0
        self.info = 0.0
        self.spend = 0.0
        self.arrivals = 0.0
        self.battery = 0.0
        self.low_count = 0
        self.wrong = 0
        self.wasted = 0.0
        self.wakeups = 0

    def add(self, o: TtiOutcome) -> None:
        self.ttis += 1
        self.spend += float(o.spend.sum())
        self.arrivals += float(o.arrivals.sum())
        self.battery += float(o.battery.sum())
        self.low_count += int(np.count_nonzero(o.battery < self.low))
        if o.event is not None:
            self.events += 1
            self.info += o.info
            self.misses += bool(o.misdetected)
            self.wrong += o.wrong_activations
            self.wasted += o.wasted
            self.wakeups += len(o.wakeups)

    def record(self, seed: int = 0, info_floor: float = math.nan, digest: str = "") -> MetricsRecord:
        r = MetricsRecord(seed=seed, n_devices=self.n, ttis=self.ttis, events=self.events,
                          info_floor=info_floor, event_digest=digest)
        nk = self.n * self.ttis
        if self.ttis:
            r.energy_per_device_tti = self.spend / nk
            r.harvest_per_device_tti = self.arrivals / nk
            r.net_energy = r.harvest_per_device_tti - r.energy_per_device_tti
            r.mean_battery = self.battery / nk
            r.low_energy_fraction = self.low_count / nk
            expected = self.cfg.event_prob * self.ttis
            if expected > 0:
                r.info_per_event = self.info / expected
        if self.events:
            r.info_per_realized_event = self.info / self.events
            r.misdetection_rate = self.misses / self.events
            r.wrong_activations_per_event = self.wrong / self.events
            r.wasted_energy_per_event = self.wasted / self.events
            r.wakeups_per_event = self.wakeups / self.events
        return r


def collect_metrics(outcomes: Sequence[TtiOutcome], cfg: SimConfig, n: int | None = None) -> MetricsRecord:
    """Aggregate a finished outcome stream into a :class:`MetricsRecord`."""
    outcomes = list(outcomes)
    if n is None:
        n = len(outcomes[0].spend) if outcomes else cfg.n_devices
    acc = MetricsAccumulator(cfg, n)
    for o in outcomes:
        acc.add(o)
    return acc.record()


def replication_seed(master: int, point: int, rep: int) -> int:
    return mix64(master, point, rep)


def run_replication(cfg: SimConfig, policy_factory: PolicyFactory, seed: int,
                    trace_path: str | os.PathLike | None = None, policy: Policy | None = None) -> MetricsRecord:
    """Simulate ``cfg.horizon`` TTIs on a fresh deployment drawn from ``seed``."""
    world = World(cfg, seed)
    policy = policy if policy is not None else policy_factory(cfg)
    world.attach(policy)
    acc = MetricsAccumulator(cfg, world.n)
    fh = open(trace_path, "w") if trace_path else None
    try:
        for _ in range(cfg.horizon):
            o = step(world, policy)
            acc.add(o)
            if fh is not None:
                fh.write(_trace_line(o) + "\n")
    finally:
        if fh is not None:
            fh.close()
    floor = expected_min_information(world.deployment, cfg.decay, cfg.psi) if world.n >= 1 else math.nan
    return acc.record(seed=seed, info_floor=floor, digest=world.digest.hexdigest())


def _trace_line(o: TtiOutcome) -> str:
    rec = {"k": o.k, "awake": int(o.decision.delta.sum()), "spend": float(o.spend.sum()),
           "harvest": float(o.harvest.sum())}
    if o.event is not None:
        rec.update(event=list(o.event.epicenter), info=o.info, misdetected=o.misdetected,
                   reports=[[r.device, r.info, r.success] for r in o.reports], wakeups=o.wakeups)
    return json.dumps(rec)


@dataclass
class Summary:
    """Monte Carlo means and 95% confidence half-widths per metric."""

    records: list
    means: dict
    half_widths: dict
    ci_defined: bool

    def mean(self, name: str) -> float:
        return self.means[name]

    def ci(self, name: str) -> tuple[float, float]:
        m, h = self.means[name], self.half_widths[name]
        return m - h, m + h

    def values(self, name: str) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.records], dtype=float)


def summarize(records: Sequence[MetricsRecord]) -> Summary:
    records = list(records)
    means, half = {}, {}
    for name in METRIC_FIELDS:
        v = np.array([getattr(r, name) for r in records], dtype=float)
        v = v[np.isfinite(v)]
        means[name] = float(v.mean()) if v.size else math.nan
        if v.size > 1:
            half[name] = float(stats.t.ppf(0.975, v.size - 1) * v.std(ddof=1) / math.sqrt(v.size))
        else:
            half[name] = math.nan
    return Summary(records, means, half, len(records) > 1)


def _run_one(args):
    cfg, factory, seed = args
    return run_replication(cfg, factory, seed)


def monte_carlo(cfg: SimConfig, policy_factory: PolicyFactory, point: int = 0, workers: int = 1,
                paired: bool = True, salt: int = 0) -> Summary:
    """Run ``cfg.replications`` independent replications.

    Replication ``r`` uses seed ``mix64(cfg.seed, point, r)``.  With
    ``paired=True`` (default) the seed ignores the policy, so different
    policies on the same point share deployments, harvests and events;
    ``paired=False`` additionally mixes in ``salt``.
    """
    seeds = [mix64(cfg.seed, point, r) if paired else mix64(cfg.seed, point, r, salt)
             for r in range(cfg.replications)]
    jobs = [(cfg, policy_factory, s) for s in seeds]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            records = list(pool.map(_run_one, jobs))
    else:
        records = [_run_one(j) for j in jobs]
    return summarize(records)


def records_to_csv(records: Sequence[MetricsRecord]) -> str:
    buf = io.StringIO()
    names = [f.name for f in fields(MetricsRecord)]
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(names)
    for r in records:
        w.writerow([_fmt(getattr(r, k)) for k in names])
    return buf.getvalue()


def _fmt(v):
    if isinstance(v, float):
        return f"{v:.9g}"
    return v


def analytic_transition_matrix(t_on: int, t_drx: int, event_prob: float, p_detect: float,
                               availability: float, p_wake: float = 0.0, tti: int = 1):
    """Four-state transition matrix built from the closed-form arc probabilities.

    Returns ``(P, diagnostics)``; rows index S1..S4.  Entries are evaluated as
    written.  When a row leaves [0, 1] or does not sum to one, it is clamped
    and renormalised and a diagnostic string describes what was changed.
    Division by zero in the summations (``i == t_drx``) is skipped and reported.
    """
    diag = []
    P = np.zeros((4, 4))
    a = event_prob
    p11 = 0.0
    p31 = 0.0
    for i in range(tti, t_on + 1):
        den = t_drx - i
        if den == 0:
            diag.append(f"term i={i} of the S1/S3 sums has zero denominator; skipped")
            continue
        frac = (t_on - i) / den
        p11 += (1 - a) ** i * frac
        p31 += frac
    p12 = a * p_detect
    P[0] = [p11, p12, 0.0, 1 - p11 - p12]
    P[1] = [0.0, 0.0, availability, 1 - availability]
    P[2] = [p31, 0.0, 0.0, 1 - p31]
    p41 = t_on / t_drx
    P[3] = [p41, p_wake, 0.0, 1 - p41 - p_wake]
    for r, name in enumerate(("S1", "S2", "S3", "S4")):
        row = P[r]
        if np.any(row < -1e-12) or np.any(row > 1 + 1e-12):
            diag.append(f"row {name} as written is {row.round(6).tolist()}; clamped and renormalised")
            row = np.clip(row, 0.0, 1.0)
            s = row.sum()
            P[r] = row / s if s > 0 else np.eye(4)[r]
    return P, diag


def wakeup_probability(d_ih: Sequence[float], gamma: Sequence[float], decay: float = 1.0) -> float:
    """Wake-up arc probability: max activation over the current reporters."""
    from .geometry import conditional_activation

    if len(d_ih) == 0:
        return 0.0
    return float(np.max(conditional_activation(np.asarray(d_ih), np.asarray(gamma), decay)))
