"""Policy contract and the non-learned duty-cycling / wake-up policies.

A policy is driven by the simulator once per TTI:

1. :meth:`Policy.decide` returns the binary vector ``delta`` (1 = the device
   follows its duty cycle and senses during on-slots, 0 = sleep with only the
   wake-up receiver on);
2. if an event produced reports, :meth:`Policy.on_event_reports` returns the
   ordered list of sleeping devices to wake.  The simulator wakes them one at
   a time and stops as soon as the aggregated information reaches
   :attr:`Policy.info_target` (``None`` means wake the whole list);
3. :meth:`Policy.feedback` receives the finished :class:`~ehiot.sim.TtiOutcome`.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .geometry import (
    ClusterAssignment,
    Deployment,
    conditional_activation,
    expected_min_information,
    knn_clusters,
    n_clusters,
)
from .model import DeviceState, EnergyTicks, Event, SimConfig, sensing_probability


class PolicyError(RuntimeError):
    """A policy returned something that violates the decision contract."""


@dataclass
class Observation:
    """What the base station knows at one point of a TTI.

    Arrays are live views into the simulator state and must not be modified.
    ``event`` is only filled in for policies with ``needs_oracle = True``.
    """

    k: int
    cfg: SimConfig
    energy: EnergyTicks
    positions: np.ndarray
    battery_ticks: np.ndarray
    delta: np.ndarray
    state: np.ndarray
    sensing: np.ndarray
    reporters: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=int))
    report_info: np.ndarray = field(default_factory=lambda: np.empty(0))
    info: float = 0.0
    event: Event | None = None

    @property
    def n(self) -> int:
        return len(self.battery_ticks)

    @property
    def battery(self) -> np.ndarray:
        return self.battery_ticks / self.energy.scale


@dataclass
class PolicyDecision:
    delta: np.ndarray
    wake_order: list = field(default_factory=list)


@dataclass
class DutyCycle:
    t_on: np.ndarray
    t_drx: np.ndarray
    phase: np.ndarray

    @classmethod
    def always_on(cls, n: int) -> "DutyCycle":
        one = np.ones(n, dtype=np.int64)
        return cls(one, one.copy(), np.zeros(n, dtype=np.int64))

    def validate(self, n: int) -> None:
        for name in ("t_on", "t_drx", "phase"):
            if len(getattr(self, name)) != n:
                raise PolicyError(f"duty cycle {name} has wrong length")
        if np.any(self.t_on < 1) or np.any(self.t_on > self.t_drx):
            raise PolicyError("need 1 <= t_on <= t_drx")
        if np.any(self.phase < 0) or np.any(self.phase >= self.t_drx):
            raise PolicyError("need 0 <= phase < t_drx")


@dataclass
class PolicyContext:
    cfg: SimConfig
    deployment: Deployment
    rng: np.random.Generator


def validate_delta(delta, n: int) -> np.ndarray:
    d = np.asarray(delta)
    if d.shape != (n,):
        raise PolicyError(f"decision vector has shape {d.shape}, expected ({n},)")
    if not np.all((d == 0) | (d == 1)):
        raise PolicyError("decision vector must be binary")
    return d.astype(np.int8, copy=False)


def validate_wake_order(order, state: np.ndarray) -> list[int]:
    order = [int(j) for j in order]
    if len(set(order)) != len(order):
        raise PolicyError("wake order contains duplicates")
    for j in order:
        if not 0 <= j < len(state) or state[j] != DeviceState.SLEEP:
            raise PolicyError(f"device {j} is not asleep and cannot be woken")
    return order


class Policy:
    name = "policy"
    needs_oracle = False
    info_target: float | None = None

    def reset(self, ctx: PolicyContext) -> DutyCycle:
        return DutyCycle.always_on(ctx.cfg.n_devices)

    def decide(self, obs: Observation, rng: np.random.Generator) -> np.ndarray:
        raise NotImplementedError

    def on_event_reports(self, obs: Observation, rng: np.random.Generator) -> list[int]:
        return []

    def feedback(self, outcome) -> None:
        pass

    def decision(self, obs: Observation, rng: np.random.Generator) -> PolicyDecision:
        """Convenience wrapper bundling :meth:`decide` into a :class:`PolicyDecision`."""
        return PolicyDecision(validate_delta(self.decide(obs, rng), obs.n))


class ConstantPolicy(Policy):
    """Every device always sleeps (``value=0``) or always senses (``value=1``)."""

    def __init__(self, value: int):
        self.value = int(value)
        self.name = f"always-{self.value}"

    def reset(self, ctx):
        self._delta = np.full(ctx.cfg.n_devices, self.value, dtype=np.int8)
        return DutyCycle.always_on(ctx.cfg.n_devices)

    def decide(self, obs, rng):
        return self._delta


class RandomPolicy(Policy):
    """Each device draws its own duty cycle once; no wake-ups."""

    name = "random"
    T_ON = (1, 2)
    T_DRX = (2, 4, 8)

    def reset(self, ctx):
        n = ctx.cfg.n_devices
        t_on = ctx.rng.choice(self.T_ON, size=n).astype(np.int64)
        t_drx = ctx.rng.choice(self.T_DRX, size=n).astype(np.int64)
        phase = ctx.rng.integers(0, t_drx)
        self._delta = np.ones(n, dtype=np.int8)
        return DutyCycle(t_on, t_drx, phase)

    def decide(self, obs, rng):
        return self._delta


class GeniePolicy(Policy):
    """Upper bound: everything sleeps and the device nearest to each event is woken.

    Nothing is woken when the nearest device is beyond ``d_max`` or cannot
    afford sensing plus transmission, so no energy is ever wasted.
    """

    name = "genie"
    needs_oracle = True

    def reset(self, ctx):
        self._delta = np.zeros(ctx.cfg.n_devices, dtype=np.int8)
        return DutyCycle.always_on(ctx.cfg.n_devices)

    def decide(self, obs, rng):
        return self._delta

    def on_event_reports(self, obs, rng):
        ev = obs.event
        if ev is None:
            return []
        d = np.hypot(obs.positions[:, 0] - ev.epicenter[0], obs.positions[:, 1] - ev.epicenter[1])
        j = int(np.argmin(d))
        e = obs.energy
        if d[j] > obs.cfg.d_max or obs.state[j] != DeviceState.SLEEP:
            return []
        if obs.battery_ticks[j] < e.e_idle + e.e_tx:
            return []
        return [j]


def reporter_distances(obs: Observation) -> np.ndarray:
    """Epicenter distance of each reporter, recovered from its reported information."""
    ratio = np.clip(obs.report_info / obs.cfg.psi, 1e-300, 1.0)
    return -np.log(ratio) / obs.cfg.decay


def wake_scores(obs: Observation, candidates: np.ndarray) -> np.ndarray:
    """Highest cosine-rule activation of each candidate w.r.t. any current reporter."""
    if len(obs.reporters) == 0 or len(candidates) == 0:
        return np.zeros(len(candidates))
    d_ih = reporter_distances(obs)
    rep_pos = obs.positions[obs.reporters]
    cand_pos = obs.positions[candidates]
    gamma = np.hypot(cand_pos[:, None, 0] - rep_pos[None, :, 0], cand_pos[:, None, 1] - rep_pos[None, :, 1])
    act = conditional_activation(np.broadcast_to(d_ih, gamma.shape), gamma, obs.cfg.decay)
    return np.asarray(act).reshape(gamma.shape).max(axis=1)


def correlation_wake_order(obs: Observation) -> list[int]:
    """Sleeping devices whose activation w.r.t. some reporter is at least
    ``p(d_max)``, strongest first."""
    asleep = np.flatnonzero(obs.state == DeviceState.SLEEP)
    if len(obs.reporters) == 0 or len(asleep) == 0:
        return []
    threshold = sensing_probability(obs.cfg.d_max, obs.cfg.decay)
    # devices farther than d_max + d_ih from every reporter cannot reach the threshold
    d_ih = reporter_distances(obs)
    rep_pos = obs.positions[obs.reporters]
    pos = obs.positions[asleep]
    gamma = np.hypot(pos[:, None, 0] - rep_pos[None, :, 0], pos[:, None, 1] - rep_pos[None, :, 1])
    near = np.any(gamma <= obs.cfg.d_max + d_ih[None, :], axis=1)
    cand = asleep[near]
    scores = wake_scores(obs, cand)
    keep = scores >= threshold
    cand, scores = cand[keep], scores[keep]
    order = np.lexsort((cand, -scores))
    return [int(j) for j in cand[order]]


class KnnRoundRobinPolicy(Policy):
    """Cluster round-robin sensing with correlation-ranked wake-ups.

    Devices are grouped into ``ceil(area / (pi d_max^2))`` KNN clusters; in
    every TTI exactly one member of each cluster senses, in member-index
    order.  After an event is reported, sleeping devices are woken strongest
    activation first until the information reaches the deployment's
    Voronoi floor.
    """

    name = "knn"

    def __init__(self, k_neighbors: int = 3, clusters: ClusterAssignment | None = None):
        self.k_neighbors = k_neighbors
        self.fixed_clusters = clusters
        self.clusters = clusters

    def reset(self, ctx):
        cfg, dep = ctx.cfg, ctx.deployment
        n = cfg.n_devices
        if self.fixed_clusters is not None:
            if len(self.fixed_clusters.labels) != n:
                raise ValueError("cluster assignment does not match the number of devices")
            self.clusters = self.fixed_clusters
        else:
            m = min(n_clusters(cfg.area, cfg.d_max), n)
            self.clusters = knn_clusters(dep, m, self.k_neighbors, ctx.rng)
        self.info_target = expected_min_information(dep, cfg.decay, cfg.psi)
        t_on = np.ones(n, dtype=np.int64)
        t_drx = np.ones(n, dtype=np.int64)
        phase = np.zeros(n, dtype=np.int64)
        for members in self.clusters.clusters:
            s = len(members)
            t_drx[members] = s
            phase[members] = (s - np.arange(s)) % s
        self._delta = np.ones(n, dtype=np.int8)
        return DutyCycle(t_on, t_drx, phase)

    def decide(self, obs, rng):
        return self._delta

    def on_event_reports(self, obs, rng):
        return correlation_wake_order(obs)


class AdjustedDutyCyclingPolicy(Policy):
    """One global ``(t_on, t_drx)`` pair with random phases and correlation wake-ups."""

    name = "adjusted"

    def __init__(self, t_on: int, t_drx: int):
        if not 1 <= t_on <= t_drx:
            raise ValueError("need 1 <= t_on <= t_drx")
        self.t_on, self.t_drx = int(t_on), int(t_drx)

    def reset(self, ctx):
        cfg = ctx.cfg
        n = cfg.n_devices
        self.info_target = expected_min_information(ctx.deployment, cfg.decay, cfg.psi)
        self._delta = np.ones(n, dtype=np.int8)
        return DutyCycle(
            np.full(n, self.t_on, dtype=np.int64),
            np.full(n, self.t_drx, dtype=np.int64),
            ctx.rng.integers(0, self.t_drx, size=n),
        )

    def decide(self, obs, rng):
        return self._delta

    def on_event_reports(self, obs, rng):
        return correlation_wake_order(obs)


DEFAULT_PAIRS = ((1, 2), (1, 4), (1, 8), (2, 2), (2, 4), (2, 8))


@dataclass
class SearchResult:
    t_on: int
    t_drx: int
    feasible: bool
    table: list  # (t_on, t_drx, info_per_event, energy, info_floor)

    def policy(self) -> AdjustedDutyCyclingPolicy:
        return AdjustedDutyCyclingPolicy(self.t_on, self.t_drx)


def select_pair(table) -> tuple[tuple[int, int], bool]:
    """Most informative pair among those meeting their floor; ties go to lower energy.

    Rows are ``(t_on, t_drx, info, energy, floor)``.  When no pair meets the
    floor the most informative pair is returned with ``feasible=False``.
    """
    feasible = [row for row in table if row[2] >= row[4]]
    pool = feasible or list(table)
    best = min(pool, key=lambda r: (-r[2], r[3]))
    return (best[0], best[1]), bool(feasible)


def adjusted_duty_cycling_search(cfg: SimConfig, pairs: Sequence[tuple[int, int]] = DEFAULT_PAIRS,
                                 replications: int = 10, horizon: int = 2000) -> SearchResult:
    """Exhaustive search over global duty-cycle pairs with common random numbers.

    Every pair is simulated on the same ``replications`` seeds (derived from
    ``cfg.seed``) for ``horizon`` TTIs.
    """
    from .sim import monte_carlo

    pairs = [(int(a), int(b)) for a, b in pairs if a <= b]
    if not pairs:
        raise ValueError("no candidate pair with t_on <= t_drx")
    if len(pairs) == 1:
        return SearchResult(*pairs[0], True, [])
    eval_cfg = cfg.replace(replications=replications, horizon=horizon)
    table = []
    for t_on, t_drx in pairs:
        summary = monte_carlo(eval_cfg, AdjustedFactory(t_on, t_drx), workers=1)
        table.append((t_on, t_drx, summary.mean("info_per_event"), summary.mean("energy_per_device_tti"),
                      summary.mean("info_floor")))
    (t_on, t_drx), ok = select_pair(table)
    return SearchResult(t_on, t_drx, ok, table)


@dataclass(frozen=True)
class AdjustedFactory:
    t_on: int
    t_drx: int

    def __call__(self, cfg: SimConfig) -> Policy:
        return AdjustedDutyCyclingPolicy(self.t_on, self.t_drx)


@dataclass(frozen=True)
class SimpleFactory:
    """Picklable factory for the stateless policies, keyed by name."""

    name: str

    def __call__(self, cfg: SimConfig) -> Policy:
        return {
            "random": RandomPolicy,
            "genie": GeniePolicy,
            "knn": KnnRoundRobinPolicy,
            "sleep": lambda: ConstantPolicy(0),
            "awake": lambda: ConstantPolicy(1),
        }[self.name]()
