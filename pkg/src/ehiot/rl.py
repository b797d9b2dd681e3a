"""Tabular Q-learning for duty cycling (stage 1) and wake-up selection (stage 2).

Every device is described by a small discrete feature key (battery bin, its
current duty flag, a sensing-power bin and a local-density bin).  All devices
share one Q-table per stage and act independently on their own key.

Stage 1 chooses ``delta_j`` each TTI and is trained on the duty reward; stage 2
ranks sleeping devices after an event has been reported and is trained on the
wake-up reward.  Both global rewards are split into per-device credit as
described in :func:`duty_credit` and :func:`wakeup_credit`.
"""
from __future__ import annotations

import hashlib
import io
import json
import math
from dataclasses import asdict, dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

from .geometry import conditional_activation
from .model import DeviceState, SimConfig, aggregate_values, sensing_probability
from .policy import DutyCycle, Observation, Policy, reporter_distances

FORMAT_VERSION = 1


class RlTrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class RlConfig:
    mu1: float = 20.0
    mu2: float = 2.0
    zeta: float = 0.9
    lr: float = 0.1
    eps_start: float = 1.0
    eps_end: float = 0.05
    eps_decay_frac: float = 0.5
    n_battery_bins: int = 10
    n_sensing_bins: int = 10
    density_edges: tuple = (2, 6, 14, 30)
    episodes: int = 20
    horizon: int = 2000
    realized_alpha: bool = True

    def __post_init__(self):
        if not 0 < self.zeta <= 1:
            raise ValueError("zeta must lie in (0, 1]")
        if not (0 <= self.eps_end <= 1 and 0 <= self.eps_start <= 1):
            raise ValueError("exploration rates must lie in [0, 1]")
        if self.n_battery_bins < 1 or self.n_sensing_bins < 1:
            raise ValueError("bin counts must be >= 1")

    @property
    def n_density_bins(self) -> int:
        return len(self.density_edges) + 1

    @property
    def n_keys(self) -> int:
        return self.n_battery_bins * 2 * self.n_sensing_bins * self.n_density_bins


class FeatureKey(NamedTuple):
    battery: int
    delta: int
    sensing: int
    density: int


def battery_bin(b, e_max: float, n_bins: int):
    idx = np.floor(np.asarray(b, dtype=float) / e_max * n_bins).astype(int)
    return np.clip(idx, 0, n_bins - 1)


def sensing_bin(p, n_bins: int):
    """Bin of a sensing power in [0, 1]; 0.9 with 10 bins lands in bin 9."""
    idx = np.floor(np.asarray(p, dtype=float) * n_bins + 1e-12).astype(int)
    return np.clip(idx, 0, n_bins - 1)


def density_bin(count, edges: Sequence[int]):
    return np.searchsorted(np.asarray(edges), np.asarray(count), side="right")


def neighbour_counts(positions: np.ndarray, d_max: float) -> np.ndarray:
    diff = positions[:, None, :] - positions[None, :, :]
    d = np.hypot(diff[..., 0], diff[..., 1])
    return (d <= d_max).sum(axis=1) - 1


def flat_index(keys: FeatureKey | tuple, rc: RlConfig):
    b, d, s, n = keys
    return ((np.asarray(b) * 2 + np.asarray(d)) * rc.n_sensing_bins + np.asarray(s)) * rc.n_density_bins + np.asarray(n)


def unflatten(idx: int, rc: RlConfig) -> FeatureKey:
    idx, n = divmod(int(idx), rc.n_density_bins)
    idx, s = divmod(idx, rc.n_sensing_bins)
    b, d = divmod(idx, 2)
    return FeatureKey(b, d, s, n)


def estimated_sensing(obs: Observation) -> np.ndarray:
    """Per-device sensing power for the current event.

    Reporters use their own measurement; every other device gets the highest
    cosine-rule activation with respect to any reporter.  Without reports the
    observation's stored sensing values are returned.
    """
    if len(obs.reporters) == 0:
        return np.asarray(obs.sensing, dtype=float).copy()
    d_ih = reporter_distances(obs)
    rep = obs.positions[obs.reporters]
    gamma = np.hypot(obs.positions[:, None, 0] - rep[None, :, 0], obs.positions[:, None, 1] - rep[None, :, 1])
    est = np.asarray(conditional_activation(np.broadcast_to(d_ih, gamma.shape), gamma, obs.cfg.decay))
    est = est.reshape(gamma.shape).max(axis=1)
    est[obs.reporters] = obs.report_info / obs.cfg.psi
    return est


def encode_all(obs: Observation, rc: RlConfig, sensing=None, density=None) -> np.ndarray:
    """Flat feature index of every device (vectorised :func:`encode_state`)."""
    cfg = obs.cfg
    s = estimated_sensing(obs) if sensing is None else sensing
    if density is None:
        density = density_bin(neighbour_counts(obs.positions, cfg.d_max), rc.density_edges)
    bb = battery_bin(obs.battery, cfg.e_max, rc.n_battery_bins)
    return flat_index((bb, np.asarray(obs.delta, dtype=int), sensing_bin(s, rc.n_sensing_bins), density), rc)


def encode_state(obs: Observation, j: int, rc: RlConfig | None = None) -> FeatureKey:
    rc = rc or RlConfig()
    return unflatten(int(encode_all(obs, rc)[j]), rc)


def reward_duty(delta, missed: bool, alpha: float, mu1: float) -> float:
    """``(1 - sum(delta)/N) - alpha * mu1 * [missed]``."""
    d = np.asarray(delta)
    r = (1.0 - d.sum() / d.size) - alpha * mu1 * float(bool(missed))
    assert -alpha * mu1 - 1e-12 <= r <= 1 + 1e-12
    return float(r)


def reward_wakeup(delta_star, info: float, mu2: float, psi: float = 1.0) -> float:
    """``mu2 * I - sum(delta_star)/N``."""
    if not -1e-12 <= info <= psi + 1e-12:
        raise ValueError(f"info {info} outside [0, {psi}]")
    d = np.asarray(delta_star)
    r = mu2 * info - d.sum() / d.size
    assert -1 - 1e-12 <= r <= mu2 * psi + 1e-12
    return float(r)


@dataclass
class QTable:
    values: np.ndarray  # (n_keys, 2)
    lr: float = 0.1
    zeta: float = 0.9

    @classmethod
    def zeros(cls, n_keys: int, lr: float = 0.1, zeta: float = 0.9) -> "QTable":
        return cls(np.zeros((n_keys, 2)), lr, zeta)


def q_update(table: QTable, key: int, action: int, reward: float, next_key: int | None) -> QTable:
    """One temporal-difference step; ``next_key=None`` marks a terminal transition."""
    if not math.isfinite(reward):
        raise RlTrainingError(f"non-finite reward {reward}")
    target = reward if next_key is None else reward + table.zeta * table.values[next_key].max()
    table.values[key, action] += table.lr * (target - table.values[key, action])
    return table


def batched_q_update(table: QTable, keys, actions, rewards, next_keys=None) -> None:
    """Synchronous TD step for many transitions; duplicates of a (key, action)
    pair average their TD errors."""
    keys = np.asarray(keys)
    actions = np.asarray(actions)
    rewards = np.asarray(rewards, dtype=float)
    if keys.size == 0:
        return
    target = rewards.copy()
    if next_keys is not None:
        target += table.zeta * table.values[np.asarray(next_keys)].max(axis=1)
    flat = keys * 2 + actions
    td = target - table.values.ravel()[flat]
    sums = np.bincount(flat, weights=td, minlength=table.values.size)
    counts = np.bincount(flat, minlength=table.values.size)
    hit = counts > 0
    v = table.values.ravel()
    v[hit] += table.lr * sums[hit] / counts[hit]
    if not np.all(np.isfinite(v[hit])):
        raise RlTrainingError("Q-values diverged (non-finite entries)")


def act(table: QTable, key, exploration: float, rng: np.random.Generator):
    """Epsilon-greedy action(s); exact ties go to 0 (sleep)."""
    if not 0 <= exploration <= 1:
        raise ValueError("exploration must lie in [0, 1]")
    q = table.values[np.asarray(key)]
    greedy = (q[..., 1] > q[..., 0]).astype(np.int8)
    if exploration == 0:
        return int(greedy) if greedy.ndim == 0 else greedy
    explore = rng.random(greedy.shape) < exploration
    rand = rng.integers(0, 2, size=greedy.shape).astype(np.int8)
    out = np.where(explore, rand, greedy).astype(np.int8)
    return int(out) if out.ndim == 0 else out


def duty_credit(delta, missed: bool, event: bool, p, capable, n: int, alpha: float, mu1: float) -> np.ndarray:
    """Per-device share of the duty reward, in units of one device.

    Awake devices earn 0 and sleeping devices earn 1 (their share of the
    energy term times N).  When an event was missed, each sleeping device that
    could have paid for a report is charged ``N * alpha * mu1 * p_j``, its
    expected contribution to avoiding the miss.
    """
    d = np.asarray(delta)
    r = 1.0 - d.astype(float)
    if event and missed:
        r -= (d == 0) * np.asarray(capable) * n * alpha * mu1 * np.asarray(p)
    return r


def wakeup_credit(p, capable, info: float, n: int, mu2: float, mode, psi: float) -> np.ndarray:
    """Marginal stage-2 reward of waking each candidate, in units of one device:
    ``N * mu2 * (gain in aggregated info) - 1``."""
    p = np.asarray(p, dtype=float)
    new = np.array([aggregate_values([info, psi * pj], mode, psi) for pj in p]) if len(p) else p
    gain = np.where(np.asarray(capable), new - info, 0.0)
    return n * mu2 * gain - 1.0


class RlPolicy(Policy):
    """Greedy (or epsilon-greedy while training) two-stage Q-table policy."""

    name = "rl"

    def __init__(self, duty: QTable, wake: QTable, rc: RlConfig | None = None, training: bool = False):
        self.duty_q = duty
        self.wake_q = wake
        self.rc = rc or RlConfig()
        self.training = training
        self.exploration = 0.0
        self.info_target = None
        self.rewards: list = []

    def reset(self, ctx):
        cfg = ctx.cfg
        n = cfg.n_devices
        self.cfg = cfg
        self.positions = ctx.deployment.positions
        self.density = density_bin(neighbour_counts(self.positions, cfg.d_max), self.rc.density_edges)
        self.last_sensing = np.zeros(n)
        self._pending = None
        self._wake_batch = None
        self._fresh = None
        return DutyCycle.always_on(n)

    def _keys(self, obs, sensing):
        return encode_all(obs, self.rc, sensing=sensing, density=self.density)

    def decide(self, obs, rng):
        keys = self._keys(obs, self.last_sensing)
        eps = self.exploration if self.training else 0.0
        delta = act(self.duty_q, keys, eps, rng)
        if self.training:
            if self._pending is not None:
                k0, a0, r0, _ = self._pending
                batched_q_update(self.duty_q, k0, a0, r0, keys)
            cap = obs.battery_ticks >= obs.energy.e_idle + obs.energy.e_tx
            self._pending = [keys, delta.copy(), None, cap]
        return delta

    def on_event_reports(self, obs, rng):
        est = estimated_sensing(obs)
        self._fresh = est
        asleep = np.flatnonzero(obs.state == DeviceState.SLEEP)
        if asleep.size == 0:
            return []
        keys = self._keys(obs, est)[asleep]
        q = self.wake_q.values[keys]
        adv = q[:, 1] - q[:, 0]
        eps = self.exploration if self.training else 0.0
        choose = act(self.wake_q, keys, eps, rng).astype(bool)
        if self.training:
            cap = obs.battery_ticks[asleep] >= obs.energy.e_idle + obs.energy.e_tx
            self._wake_batch = (asleep, keys, cap, obs.info)
        cand, adv = asleep[choose], adv[choose]
        order = np.lexsort((cand, -adv))
        return [int(j) for j in cand[order]]

    def feedback(self, outcome):
        # stage-1 sensing feature: estimates from this TTI's reports, else zero
        fresh, self._fresh = self._fresh, None
        self.last_sensing = fresh if fresh is not None else np.zeros(len(self.last_sensing))
        if not self.training:
            return
        cfg = self.cfg
        n = cfg.n_devices
        alpha = 1.0 if self.rc.realized_alpha else cfg.event_prob
        event = outcome.event is not None
        p = np.zeros(n)
        if event:
            ex, ey = outcome.event.epicenter
            p = sensing_probability(np.hypot(self.positions[:, 0] - ex, self.positions[:, 1] - ey), cfg.decay)
        keys, delta, _, cap = self._pending
        r = duty_credit(delta, outcome.misdetected, event, p, cap, n, alpha, self.rc.mu1)
        self._pending[2] = r
        self.rewards.append(reward_duty(delta, event and outcome.misdetected, alpha, self.rc.mu1))
        if self._wake_batch is not None:
            asleep, wkeys, wcap, info0 = self._wake_batch
            gain = wakeup_credit(p[asleep], wcap, info0, n, self.rc.mu2, cfg.aggregation, cfg.psi)
            # both actions are scored for every candidate (the stage is one-step)
            batched_q_update(self.wake_q, wkeys, np.ones(len(wkeys), dtype=int), gain)
            batched_q_update(self.wake_q, wkeys, np.zeros(len(wkeys), dtype=int), np.zeros(len(wkeys)))
            self._wake_batch = None

    def flush(self):
        """Apply the last pending stage-1 transition as terminal."""
        if self.training and self._pending is not None and self._pending[2] is not None:
            k0, a0, r0, _ = self._pending
            batched_q_update(self.duty_q, k0, a0, r0)
        self._pending = None

    def frozen(self) -> "RlPolicy":
        return RlPolicy(QTable(self.duty_q.values.copy(), self.duty_q.lr, self.duty_q.zeta),
                        QTable(self.wake_q.values.copy(), self.wake_q.lr, self.wake_q.zeta), self.rc)

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(self.duty_q.values.tobytes())
        h.update(self.wake_q.values.tobytes())
        return h.hexdigest()[:16]


def exploration_at(episode: int, episodes: int, rc: RlConfig) -> float:
    span = max(1, int(round(episodes * rc.eps_decay_frac)))
    if episode >= span:
        return rc.eps_end
    return rc.eps_start + (rc.eps_end - rc.eps_start) * episode / span


@dataclass
class TrainingResult:
    policy: RlPolicy
    curve: list = field(default_factory=list)  # mean stage-1 reward per episode


def train_rl(cfg: SimConfig, rc: RlConfig | None = None, episodes: int | None = None,
             seed: int | None = None, deployment=None) -> TrainingResult:
    """Train both Q-tables on simulated episodes (one fresh deployment each).

    Episode ``e`` uses seed ``mix64(seed, 0x5EED, e)``, a stream disjoint from
    the evaluation seeds of :func:`ehiot.sim.monte_carlo`.  A fixed
    ``deployment`` replaces the per-episode random placement.
    """
    from .sim import World, mix64, step

    rc = rc or RlConfig()
    episodes = rc.episodes if episodes is None else episodes
    seed = cfg.seed if seed is None else seed
    q1 = QTable.zeros(rc.n_keys, rc.lr, rc.zeta)
    q2 = QTable.zeros(rc.n_keys, rc.lr, rc.zeta)
    learner = RlPolicy(q1, q2, rc, training=True)
    curve = []
    ecfg = cfg.replace(horizon=rc.horizon)
    for e in range(episodes):
        learner.exploration = exploration_at(e, episodes, rc)
        learner.rewards = []
        world = World(ecfg, mix64(seed, 0x5EED, e), deployment=deployment)
        world.attach(learner)
        for _ in range(ecfg.horizon):
            step(world, learner)
        learner.flush()
        curve.append(float(np.mean(learner.rewards)) if learner.rewards else math.nan)
        for q in (q1, q2):
            if not np.all(np.isfinite(q.values)):
                bad = np.argwhere(~np.isfinite(q.values))[:5].tolist()
                raise RlTrainingError(f"non-finite Q-values after episode {e}: {bad}")
    return TrainingResult(learner.frozen(), curve)


def save_tables(policy: RlPolicy, path) -> str:
    """Write both tables as CSV rows ``stage,battery,delta,sensing,density,action,value``.

    The first line is a ``#`` comment holding the format version and the
    training configuration.  Returns the table digest.
    """
    rc = policy.rc
    meta = {"format": FORMAT_VERSION, "rl": asdict(rc), "digest": policy.digest()}
    buf = io.StringIO()
    buf.write("# ehiot-qtable " + json.dumps(meta, sort_keys=True) + "\n")
    buf.write("stage,battery,delta,sensing,density,action,value\n")
    for stage, q in ((1, policy.duty_q), (2, policy.wake_q)):
        for idx in range(rc.n_keys):
            key = unflatten(idx, rc)
            for a in (0, 1):
                buf.write(f"{stage},{key.battery},{key.delta},{key.sensing},{key.density},{a},{float(q.values[idx, a])!r}\n")
    with open(path, "w") as fh:
        fh.write(buf.getvalue())
    return meta["digest"]


def load_tables(path) -> RlPolicy:
    with open(path) as fh:
        first = fh.readline()
        if not first.startswith("# ehiot-qtable "):
            raise ValueError(f"{path}: not a Q-table file")
        meta = json.loads(first[len("# ehiot-qtable "):])
        if meta.get("format") != FORMAT_VERSION:
            raise ValueError(f"{path}: unsupported format {meta.get('format')}")
        rcd = meta["rl"]
        rcd["density_edges"] = tuple(rcd["density_edges"])
        rc = RlConfig(**rcd)
        header = fh.readline().strip()
        if header != "stage,battery,delta,sensing,density,action,value":
            raise ValueError(f"{path}: bad header")
        tables = {1: np.zeros((rc.n_keys, 2)), 2: np.zeros((rc.n_keys, 2))}
        for line in fh:
            st, b, d, s, n, a, v = line.rstrip("\n").split(",")
            idx = int(flat_index((int(b), int(d), int(s), int(n)), rc))
            tables[int(st)][idx, int(a)] = float(v)
    pol = RlPolicy(QTable(tables[1], rc.lr, rc.zeta), QTable(tables[2], rc.lr, rc.zeta), rc)
    if pol.digest() != meta["digest"]:
        raise ValueError(f"{path}: digest mismatch")
    return pol


@dataclass
class FrozenRlFactory:
    """Picklable factory handing each replication its own copy of a trained policy."""

    duty: np.ndarray
    wake: np.ndarray
    rc: RlConfig

    @classmethod
    def from_policy(cls, policy: RlPolicy) -> "FrozenRlFactory":
        return cls(policy.duty_q.values.copy(), policy.wake_q.values.copy(), policy.rc)

    def __call__(self, cfg: SimConfig) -> RlPolicy:
        return RlPolicy(QTable(self.duty.copy(), self.rc.lr, self.rc.zeta),
                        QTable(self.wake.copy(), self.rc.lr, self.rc.zeta), self.rc)


MU1_GRID = (0.5, 1, 2, 5, 10, 20)
MU2_GRID = (1, 2, 3, 4, 5)


def _grid_cell(args):
    from .sim import monte_carlo

    cfg, rc, val_reps, val_horizon = args
    res = train_rl(cfg, rc)
    vcfg = cfg.replace(replications=val_reps, horizon=val_horizon)
    s = monte_carlo(vcfg, FrozenRlFactory.from_policy(res.policy), point=0x7A11)
    return rc.mu1, rc.mu2, s.mean("info_per_event"), s.mean("energy_per_device_tti")


def grid_search_mu(cfg: SimConfig, rc: RlConfig | None = None, mu1s=MU1_GRID, mu2s=MU2_GRID,
                   val_reps: int = 5, val_horizon: int = 2000, workers: int = 1):
    """Train one policy per ``(mu1, mu2)`` cell and score it on validation seeds.

    Returns ``(best_rc, rows)`` where rows are ``(mu1, mu2, info, energy)`` and
    the best cell maximises validation info per event (ties: lower energy).
    """
    from concurrent.futures import ProcessPoolExecutor

    rc = rc or RlConfig()
    jobs = [(cfg, RlConfig(**{**asdict(rc), "mu1": float(m1), "mu2": float(m2)}), val_reps, val_horizon)
            for m1 in mu1s for m2 in mu2s]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(_grid_cell, jobs))
    else:
        rows = [_grid_cell(j) for j in jobs]
    best = min(rows, key=lambda r: (-r[2], r[3]))
    return RlConfig(**{**asdict(rc), "mu1": best[0], "mu2": best[1]}), rows
