"""Energy harvesting, battery bookkeeping and the battery-level Markov chain."""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Mapping

import numpy as np
from scipy.sparse.csgraph import connected_components
from scipy.special import betainc, comb

from .model import SimConfig


def arrival_probability(eh_rate: float, tti: float = 1.0) -> float:
    """Probability that the modulated-Poisson energy source is active in one TTI."""
    if eh_rate < 0 or tti <= 0:
        raise ValueError("eh_rate must be >= 0 and tti > 0")
    x = eh_rate * tti
    return x * math.exp(-x)


@dataclass(frozen=True)
class HarvestModel:
    eh_rate: float
    tti: float = 1.0
    quantum: float = 1.0

    @property
    def arrival_prob(self) -> float:
        return arrival_probability(self.eh_rate, self.tti)

    @property
    def mean_harvest(self) -> float:
        return self.quantum * self.arrival_prob

    @classmethod
    def from_config(cls, cfg: SimConfig) -> "HarvestModel":
        return cls(cfg.eh_rate, cfg.tti, cfg.e_b)


def sample_harvest(model: HarvestModel, rng: np.random.Generator, size=None, arrival_prob=None):
    """Energy harvested in one TTI: ``quantum`` with the arrival probability, else 0.

    ``arrival_prob`` overrides the model's value (used for synthetic tests).
    """
    p = model.arrival_prob if arrival_prob is None else arrival_prob
    hits = rng.random(size) < p
    return np.where(hits, model.quantum, 0.0) if size is not None else (model.quantum if hits else 0.0)


def try_consume(battery, cost):
    """Spend ``cost`` if the battery holds it; otherwise the battery drains to zero.

    Returns ``(new_battery, success)``.  Works elementwise on arrays.
    """
    if np.ndim(battery) == 0 and np.ndim(cost) == 0:
        if battery >= cost:
            return battery - cost, True
        return battery * 0, False
    battery = np.asarray(battery)
    ok = battery >= cost
    return np.where(ok, battery - cost, 0), ok


def credit_harvest(battery, gain, e_max):
    return np.minimum(battery + gain, e_max) if np.ndim(battery) else min(battery + gain, e_max)


@dataclass
class BatteryChain:
    """Discrete battery-level chain over levels ``0, step, 2*step, ..., e_max``.

    ``transition[k, l]`` is the probability of moving from level ``k`` at the
    start of a TTI to level ``l`` at the start of the next one.
    """

    levels: np.ndarray
    step: Fraction
    transition: np.ndarray
    stationary: np.ndarray | None = None
    unique: bool | None = None
    recurrent: np.ndarray | None = field(default=None, repr=False)

    @property
    def n_states(self) -> int:
        return len(self.levels)


def _chain_step(values) -> Fraction:
    g = Fraction(0)
    for v in values:
        f = Fraction(v).limit_denominator(10_000)
        if f:
            g = Fraction(math.gcd(g.numerator * f.denominator, f.numerator * g.denominator),
                         g.denominator * f.denominator) if g else f
    return g or Fraction(1)


def build_battery_chain(cfg: SimConfig, spend: Mapping[float, float], arrival_prob: float | None = None,
                        step: float | None = None) -> BatteryChain:
    """Battery chain for one device: harvest first, then one spend draw per TTI.

    Parameters
    ----------
    cfg : SimConfig
        Supplies ``e_max``, ``e_b`` and (unless overridden) the arrival probability.
    spend : mapping
        ``{cost_in_units: probability}`` for the per-TTI spend.  The leftover
        probability mass is a TTI without spending.  A spend larger than the
        battery drains it to zero.
    arrival_prob : float, optional
        Overrides ``arrival_probability(cfg.eh_rate, cfg.tti)``.
    step : float, optional
        Level spacing; defaults to the largest grid on which every energy
        quantity is an integer multiple.
    """
    total = math.fsum(spend.values())
    if any(p < 0 for p in spend.values()) or total > 1 + 1e-12:
        raise ValueError(f"spend probabilities must be non-negative and sum to <= 1, got {total}")
    if any(c < 0 for c in spend):
        raise ValueError("spend costs must be non-negative")
    p = arrival_probability(cfg.eh_rate, cfg.tti) if arrival_prob is None else float(arrival_prob)
    if not 0 <= p <= 1:
        raise ValueError("arrival probability must lie in [0, 1]")

    q = Fraction(step).limit_denominator(10_000) if step else _chain_step([cfg.e_max, cfg.e_b, *spend])
    top = Fraction(cfg.e_max).limit_denominator(10_000) / q
    gain = Fraction(cfg.e_b).limit_denominator(10_000) / q
    if top.denominator != 1 or gain.denominator != 1:
        raise ValueError("e_max and e_b must be multiples of the level step")
    n = int(top) + 1
    idx = np.arange(n)

    after_harvest = np.zeros((n, n))
    after_harvest[idx, np.minimum(idx + int(gain), n - 1)] += p
    after_harvest[idx, idx] += 1 - p

    spend_m = np.zeros((n, n))
    outcomes = {0: max(0.0, 1.0 - total)}
    for cost, prob in spend.items():
        c = Fraction(cost).limit_denominator(10_000) / q
        if c.denominator != 1:
            raise ValueError(f"spend {cost} is not a multiple of the level step {q}")
        outcomes[int(c)] = outcomes.get(int(c), 0.0) + prob
    for c, prob in outcomes.items():
        dest = np.where(idx >= c, idx - c, 0)
        np.add.at(spend_m, (idx, dest), prob)

    R = after_harvest @ spend_m
    R /= R.sum(axis=1, keepdims=True)
    levels = np.array([float(q * i) for i in range(n)])
    return BatteryChain(levels=levels, step=q, transition=R)


def _solve_irreducible(R: np.ndarray) -> np.ndarray:
    n = R.shape[0]
    if n == 1:
        return np.ones(1)
    # stationary equations with the last one swapped for the normalisation row
    A = R.T - np.eye(n)
    A[-1, :] = 1.0
    rhs = np.zeros(n)
    rhs[-1] = 1.0
    b = np.linalg.solve(A, rhs)
    b -= np.linalg.solve(A, A @ b - rhs)  # one step of iterative refinement
    b = np.clip(b, 0.0, None)
    return b / b.sum()


def stationary_distribution(chain: BatteryChain) -> np.ndarray:
    """Solve ``b R = b`` with ``sum(b) = 1`` and cache the result on ``chain``.

    When the chain has several closed classes the stationary vector is not
    unique; the result then weights each closed class by its size (so an
    identity matrix yields the uniform vector), ``chain.unique`` is set to
    ``False`` and a warning is emitted.  Transient levels get zero mass.
    ``chain.recurrent`` holds the indices of the recurrent levels used.
    """
    R = chain.transition
    n = R.shape[0]
    _, labels = connected_components(R > 0, directed=True, connection="strong")
    closed = []
    for lab in np.unique(labels):
        members = np.flatnonzero(labels == lab)
        outside = np.setdiff1d(np.arange(n), members)
        if outside.size == 0 or not np.any(R[np.ix_(members, outside)] > 0):
            closed.append(members)
    b = np.zeros(n)
    for members in closed:
        sub = R[np.ix_(members, members)]
        b[members] = _solve_irreducible(sub / sub.sum(axis=1, keepdims=True)) * len(members)
    b /= b.sum()
    chain.unique = len(closed) == 1
    chain.recurrent = np.concatenate(closed)
    if not chain.unique:
        warnings.warn(f"battery chain has {len(closed)} closed classes; stationary vector is not unique",
                      RuntimeWarning, stacklevel=2)
    chain.stationary = b
    return b


def stationary_residual(chain: BatteryChain) -> float:
    b = chain.stationary
    return float(np.max(np.abs(b @ chain.transition - b)))


def availability_probability(chain: BatteryChain, threshold: float) -> float:
    """Stationary probability that the battery holds at least ``threshold`` units."""
    if chain.stationary is None:
        stationary_distribution(chain)
    if threshold > chain.levels[-1]:
        warnings.warn("threshold exceeds battery capacity", RuntimeWarning, stacklevel=2)
        return 0.0
    return float(chain.stationary[chain.levels >= threshold - 1e-12].sum())


def mean_energy_consumption(trace=None, *, delta=None, pr_transmit=None, cfg: SimConfig | None = None) -> float:
    """Mean energy units consumed per device per TTI.

    Either pass ``trace`` (per-device, per-TTI spends in units, any shape) for
    the empirical mean, or ``delta`` (K x N duty decisions), ``pr_transmit``
    (probability of being in the transmit state, scalar or per device) and
    ``cfg`` for the analytic form in which the triggered state costs nothing.
    """
    if trace is not None:
        arr = np.asarray(trace, dtype=float)
        if arr.size == 0:
            raise ValueError("empty consumption trace")
        return float(arr.mean())
    if delta is None or cfg is None:
        raise ValueError("need either a trace or delta + cfg")
    d = np.asarray(delta, dtype=float)
    if d.size == 0:
        raise ValueError("empty decision trace")
    ptx = 0.0 if pr_transmit is None else np.asarray(pr_transmit, dtype=float)
    per = d * (cfg.e_idle + ptx * cfg.e_tx) + (1 - d) * cfg.e_wur
    return float(per.mean())


def binomial_availability_form(p_active: float, e_tx: int, top: int) -> float:
    """Literal transcription of the closed-form availability sum (documentation only).

    ``sum_{B=e_tx}^{top} C(B, e_tx) p^e_tx / (1-p)^(e_tx-B)``.  For most
    parameters this is not a probability; availability is computed from the
    stationary vector instead.
    """
    B = np.arange(e_tx, top + 1)
    return float(np.sum(comb(B, e_tx) * p_active**e_tx / (1 - p_active) ** (e_tx - B)))


def beta_availability_form(p_active: float, e_tx: int, e_max: int) -> float:
    """Regularised incomplete beta value quoted alongside the closed form (documentation only)."""
    return float(betainc(e_tx + 1, e_max + 1, 1 - p_active))
