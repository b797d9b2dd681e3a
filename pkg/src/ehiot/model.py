"""Domain types and the sensing/information primitives shared by every module.

Energies are specified in (possibly fractional) battery units, e.g. the wake-up
receiver draws 1/14 unit per TTI.  Internally the simulator keeps batteries as
integer *ticks*, where one unit equals :func:`energy_scale` ticks, so all
battery arithmetic stays exact.
"""
from __future__ import annotations

import dataclasses
import enum
import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Iterable, Sequence

import numpy as np


class DeviceState(enum.IntEnum):
    IDLE = 1  # S1, sensing
    ACTIVE = 2  # S2, triggered
    TRANSMIT = 3  # S3
    SLEEP = 4  # S4, only the wake-up receiver is on


class Aggregation(str, enum.Enum):
    MAX = "MAX"
    SUM_SAT = "SUM_SAT"


class Layout(str, enum.Enum):
    UNIFORM_RANDOM = "UNIFORM_RANDOM"
    GRID = "GRID"


# Arcs of the four-state device chain, as (from, to) pairs.
ALLOWED_TRANSITIONS = frozenset(
    {
        (DeviceState.IDLE, DeviceState.IDLE),
        (DeviceState.IDLE, DeviceState.ACTIVE),
        (DeviceState.IDLE, DeviceState.SLEEP),
        (DeviceState.ACTIVE, DeviceState.TRANSMIT),
        (DeviceState.ACTIVE, DeviceState.SLEEP),
        (DeviceState.TRANSMIT, DeviceState.IDLE),
        (DeviceState.TRANSMIT, DeviceState.SLEEP),
        (DeviceState.SLEEP, DeviceState.IDLE),
        (DeviceState.SLEEP, DeviceState.ACTIVE),
        (DeviceState.SLEEP, DeviceState.SLEEP),
    }
)


class ConfigError(ValueError):
    """Raised when a configuration violates its invariants.

    ``problems`` lists every violation found, not just the first.
    """

    def __init__(self, problems: Sequence[str]):
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))


@dataclass(frozen=True)
class SimConfig:
    """All scalar parameters of one simulated deployment.

    Defaults follow the simulation table of the model (20 m x 20 m area,
    ``eta = 1``, ``psi = 1``, battery of 100 units, sensing costs 1 unit per
    TTI, transmission 10 units, wake-up receiver 1/14 unit per TTI,
    ``d_max = 4`` m).  ``event_prob``, ``eh_rate`` and ``e_b`` are not pinned by
    that table; see the README for how the defaults were chosen.
    """

    area_side: float = 20.0
    n_devices: int = 100
    event_prob: float = 0.1
    tti: float = 1.0
    decay: float = 1.0
    psi: float = 1.0
    e_max: float = 100.0
    e_idle: float = 1.0
    e_tx: float = 10.0
    e_wur: float = 1.0 / 14.0
    e_b: float = 1.0
    eh_rate: float = 0.23
    d_max: float = 4.0
    horizon: int = 10_000
    replications: int = 100
    seed: int = 0
    aggregation: Aggregation = Aggregation.MAX
    layout: Layout = Layout.UNIFORM_RANDOM

    def __post_init__(self):
        object.__setattr__(self, "aggregation", Aggregation(self.aggregation))
        object.__setattr__(self, "layout", Layout(self.layout))
        problems = self.problems()
        if problems:
            raise ConfigError(problems)

    def problems(self) -> list[str]:
        p = []
        if not 0.0 <= self.event_prob <= 1.0:
            p.append(f"event_prob must lie in [0, 1], got {self.event_prob}")
        if not self.decay > 0:
            p.append(f"decay must be > 0, got {self.decay}")
        if not self.psi > 0:
            p.append(f"psi must be > 0, got {self.psi}")
        if not self.tti > 0:
            p.append(f"tti must be > 0, got {self.tti}")
        if not self.area_side > 0:
            p.append(f"area_side must be > 0, got {self.area_side}")
        if not (0 < self.e_idle < self.e_tx and 0 < self.e_wur < self.e_tx):
            p.append("need 0 < e_idle, e_wur < e_tx")
        if not self.e_tx <= self.e_max:
            p.append(f"e_tx ({self.e_tx}) must not exceed e_max ({self.e_max})")
        if not self.e_b >= 0:
            p.append(f"e_b must be >= 0, got {self.e_b}")
        if not self.eh_rate >= 0:
            p.append(f"eh_rate must be >= 0, got {self.eh_rate}")
        if not self.d_max > 0:
            p.append(f"d_max must be > 0, got {self.d_max}")
        for name in ("n_devices", "replications"):
            v = getattr(self, name)
            if not (isinstance(v, (int, np.integer)) and v >= 1):
                p.append(f"{name} must be an integer >= 1, got {v!r}")
        if not (isinstance(self.horizon, (int, np.integer)) and self.horizon >= 0):
            p.append(f"horizon must be an integer >= 0, got {self.horizon!r}")
        if not (isinstance(self.seed, (int, np.integer)) and 0 <= self.seed < 2**64):
            p.append(f"seed must be an unsigned 64-bit integer, got {self.seed!r}")
        return p

    @property
    def area(self) -> float:
        return self.area_side**2

    def replace(self, **changes) -> "SimConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["aggregation"] = self.aggregation.value
        d["layout"] = self.layout.value
        return d


@dataclass
class Device:
    id: int
    pos: tuple[float, float]
    battery: float
    state: DeviceState = DeviceState.SLEEP
    t_on: int = 1
    t_drx: int = 1
    phase: int = 0
    cluster: int | None = None

    def __post_init__(self):
        if not 1 <= self.t_on <= self.t_drx:
            raise ValueError(f"need 1 <= t_on <= t_drx, got t_on={self.t_on}, t_drx={self.t_drx}")
        if not 0 <= self.phase < self.t_drx:
            raise ValueError(f"phase must lie in [0, t_drx), got {self.phase}")


@dataclass(frozen=True)
class Event:
    index: int
    epicenter: tuple[float, float]
    tti: int


@dataclass(frozen=True)
class Report:
    device: int
    info: float
    success: bool = True


def sensing_probability(d, decay: float = 1.0):
    """Exponentially decaying sensing function ``exp(-decay * d)``.

    Accepts scalars or arrays; negative distances are rejected.
    """
    if decay <= 0:
        raise ValueError("decay must be positive")
    d_arr = np.asarray(d, dtype=float)
    if np.any(d_arr < 0):
        raise ValueError("distance must be non-negative")
    out = np.exp(-decay * d_arr)
    return float(out) if out.ndim == 0 else out


def device_information(d, cfg: SimConfig):
    """Information an active device captures at distance ``d`` from the epicenter."""
    return cfg.psi * sensing_probability(d, cfg.decay)


def aggregate_information(reports: Iterable[Report] | Iterable[float], cfg: SimConfig) -> float:
    """Information the base station extracts from one event's reports.

    ``reports`` may be :class:`Report` objects (failed ones are ignored) or
    bare info values.
    """
    infos = [
        r.info if isinstance(r, Report) else float(r)
        for r in reports
        if not isinstance(r, Report) or r.success
    ]
    return aggregate_values(infos, cfg.aggregation, cfg.psi)


def aggregate_values(infos, mode: Aggregation, psi: float) -> float:
    if len(infos) == 0:
        return 0.0
    if Aggregation(mode) is Aggregation.MAX:
        return float(max(infos))
    return float(min(math.fsum(infos), psi))


def duty_cycle_is_on(device: Device, k: int) -> bool:
    return (k + device.phase) % device.t_drx < device.t_on


def duty_on_mask(k: int, t_on: np.ndarray, t_drx: np.ndarray, phase: np.ndarray) -> np.ndarray:
    """Vectorised :func:`duty_cycle_is_on` over all devices."""
    return (k + phase) % t_drx < t_on


def energy_scale(cfg: SimConfig) -> int:
    """Ticks per battery unit so that every energy parameter is an integer tick count."""
    scale = 1
    for v in (cfg.e_max, cfg.e_idle, cfg.e_tx, cfg.e_wur, cfg.e_b):
        den = Fraction(v).limit_denominator(10_000).denominator
        scale = scale * den // math.gcd(scale, den)
    return scale


def to_ticks(value: float, scale: int) -> int:
    t = Fraction(value).limit_denominator(10_000) * scale
    if t.denominator != 1:
        raise ValueError(f"{value} is not representable with {scale} ticks per unit")
    return int(t)


@dataclass(frozen=True)
class EnergyTicks:
    """Integer tick version of the configuration's energy parameters."""

    scale: int
    e_max: int
    e_idle: int
    e_tx: int
    e_wur: int
    e_b: int

    @classmethod
    def from_config(cls, cfg: SimConfig) -> "EnergyTicks":
        s = energy_scale(cfg)
        return cls(
            scale=s,
            e_max=to_ticks(cfg.e_max, s),
            e_idle=to_ticks(cfg.e_idle, s),
            e_tx=to_ticks(cfg.e_tx, s),
            e_wur=to_ticks(cfg.e_wur, s),
            e_b=to_ticks(cfg.e_b, s),
        )


__all__ = [
    "ALLOWED_TRANSITIONS",
    "Aggregation",
    "ConfigError",
    "Device",
    "DeviceState",
    "EnergyTicks",
    "Event",
    "Layout",
    "Report",
    "SimConfig",
    "aggregate_information",
    "aggregate_values",
    "device_information",
    "duty_cycle_is_on",
    "duty_on_mask",
    "energy_scale",
    "sensing_probability",
    "to_ticks",
]
