"""Command-line experiment runner.

Subcommands: ``simulate``, ``sweep``, ``analyze-battery``, ``voronoi-info``,
``train-rl`` and ``train-dt``.  Settings are layered as built-in defaults <
config file (JSON) < ``EHIOT_*`` environment variables < command-line flags.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import io
import itertools
import json
import math
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.optimize import brentq

from . import dt as dtmod
from . import rl as rlmod
from .energy import arrival_probability, availability_probability, build_battery_chain, stationary_distribution
from .geometry import coverage_radius, deploy, expected_min_information, grid_min_information
from .model import ConfigError, EnergyTicks, Layout, SimConfig
from .policy import AdjustedFactory, SimpleFactory, adjusted_duty_cycling_search
from .sim import METRIC_FIELDS, World, mix64, monte_carlo, step

ENV_PREFIX = "EHIOT_"
POLICIES = ("random", "genie", "knn", "adjusted", "rl", "dt", "sleep", "awake")
ALIASES = {"lambda": "eh_rate", "E_B": "e_b", "N": "n_devices", "alpha": "event_prob", "eta": "decay"}
SIM_KEYS = {f.name for f in dataclasses.fields(SimConfig)}
SPEC_KEYS = {"policies", "sweep", "out", "format", "workers", "rl_model", "dt_model", "dt_dataset",
             "adjusted", "rl", "dt", "battery"}
SWEEP_KEYS = {"n_devices", "eh_rate", "e_b", "policies"}


@dataclass
class RunSpec:
    base: SimConfig = field(default_factory=SimConfig)
    n_devices: list = field(default_factory=list)
    eh_rate: list = field(default_factory=list)
    e_b: list = field(default_factory=list)
    policies: list = field(default_factory=lambda: ["random"])
    out: str = "."
    format: str = "csv"
    workers: int = 1
    rl_model: str | None = None
    dt_model: str | None = None
    dt_dataset: str | None = None
    adjusted: dict = field(default_factory=dict)
    rl: dict = field(default_factory=dict)
    dt: dict = field(default_factory=dict)
    battery: dict = field(default_factory=dict)

    def points(self):
        ns = self.n_devices or [self.base.n_devices]
        lams = self.eh_rate or [self.base.eh_rate]
        ebs = self.e_b or [self.base.e_b]
        return list(itertools.product(ns, lams, ebs))

    def to_dict(self) -> dict:
        d = {k: v for k, v in self.base.to_dict().items()}
        d.update(policies=list(self.policies), out=self.out, format=self.format, workers=self.workers,
                 sweep={a: list(getattr(self, a)) for a in ("n_devices", "eh_rate", "e_b") if getattr(self, a)},
                 adjusted=dict(self.adjusted), rl=dict(self.rl), dt=dict(self.dt), battery=dict(self.battery))
        for k in ("rl_model", "dt_model", "dt_dataset"):
            if getattr(self, k) is not None:
                d[k] = getattr(self, k)
        return d


def _coerce(name: str, value):
    """Convert an environment/flag string to the type of the SimConfig field."""
    ftype = {f.name: f.type for f in dataclasses.fields(SimConfig)}[name]
    if not isinstance(value, str):
        return value
    if ftype in ("int", int):
        return int(value)
    if ftype in ("float", float):
        from fractions import Fraction

        return float(Fraction(value))
    return value


def build_spec(raw: dict, env: dict | None = None) -> RunSpec:
    """Validate a raw mapping (config file contents) into a :class:`RunSpec`.

    Every problem is collected before raising :class:`ConfigError`.
    """
    problems = []
    raw = dict(raw)
    for alias, real in ALIASES.items():
        if alias in raw:
            if real in raw:
                problems.append(f"both '{alias}' and '{real}' given")
            raw[real] = raw.pop(alias)
    unknown = sorted(set(raw) - SIM_KEYS - SPEC_KEYS)
    problems += [f"unknown key '{k}'" for k in unknown]

    sim = {k: raw[k] for k in SIM_KEYS if k in raw}
    for k, v in (env or {}).items():
        if k.startswith(ENV_PREFIX):
            name = k[len(ENV_PREFIX):].lower()
            if name in SIM_KEYS:
                try:
                    sim[name] = _coerce(name, v)
                except (ValueError, ZeroDivisionError):
                    problems.append(f"cannot parse {k}={v!r}")
    for k in ("e_wur",):
        if isinstance(sim.get(k), str):
            try:
                sim[k] = _coerce(k, sim[k])
            except (ValueError, ZeroDivisionError):
                problems.append(f"cannot parse {k}={sim[k]!r}")
    base = None
    try:
        base = SimConfig(**sim)
    except ConfigError as e:
        problems += e.problems
    except (TypeError, ValueError) as e:
        problems.append(str(e))

    spec = RunSpec(base=base or SimConfig())
    sweep = raw.get("sweep", {}) or {}
    if not isinstance(sweep, dict):
        problems.append("'sweep' must be a mapping")
        sweep = {}
    problems += [f"unknown sweep axis '{k}'" for k in sorted(set(sweep) - SWEEP_KEYS)]
    for axis in ("n_devices", "eh_rate", "e_b"):
        vals = sweep.get(axis, [])
        if not isinstance(vals, list):
            problems.append(f"sweep.{axis} must be a list")
            continue
        if axis in sweep and not vals:
            problems.append(f"sweep.{axis} must not be empty")
        if base is not None:
            for v in vals:
                try:
                    base.replace(**{axis: v})
                except ConfigError as e:
                    problems += [f"sweep.{axis}={v}: {p}" for p in e.problems]
        setattr(spec, axis, list(vals))
    pols = sweep.get("policies", raw.get("policies", ["random"]))
    if isinstance(pols, str):
        pols = [pols]
    if not pols:
        problems.append("policies must not be empty")
    problems += [f"unknown policy '{p}'" for p in pols if p not in POLICIES]
    spec.policies = list(pols)
    spec.out = str(raw.get("out", "."))
    spec.format = raw.get("format", "csv")
    if spec.format not in ("csv", "json"):
        problems.append(f"format must be csv or json, got {spec.format!r}")
    spec.workers = raw.get("workers", 1)
    if not (isinstance(spec.workers, int) and spec.workers >= 1):
        problems.append(f"workers must be an integer >= 1, got {spec.workers!r}")
    for k in ("rl_model", "dt_model", "dt_dataset"):
        setattr(spec, k, raw.get(k))
    for k in ("adjusted", "rl", "dt", "battery"):
        v = raw.get(k, {}) or {}
        if not isinstance(v, dict):
            problems.append(f"'{k}' must be a mapping")
            v = {}
        setattr(spec, k, dict(v))
    if problems:
        raise ConfigError(problems)
    return spec


def read_config(path) -> dict:
    """Raw mapping from a JSON config file; an empty file means all defaults."""
    text = Path(path).read_text()
    if not text.strip():
        return {}
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError([f"{path}: invalid JSON ({e})"]) from e
    if not isinstance(raw, dict):
        raise ConfigError([f"{path}: top level must be an object"])
    return raw


def parse_config(path=None, env: dict | None = None) -> RunSpec:
    return build_spec(read_config(path) if path is not None else {}, env)


# ---------------------------------------------------------------- output


def fmt(v):
    if isinstance(v, (float, np.floating)):
        return f"{float(v):.9g}"
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    return str(v)


def render(rows: list, columns: list, form: str) -> str:
    if form == "json":
        return json.dumps([{c: _jsonable(r.get(c)) for c in columns} for r in rows], indent=1) + "\n"
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([fmt(r.get(c, "")) for c in columns])
    return buf.getvalue()


def _jsonable(v):
    if isinstance(v, (float, np.floating)):
        v = float(f"{float(v):.9g}")
        return None if math.isnan(v) else v
    if isinstance(v, np.integer):
        return int(v)
    return v


def write_table(spec: RunSpec, name: str, rows: list, columns: list) -> Path:
    out = Path(spec.out)
    out.mkdir(parents=True, exist_ok=True)
    path = out / f"{name}.{spec.format}"
    with open(path, "w") as fh:  # single writer: rows are assembled first
        fh.write(render(rows, columns, spec.format))
    return path


METRIC_COLUMNS = [f"{m}_{s}" for m in METRIC_FIELDS for s in ("mean", "ci_low", "ci_high")]
SIM_COLUMNS = ["point", "n_devices", "eh_rate", "e_b", "policy", "replications", "ci_defined", *METRIC_COLUMNS]


# ---------------------------------------------------------------- policies


def policy_factory(name: str, cfg: SimConfig, spec: RunSpec):
    if name in ("random", "genie", "knn", "sleep", "awake"):
        return SimpleFactory(name)
    if name == "adjusted":
        if "t_on" in spec.adjusted and "t_drx" in spec.adjusted:
            return AdjustedFactory(int(spec.adjusted["t_on"]), int(spec.adjusted["t_drx"]))
        res = adjusted_duty_cycling_search(cfg, **{k: v for k, v in spec.adjusted.items()
                                                   if k in ("pairs", "replications", "horizon")})
        return AdjustedFactory(res.t_on, res.t_drx)
    if name == "rl":
        if not spec.rl_model:
            raise ConfigError(["policy 'rl' needs 'rl_model' (run train-rl first)"])
        return rlmod.FrozenRlFactory.from_policy(rlmod.load_tables(spec.rl_model))
    if name == "dt":
        if not spec.dt_model:
            raise ConfigError(["policy 'dt' needs 'dt_model' (run train-dt first)"])
        return dtmod.DtFactory(dtmod.load_model(spec.dt_model))
    raise ConfigError([f"unknown policy '{name}'"])


def summary_row(point: int, cfg: SimConfig, policy: str, s) -> dict:
    row = {"point": point, "n_devices": cfg.n_devices, "eh_rate": cfg.eh_rate, "e_b": cfg.e_b, "policy": policy,
           "replications": len(s.records), "ci_defined": s.ci_defined}
    for m in METRIC_FIELDS:
        lo, hi = s.ci(m)
        row[f"{m}_mean"], row[f"{m}_ci_low"], row[f"{m}_ci_high"] = s.mean(m), lo, hi
    return row


def run_points(spec: RunSpec, points) -> tuple[list, list]:
    rows, failures = [], []
    for i, (n, lam, eb) in enumerate(points):
        cfg = spec.base.replace(n_devices=n, eh_rate=lam, e_b=eb)
        for pol in spec.policies:
            try:
                s = monte_carlo(cfg, policy_factory(pol, cfg, spec), point=i, workers=spec.workers)
                rows.append(summary_row(i, cfg, pol, s))
            except Exception as e:  # reported per point, siblings continue
                failures.append(f"point {i} (N={n}, lambda={lam}, E_B={eb}, {pol}): {type(e).__name__}: {e}")
    return rows, failures


def cmd_simulate(spec: RunSpec) -> int:
    b = spec.base
    rows, failures = run_points(spec, [(b.n_devices, b.eh_rate, b.e_b)])
    return _finish(spec, "simulate", rows, SIM_COLUMNS, failures)


def cmd_sweep(spec: RunSpec) -> int:
    rows, failures = run_points(spec, spec.points())
    return _finish(spec, "sweep", rows, SIM_COLUMNS, failures)


def _finish(spec, name, rows, columns, failures) -> int:
    path = write_table(spec, name, rows, columns)
    print(path)
    if failures:
        for f in failures:
            print("FAILED", f, file=sys.stderr)
        return 1
    return 0


# ---------------------------------------------------------------- battery analysis


def mean_harvest(eh_rate: float, e_b: float, tti: float = 1.0) -> float:
    return e_b * arrival_probability(eh_rate, tti)


def break_even_rate(consumption: float, e_b: float, tti: float = 1.0) -> float | None:
    """Smallest harvest rate at which mean harvest equals ``consumption``.

    Mean harvest rises on ``(0, 1/tti]``; returns ``None`` when even its peak
    ``e_b / e`` is below the consumption.
    """
    peak = 1.0 / tti
    if consumption <= 0:
        return 0.0
    if mean_harvest(peak, e_b, tti) < consumption:
        return None
    return float(brentq(lambda lam: mean_harvest(lam, e_b, tti) - consumption, 0.0, peak, xtol=1e-12))


def spend_profile(cfg: SimConfig, factory, ttis: int = 2000, seed: int = 0) -> tuple[dict, float]:
    """Empirical per-device per-TTI spend distribution ``{units: prob}`` and its mean."""
    world = World(cfg.replace(horizon=ttis), seed)
    pol = factory(cfg)
    world.attach(pol)
    e = EnergyTicks.from_config(cfg)
    counts: dict = {}
    total = 0
    for _ in range(ttis):
        o = step(world, pol)
        ticks = np.rint(o.spend * e.scale).astype(np.int64)
        vals, cnt = np.unique(ticks, return_counts=True)
        for v, c in zip(vals, cnt):
            counts[int(v)] = counts.get(int(v), 0) + int(c)
        total += ticks.size
    pmf = {v / e.scale: c / total for v, c in sorted(counts.items()) if v > 0}
    mean = sum(v * p for v, p in pmf.items())
    return pmf, mean


BATTERY_COLUMNS = ["policy", "eh_rate", "e_b", "mean_harvest", "consumption", "net_energy", "availability",
                   "break_even_rate"]


def cmd_analyze_battery(spec: RunSpec) -> int:
    cfg = spec.base
    lams = spec.eh_rate or [round(x, 4) for x in np.linspace(0.02, 1.0, 50)]
    ebs = spec.e_b or [1.0, 5.0, 10.0]
    pols = spec.policies
    ttis = int(spec.battery.get("ttis", 2000))
    rows, failures = [], []
    for pol in pols:
        try:
            pmf, cons = spend_profile(cfg, policy_factory(pol, cfg, spec), ttis, mix64(cfg.seed, 0xBA77))
        except Exception as e:
            failures.append(f"{pol}: {type(e).__name__}: {e}")
            continue
        for eb in ebs:
            be = break_even_rate(cons, eb, cfg.tti)
            for lam in lams:
                c = cfg.replace(eh_rate=lam, e_b=eb)
                chain = build_battery_chain(c, pmf)
                stationary_distribution(chain)
                rows.append({"policy": pol, "eh_rate": lam, "e_b": eb, "mean_harvest": mean_harvest(lam, eb, cfg.tti),
                             "consumption": cons, "net_energy": mean_harvest(lam, eb, cfg.tti) - cons,
                             "availability": availability_probability(chain, cfg.e_tx),
                             "break_even_rate": be if be is not None else math.nan})
    return _finish(spec, "analyze_battery", rows, BATTERY_COLUMNS, failures)


# ---------------------------------------------------------------- geometry


VORONOI_COLUMNS = ["n_devices", "layout", "replication", "coverage_radius", "expected_min_information",
                   "grid_closed_form"]


def cmd_voronoi_info(spec: RunSpec) -> int:
    cfg = spec.base
    rows = []
    for i, n in enumerate(spec.n_devices or [cfg.n_devices]):
        c = cfg.replace(n_devices=n)
        reps = 1 if c.layout is Layout.GRID else c.replications
        for r in range(reps):
            dep = deploy(c, np.random.default_rng(mix64(c.seed, i, r)))
            rows.append({"n_devices": n, "layout": c.layout.value, "replication": r,
                         "coverage_radius": coverage_radius(dep),
                         "expected_min_information": expected_min_information(dep, c.decay, c.psi),
                         "grid_closed_form": grid_min_information(c.area, n, c.decay, c.psi)})
    return _finish(spec, "voronoi_info", rows, VORONOI_COLUMNS, [])


# ---------------------------------------------------------------- training


def cmd_train_rl(spec: RunSpec) -> int:
    opts = dict(spec.rl)
    grid = opts.pop("grid", False)
    if "density_edges" in opts:
        opts["density_edges"] = tuple(opts["density_edges"])
    rc = rlmod.RlConfig(**opts)
    if grid:
        rc, table = rlmod.grid_search_mu(spec.base, rc, workers=spec.workers)
        write_table(spec, "rl_grid", [dict(zip(("mu1", "mu2", "info_per_event", "energy_per_device_tti"), r))
                                      for r in table], ["mu1", "mu2", "info_per_event", "energy_per_device_tti"])
    res = rlmod.train_rl(spec.base, rc)
    out = Path(spec.out)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "rl_qtable.csv"
    digest = rlmod.save_tables(res.policy, path)
    write_table(spec, "rl_training", [{"episode": i, "mean_reward": r} for i, r in enumerate(res.curve)],
                ["episode", "mean_reward"])
    print(path)
    print("digest", digest)
    return 0


def cmd_train_dt(spec: RunSpec) -> int:
    opts = dict(spec.dt)
    episodes = int(opts.pop("episodes", 8))
    horizon = int(opts.pop("horizon", 500))
    dc = dtmod.DtConfig(**opts)
    out = Path(spec.out)
    out.mkdir(parents=True, exist_ok=True)
    if spec.dt_dataset:
        try:
            data = dtmod.load_dataset(spec.dt_dataset)
        except (OSError, ValueError, KeyError) as e:
            raise dtmod.DtError(f"cannot read dataset {spec.dt_dataset}: {e}") from e
    else:
        data = dtmod.collect_dataset(spec.base, episodes, horizon, mu1=dc.mu1)
        dtmod.save_dataset(data, out / "dt_dataset.npz")
    model = dtmod.train_dt_policy(spec.base, dc, episodes, horizon, dataset=data)
    path = out / "dt_model.bin"
    dtmod.save_model(model, path)
    write_table(spec, "dt_training", [{"epoch": i, "loss": v} for i, v in enumerate(model.loss_curve)],
                ["epoch", "loss"])
    print(path)
    return 0


COMMANDS = {
    "simulate": cmd_simulate,
    "sweep": cmd_sweep,
    "analyze-battery": cmd_analyze_battery,
    "voronoi-info": cmd_voronoi_info,
    "train-rl": cmd_train_rl,
    "train-dt": cmd_train_dt,
}


def make_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ehiot", description="Energy-harvesting IoT duty-cycling simulator")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", help="JSON configuration file")
        sp.add_argument("--out", help="output directory")
        sp.add_argument("--format", choices=("csv", "json"))
        sp.add_argument("--seed", type=int, help="master seed (unsigned 64-bit)")
        sp.add_argument("--workers", type=int, help="worker processes for replications")
    return p


def main(argv=None) -> int:
    args = make_parser().parse_args(argv)
    try:
        raw = read_config(args.config) if args.config else {}
    except (ConfigError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    overrides = {k: v for k, v in (("out", args.out), ("format", args.format), ("seed", args.seed),
                                   ("workers", args.workers)) if v is not None}
    env = {k: v for k, v in os.environ.items() if k.startswith(ENV_PREFIX)}
    try:
        spec = build_spec({**raw, **overrides}, env)
        if args.seed is not None:  # flags beat the environment too
            spec.base = spec.base.replace(seed=args.seed)
        return COMMANDS[args.command](spec)
    except (ConfigError, dtmod.DtError, rlmod.RlTrainingError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
