import csv
import json
import math

import numpy as np
import pytest

from ehiot import dt as dtmod
from ehiot.cli import break_even_rate, build_spec, main, mean_harvest, parse_config
from ehiot.model import ConfigError, SimConfig
from ehiot.rl import load_tables

SMALL = {"n_devices": 12, "horizon": 60, "replications": 2}


@pytest.fixture(autouse=True)
def clean_env(monkeypatch):
    import os
    for k in list(os.environ):
        if k.startswith("EHIOT_"):
            monkeypatch.delenv(k)


def run(tmp_path, cmd, cfg, *flags):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(cfg))
    return main([cmd, "--config", str(path), "--out", str(tmp_path / "out"), *flags])


def rows(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


def test_empty_config_gives_defaults(tmp_path):
    p = tmp_path / "empty.json"
    p.write_text("")
    spec = parse_config(p)
    assert spec.base == SimConfig() and spec.policies == ["random"]


def test_config_errors_are_collected():
    with pytest.raises(ConfigError) as exc:
        build_spec({"n_devices": -5, "bogus": 1, "policies": ["nope"], "format": "xml"})
    assert len(exc.value.problems) >= 4


def test_round_trip_is_identity():
    spec = build_spec({"lambda": 0.5, "E_B": 5, "sweep": {"n_devices": [10, 20]}, "policies": ["knn", "genie"]})
    again = build_spec(spec.to_dict())
    assert again.to_dict() == spec.to_dict()
    assert spec.base.eh_rate == 0.5 and spec.base.e_b == 5


def test_layering_env_and_flags(tmp_path, monkeypatch, capsys):
    monkeypatch.setenv("EHIOT_N_DEVICES", "7")
    monkeypatch.setenv("EHIOT_SEED", "3")
    assert run(tmp_path, "simulate", {**SMALL, "seed": 1}, "--seed", "9") == 0
    r = rows(tmp_path / "out" / "simulate.csv")
    assert r[0]["n_devices"] == "7"
    spec = build_spec({"seed": 1}, {"EHIOT_SEED": "3"})
    assert spec.base.seed == 3


def test_exit_code_on_bad_config(tmp_path, capsys):
    assert run(tmp_path, "simulate", {"n_devices": -5, "bogus": 1}) == 2
    err = capsys.readouterr().err
    assert "n_devices" in err and "bogus" in err
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert main(["simulate", "--config", str(bad)]) == 2


def test_sweep_produces_one_row_per_point_and_policy(tmp_path):
    cfg = {**SMALL, "sweep": {"n_devices": [10, 250]}, "policies": ["random", "genie"]}
    assert run(tmp_path, "sweep", cfg) == 0
    r = rows(tmp_path / "out" / "sweep.csv")
    assert [(x["n_devices"], x["policy"]) for x in r] == [("10", "random"), ("10", "genie"),
                                                           ("250", "random"), ("250", "genie")]


def test_sweep_is_byte_identical_across_runs_and_workers(tmp_path):
    cfg = {**SMALL, "sweep": {"n_devices": [8, 16]}, "policies": ["knn"]}
    outs = []
    for i, w in enumerate(("1", "1", "2")):
        d = tmp_path / f"r{i}"
        d.mkdir()
        assert run(d, "sweep", cfg, "--workers", w) == 0
        outs.append((d / "out" / "sweep.csv").read_bytes())
    assert outs[0] == outs[1] == outs[2]


def test_json_format(tmp_path):
    assert run(tmp_path, "simulate", SMALL, "--format", "json") == 0
    data = json.loads((tmp_path / "out" / "simulate.json").read_text())
    assert data[0]["policy"] == "random"


def test_failed_point_is_reported_and_siblings_finish(tmp_path, capsys):
    cfg = {**SMALL, "policies": ["random", "rl"]}
    assert run(tmp_path, "simulate", cfg) == 1
    assert len(rows(tmp_path / "out" / "simulate.csv")) == 1
    assert "rl_model" in capsys.readouterr().err


def test_battery_analysis_values(tmp_path):
    assert mean_harvest(1.0, 1.0) == pytest.approx(0.36787944117144233)
    assert mean_harvest(0.1, 10.0) == pytest.approx(0.9048374180359595)
    lam = break_even_rate(0.2, 1.0)
    assert mean_harvest(lam, 1.0) == pytest.approx(0.2, abs=1e-10) and lam < 1
    assert break_even_rate(0.5, 1.0) is None
    cfg = {**SMALL, "sweep": {"eh_rate": [0.5, 1.0], "e_b": [1.0]}, "battery": {"ttis": 100}}
    assert run(tmp_path, "analyze-battery", cfg) == 0
    r = rows(tmp_path / "out" / "analyze_battery.csv")
    assert len(r) == 2
    assert float(r[1]["mean_harvest"]) == pytest.approx(math.exp(-1), abs=1e-8)
    assert all(0 <= float(x["availability"]) <= 1 for x in r)


def test_voronoi_info_grid(tmp_path):
    assert run(tmp_path, "voronoi-info", {"n_devices": 100, "layout": "GRID"}) == 0
    r = rows(tmp_path / "out" / "voronoi_info.csv")
    assert float(r[0]["expected_min_information"]) == pytest.approx(math.exp(-math.sqrt(2)), abs=1e-8)


def test_train_rl_then_simulate_loads_same_table(tmp_path, capsys):
    cfg = {**SMALL, "rl": {"episodes": 1, "horizon": 40}}
    assert run(tmp_path, "train-rl", cfg) == 0
    digest = capsys.readouterr().out.split("digest")[1].strip()
    table = tmp_path / "out" / "rl_qtable.csv"
    assert load_tables(table).digest() == digest
    assert run(tmp_path, "simulate", {**SMALL, "policies": ["rl"], "rl_model": str(table)}) == 0


def test_train_dt_and_empty_dataset(tmp_path, capsys):
    cfg = {**SMALL, "dt": {"episodes": 2, "horizon": 30, "epochs": 3, "d_h": 4}}
    assert run(tmp_path, "train-dt", cfg) == 0
    model = tmp_path / "out" / "dt_model.bin"
    assert dtmod.load_model(model).n == 12
    assert run(tmp_path, "simulate", {**SMALL, "policies": ["dt"], "dt_model": str(model)}) == 0
    empty = tmp_path / "empty.npz"
    np.savez(empty, states=np.zeros((0,)), actions=np.zeros((0,)), rewards=np.zeros((0,)), sources=np.zeros((0,)))
    assert run(tmp_path, "train-dt", {**cfg, "dt_dataset": str(empty)}) == 2
    assert "empty dataset" in capsys.readouterr().err
