import json

import numpy as np
import pytest

from mfstop.cli import main
from mfstop.config import ConfigError, parse_config

BASE = {
    "seed": 3,
    "model": {"name": "DecoupledAdditive", "params": {"kappa": 1.0, "theta": 1.0, "sigma": 0.3}},
    "grid": {"t0": 0.0, "T": 1.0, "n_steps": 10},
}


def write(tmp_path, cfg, name="run.json"):
    path = tmp_path / name
    path.write_text(json.dumps(cfg))
    return str(path)


def run(tmp_path, command, cfg, *extra, out="out"):
    return main([command, "--config", write(tmp_path, cfg), "--out", str(tmp_path / out), *extra])


def test_check_derivatives_command(tmp_path, capsys):
    cfg = dict(BASE, check={"N": [1, 2, 5, 20], "states": 20})
    assert run(tmp_path, "check-derivatives", cfg) == 0
    lines = (tmp_path / "out" / "derivatives.csv").read_text().splitlines()
    assert lines[0] == "functional,N,states,worst_relative_error" and len(lines) == 1 + 5 * 4
    assert max(float(line.split(",")[-1]) for line in lines[1:]) <= 1e-6
    manifest = json.loads((tmp_path / "out" / "manifest.json").read_text())
    assert manifest["seed"] == 3 and manifest["outputs"] == ["derivatives.csv"]
    assert "worst relative discrepancy" in capsys.readouterr().out


def test_unknown_model_is_a_field_error(tmp_path, capsys):
    cfg = dict(BASE, model={"name": "Nope"})
    assert run(tmp_path, "simulate", cfg) == 2
    assert "model.name" in capsys.readouterr().err


def test_missing_seed_and_unknown_field(tmp_path, capsys):
    cfg = {k: v for k, v in BASE.items() if k != "seed"}
    assert run(tmp_path, "simulate", cfg) == 2
    assert "seed" in capsys.readouterr().err
    assert run(tmp_path, "simulate", dict(BASE, flux=1)) == 2
    assert "flux: unknown field" in capsys.readouterr().err


def test_seed_on_command_line(tmp_path):
    cfg = {k: v for k, v in BASE.items() if k != "seed"}
    cfg["initial"] = {"x": [0.9, 1.1]}
    assert run(tmp_path, "simulate", cfg, "--seed", "4") == 0


def test_config_validation_messages():
    with pytest.raises(ConfigError, match=r"grid.n_steps"):
        parse_config(dict(BASE, grid={"T": 1.0, "n_steps": "ten"}))
    with pytest.raises(ConfigError, match=r"rule.kind"):
        parse_config(dict(BASE, rule={"kind": "Sometimes"}))
    with pytest.raises(ConfigError, match=r"scheme"):
        parse_config(dict(BASE, scheme="heun"))
    with pytest.raises(ConfigError, match=r"backend.lsmc.paths"):
        parse_config(dict(BASE, backend={"name": "LSMC", "lsmc": {"paths": 3}}))


def test_simulate_reruns_are_byte_identical(tmp_path):
    cfg = dict(BASE, initial={"x": [0.9, 1.1, 1.0], "i": [1, 1, 0]}, replications=2,
               rule={"kind": "IidSurvival", "law": "uniform"})
    assert run(tmp_path, "simulate", cfg, out="a") == 0
    assert run(tmp_path, "simulate", cfg, out="b") == 0
    a = (tmp_path / "a" / "paths.csv").read_bytes()
    assert a == (tmp_path / "b" / "paths.csv").read_bytes()
    assert a.splitlines()[0] == b"replication,particle,node,x1,i"


def test_solve_then_policy_eval(tmp_path):
    cfg = dict(BASE, initial={"x": [0.9, 1.1]}, replications=500,
               backend={"name": "Lattice", "sgrid": {"x_min": 0.0, "x_max": 2.4, "n_x": 25}})
    assert run(tmp_path, "solve", cfg, out="s") == 0
    table = str(tmp_path / "s" / "table.npz")
    assert run(tmp_path, "policy-eval", cfg, "--table", table, "--reps", "1000", out="p") == 0
    rows = (tmp_path / "p" / "policy.csv").read_text().splitlines()
    J, se, v, eps, eta, reps = (float(c) for c in rows[1].split(","))
    assert reps == 1000 and abs(eps) <= 3 * se + 0.01
    # a table solved for another model is refused
    other = dict(cfg, model={"name": "MeanReverterToMean"})
    assert run(tmp_path, "policy-eval", other, "--table", table, out="q") == 1


def test_converge_on_decoupled_model(tmp_path):
    cfg = dict(BASE, Ns=[2, 4], replications=4000, m0={"x": [0.9, 1.1]},
               grid={"t0": 0.0, "T": 1.0, "n_steps": 20},
               backend={"name": "auto", "sgrid": {"x_min": 0.0, "x_max": 2.4, "n_x": 25}})
    assert run(tmp_path, "converge", cfg) == 0
    lines = (tmp_path / "out" / "converge.csv").read_text().splitlines()
    header = lines[0].split(",")
    for line in lines[1:]:
        row = dict(zip(header, line.split(",")))
        assert float(row["oracle_gap"]) <= 3 * float(row["stderr"]) + 0.005


def test_chaos_command_small(tmp_path, capsys):
    cfg = dict(BASE, model={"name": "MeanReverterToMean"}, grid={"T": 1.0, "n_steps": 2}, Ns=[4, 8, 16],
               replications=4, m0={"gaussian_quantiles": {"mean": 1.0, "std": 0.5, "atoms": 32}},
               rule={"kind": "IidSurvival"}, flow={"M": 160})
    assert run(tmp_path, "chaos", cfg) == 0
    summary = (tmp_path / "out" / "chaos.csv").read_text().splitlines()
    assert len(summary) == 4 and "log-log slope" in capsys.readouterr().out
    assert np.isfinite(float(summary[1].split(",")[1]))
