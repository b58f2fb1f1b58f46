"""Command line entry point: ``mfstop <subcommand> --config run.json --seed 1 --out dir``."""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
import warnings
from dataclasses import dataclass, field

from . import __version__
from .calculus import projection_sweep
from .chaos import chaos_experiment, csv_text, value_convergence_experiment
from .config import SUBCOMMANDS, ConfigError, ExperimentConfig, parse_config
from .policy import StoppingPolicy, epsilon_optimality, evaluate_policy
from .simulate import simulate_system
from .snell import load_table, regime_bits, save_table, solve_cascade, value_at

log = logging.getLogger("mfstop")


@dataclass
class RunManifest:
    command: str
    config_hash: str
    version: str
    seed: int
    threads: int
    timings: dict = field(default_factory=dict)
    warnings: list = field(default_factory=list)
    outputs: list = field(default_factory=list)

    def write(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.__dict__, fh, indent=2, sort_keys=True)
            fh.write("\n")


class StageError(RuntimeError):
    def __init__(self, stage: str, exc: Exception):
        super().__init__(f"stage {stage!r} failed: {exc}")
        self.stage = stage


def _write(cfg: ExperimentConfig, manifest: RunManifest, name: str, text: str) -> str:
    path = os.path.join(cfg.out, name)
    with open(path, "w") as fh:
        fh.write(text)
    manifest.outputs.append(name)
    return path


def _initial(cfg: ExperimentConfig):
    if cfg.initial is None:
        raise ConfigError("initial", "this subcommand needs initial particle states")
    return cfg.initial


def run_simulate(cfg, manifest):
    model, y0 = cfg.model(), _initial(cfg)
    rows = []
    for r in range(cfg.replications):
        paths = simulate_system(model, cfg.grid, y0, cfg.rule, cfg.seed, replication=r)
        rows.extend(paths.rows())
    d = y0[0].shape[1]
    header = ["replication", "particle", "node"] + [f"x{j + 1}" for j in range(d)] + ["i"]
    _write(cfg, manifest, "paths.csv", csv_text(header, rows))


def _solve(cfg, model, y0):
    N = len(y0[1])
    if cfg.backend == "LSMC" or (cfg.backend == "auto" and (N > 3 or cfg.sgrid is None)):
        params = dict(cfg.lsmc)
        params.setdefault("seed", cfg.seed)
        return solve_cascade(model, N, cfg.grid, "LSMC", y0=y0, **params)
    if cfg.sgrid is None:
        raise ConfigError("backend.sgrid", "the lattice backend needs a spatial grid")
    return solve_cascade(model, N, cfg.grid, "Lattice", sgrid=cfg.sgrid)


def run_solve(cfg, manifest):
    model, y0 = cfg.model(), _initial(cfg)
    table = _solve(cfg, model, y0)
    manifest.warnings.extend(table.warnings)
    path = os.path.join(cfg.out, "table.npz")
    save_table(table, path)
    manifest.outputs.append("table.npz")
    N = len(y0[1])
    rows = [(code, "".join(map(str, regime_bits(code, N))), value_at(table, 0, (y0[0], regime_bits(code, N))))
            for code in range(1 << N)]
    _write(cfg, manifest, "solve.csv", csv_text(["code", "regime", "value_t0"], rows))


def run_policy_eval(cfg, manifest):
    model, y0 = cfg.model(), _initial(cfg)
    if cfg.table is None:
        raise ConfigError("table", "policy-eval needs a value table (--table or config field)")
    table = load_table(cfg.table, model)
    policy = StoppingPolicy(table, eta=cfg.eta)
    ev = evaluate_policy(model, cfg.grid, y0, policy, cfg.replications, cfg.seed, scheme=cfg.scheme)
    v = value_at(table, 0, y0)
    eps = epsilon_optimality(ev.J, table, 0, y0)
    if ev.clamps:
        manifest.warnings.append(f"{ev.clamps} value queries clamped to the lattice")
    _write(cfg, manifest, "policy.csv",
           csv_text(["J", "stderr", "value_at", "epsilon", "eta", "replications"],
                    [(ev.J, ev.se, v, eps, ev.eta, ev.replications)]))


def run_chaos(cfg, manifest):
    if cfg.m0 is None or not cfg.Ns:
        raise ConfigError("m0" if cfg.m0 is None else "Ns", "chaos needs an initial law and an N sweep")
    rep = chaos_experiment(cfg.model(), cfg.m0, cfg.rule, cfg.Ns, cfg.replications, cfg.grid, cfg.seed,
                           M=cfg.flow.get("M"), k_max=cfg.flow.get("k_max", 50), tol=cfg.flow.get("tol", cfg.tol),
                           indicator_scale=cfg.indicator_scale, secondary=cfg.flow.get("secondary", False),
                           bias_check=cfg.flow.get("bias_check", False))
    manifest.warnings.extend(rep.warnings)
    if not rep.picard_converged:
        manifest.warnings.append(f"reference flow not converged: gap {rep.picard_gap!r}")
    _write(cfg, manifest, "chaos.csv", rep.summary_csv())
    _write(cfg, manifest, "chaos_detail.csv", rep.detail_csv())
    lines = [f"N={N:5d}  E[sup W1^2]={e:.4e} +- {s:.1e}" for N, e, s in zip(rep.Ns, rep.estimates, rep.stderrs)]
    if rep.fit is not None:
        lines.append(f"log-log slope {rep.fit.slope:.3f}" + (" (degenerate)" if rep.fit.degenerate else ""))
    print("\n".join(lines))


def run_converge(cfg, manifest):
    if cfg.m0 is None or not cfg.Ns:
        raise ConfigError("m0" if cfg.m0 is None else "Ns", "converge needs an initial law and an N ladder")
    rep = value_convergence_experiment(cfg.model(), cfg.m0, cfg.Ns, cfg.grid, cfg.seed, backend=cfg.backend,
                                       sgrid=cfg.sgrid, lsmc_params=cfg.lsmc, reps=cfg.replications, eta=cfg.eta)
    _write(cfg, manifest, "converge.csv", rep.csv())


def run_check_derivatives(cfg, manifest):
    rows = projection_sweep(cfg.functionals, cfg.check_Ns, cfg.check_states, cfg.seed,
                            dim=int(cfg.model_params.get("dim", 1)), h_fd=cfg.h_fd,
                            t_range=(cfg.grid.t0, cfg.grid.T))
    _write(cfg, manifest, "derivatives.csv", csv_text(["functional", "N", "states", "worst_relative_error"], rows))
    for name, N, _, worst in rows:
        print(f"{name:22s} N={N:3d}  worst relative discrepancy {worst:.2e}")


RUNNERS = {
    "simulate": run_simulate,
    "solve": run_solve,
    "policy-eval": run_policy_eval,
    "chaos": run_chaos,
    "converge": run_converge,
    "check-derivatives": run_check_derivatives,
}


def run(command: str, cfg: ExperimentConfig) -> int:
    """Run one subcommand, write its CSV files and ``manifest.json`` into ``cfg.out``."""
    os.makedirs(cfg.out, exist_ok=True)
    manifest = RunManifest(command, cfg.digest, __version__, cfg.seed, cfg.threads)
    start = time.perf_counter()
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        try:
            RUNNERS[command](cfg, manifest)
        except ConfigError:
            raise
        except Exception as exc:  # noqa: BLE001 - reported with the stage name
            raise StageError(command, exc) from exc
    manifest.timings[command] = time.perf_counter() - start
    manifest.warnings.extend(f"{c.category.__name__}: {c.message}" for c in caught)
    manifest.write(os.path.join(cfg.out, "manifest.json"))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mfstop", description=__doc__)
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in SUBCOMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="JSON experiment file")
        p.add_argument("--seed", type=int, help="global seed (overrides the config)")
        p.add_argument("--out", help="output directory (overrides the config)")
        p.add_argument("--threads", type=int, help="worker count recorded in the manifest")
        if name == "policy-eval":
            p.add_argument("--table", help="value table written by `solve`")
            p.add_argument("--model", help="built-in model name (overrides the config)")
            p.add_argument("--reps", type=int, help="replications (overrides the config)")
        if name == "check-derivatives":
            p.add_argument("--functional", action="append", help="restrict to these functionals")
            p.add_argument("--N", type=int, action="append", dest="N_values", help="particle counts")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    try:
        with open(args.config) as fh:
            raw = json.load(fh)
        if getattr(args, "table", None):
            raw["table"] = args.table
        if getattr(args, "model", None):
            raw.setdefault("model", {})["name"] = args.model
        if getattr(args, "reps", None):
            raw["replications"] = args.reps
        if getattr(args, "functional", None):
            raw["functionals"] = args.functional
        if getattr(args, "N_values", None):
            raw.setdefault("check", {})["N"] = args.N_values
        cfg = parse_config(raw, seed=args.seed, out=args.out, threads=args.threads)
        return run(args.command, cfg)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    except json.JSONDecodeError as exc:
        print(f"configuration error: <file>: not valid JSON ({exc})", file=sys.stderr)
        return 2
    except StageError as exc:
        print(str(exc), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
