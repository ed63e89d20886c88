"""Config-driven experiment runner.

Subcommands: ``run`` (solve one instance and write equilibrium, duals,
trace, and verification files), ``sweep-m`` (solve Nash and Wardrop across
population sizes, recording distances against their theoretical bounds),
``compare`` (iteration counts per algorithm), and ``verify`` (re-check a
stored equilibrium file).

Configs are flat INI files; command-line flags override config keys.
All randomness flows from one seed through named substreams.  Exit codes:
0 success, 1 solver failure, 2 configuration error.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import os
import sys
import tempfile
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .algorithms import (SolverConfig, asymmetric_projection, extragradient,
                         two_level_wardrop)
from .analysis import (distance_bounds, estimate_constants,
                       verify_equilibrium)
from .apps.ev import build_ev_game, generate_ev_params
from .apps.traffic import build_route_choice_game, load_network
from .errors import AggeqError, ConfigError, ConvergenceError
from .game import (AggregativeGame, Box, CouplingConstraint, QuadraticCost,
                   aggregate_matrix)
from .operators import NASH, WARDROP, build_operator, monotonicity_analysis
from .synthetic import build_quadratic_game

ALGORITHMS = ("two-level", "apa-nash", "apa-wardrop", "extragradient")
KINDS = ("ev", "traffic", "quadratic", "custom-file")

_SUBSTREAMS = {"agents": 0, "od-pairs": 1, "sampling": 2, "offsets": 3}


def substream(seed: int, name: str) -> np.random.Generator:
    """Independent generator for one named consumer of the master seed."""
    idx = _SUBSTREAMS[name]
    return np.random.default_rng(np.random.SeedSequence(seed,
                                                        spawn_key=(idx,)))


@dataclass
class ExperimentConfig:
    kind: str
    seed: int
    M: int = 100
    m_list: tuple = ()
    algorithm: str = "apa-nash"
    tau: Optional[float] = None
    tol: float = 1e-4
    max_iter: int = 100_000
    inner_tol: float = 1e-6
    output_dir: str = "."
    n_rep: int = 1
    sections: dict = field(default_factory=dict)

    def solver_config(self) -> SolverConfig:
        return SolverConfig(tau=self.tau, tol=self.tol,
                            max_iter=self.max_iter,
                            inner_tol=self.inner_tol, seed=self.seed)


def _parse_config(path: Optional[str], overrides: dict) -> ExperimentConfig:
    parser = configparser.ConfigParser()
    if path is not None:
        if not parser.read(path):
            raise ConfigError(f"cannot read config file {path}")
    exp = parser["experiment"] if parser.has_section("experiment") else {}

    def pick(key, default=None):
        if overrides.get(key) is not None:
            return overrides[key]
        return exp.get(key, default)

    kind = pick("kind")
    if kind not in KINDS:
        raise ConfigError(f"kind must be one of {KINDS}, got {kind!r}")
    seed = pick("seed")
    if seed is None:
        raise ConfigError("a seed is required (config key or --seed)")
    algorithm = pick("algorithm", "apa-nash")
    if algorithm not in ALGORITHMS:
        raise ConfigError(f"algorithm must be one of {ALGORITHMS}")
    tau_raw = pick("tau", "auto")
    tau = None if str(tau_raw).lower() == "auto" else float(tau_raw)
    if tau is not None and tau <= 0:
        raise ConfigError("tau must be positive or 'auto'")
    tol = float(pick("tol", 1e-4))
    if tol <= 0:
        raise ConfigError("tol must be positive")
    max_iter = int(pick("max_iter", 100_000))
    if max_iter <= 0:
        raise ConfigError("max_iter must be positive")
    m_list = ()
    if "m_list" in exp:
        m_list = tuple(int(v) for v in exp["m_list"].split(","))
        if any(b <= a for a, b in zip(m_list, m_list[1:])):
            raise ConfigError("m_list must be strictly increasing")
    sections = {name: dict(parser[name]) for name in parser.sections()
                if name != "experiment"}
    return ExperimentConfig(
        kind=kind, seed=int(seed), M=int(pick("m", 100)), m_list=m_list,
        algorithm=algorithm, tau=tau, tol=tol, max_iter=max_iter,
        inner_tol=float(pick("inner_tol", 1e-6)),
        output_dir=str(pick("output_dir", ".")),
        n_rep=int(pick("n_rep", 1)), sections=sections)


def build_game(cfg: ExperimentConfig, M: Optional[int] = None,
               seed: Optional[int] = None) -> AggregativeGame:
    M = cfg.M if M is None else M
    seed = cfg.seed if seed is None else seed
    if cfg.kind == "quadratic":
        sec = cfg.sections.get("quadratic", {})
        return build_quadratic_game(
            M, n=int(sec.get("n", 24)), q=float(sec.get("q", 0.1)),
            K=float(sec.get("k", 0.3)), rng=substream(seed, "agents"))
    if cfg.kind == "ev":
        sec = cfg.sections.get("ev", {})
        params = generate_ev_params(
            M, n=int(sec.get("n", 24)), kappa=float(sec.get("kappa", 12.0)),
            K=float(sec.get("k", 0.55)), rng=substream(seed, "agents"))
        return build_ev_game(params)
    if cfg.kind == "traffic":
        sec = cfg.sections.get("traffic", {})
        if "nodes_file" not in sec or "edges_file" not in sec:
            raise ConfigError("traffic runs need nodes_file and edges_file")
        bbox = None
        if "bbox" in sec:
            vals = [float(v) for v in sec["bbox"].split(",")]
            if len(vals) != 4:
                raise ConfigError("bbox needs xmin,xmax,ymin,ymax")
            bbox = tuple(vals)
        net = load_network(sec["nodes_file"], sec["edges_file"], bbox=bbox,
                           f=float(sec.get("f_e", 4e-3)),
                           h=float(sec.get("h", 7200.0)),
                           K=float(sec.get("k", 1.0)))
        gamma_range = (float(sec.get("gamma_min", 0.5)),
                       float(sec.get("gamma_max", 3.5)))
        return build_route_choice_game(net, M=M, gamma_range=gamma_range,
                                       rng=substream(seed, "od-pairs"))
    if cfg.kind == "custom-file":
        sec = cfg.sections.get("custom", {})
        if "file" not in sec:
            raise ConfigError("custom-file runs need [custom] file=...")
        data = np.load(sec["file"])
        for key in ("Q", "C", "c", "lo", "hi"):
            if key not in data:
                raise ConfigError(f"custom file misses array {key!r}")
        c = np.atleast_2d(data["c"])
        M_file, n = c.shape
        cost = QuadraticCost(Q=data["Q"], C=data["C"], c=c)
        individual = tuple(Box(data["lo"], data["hi"])
                           for _ in range(M_file))
        if "A" in data and "b" in data:
            coupling = CouplingConstraint.dense(data["A"], data["b"],
                                                M_file, n)
        else:
            coupling = CouplingConstraint.per_component_cap(
                np.full(n, np.inf), M_file)
        return AggregativeGame(M=M_file, n=n, cost=cost,
                               individual=individual, coupling=coupling,
                               tag="custom")
    raise ConfigError(f"unknown kind {cfg.kind!r}")


def _solve(game, algorithm: str, solver_cfg: SolverConfig):
    if algorithm == "two-level":
        return two_level_wardrop(game, solver_cfg)
    if algorithm == "apa-nash":
        return asymmetric_projection(game, NASH, solver_cfg)
    if algorithm == "apa-wardrop":
        return asymmetric_projection(game, WARDROP, solver_cfg)
    if algorithm == "extragradient":
        return extragradient(game, WARDROP, solver_cfg)
    raise ConfigError(f"unknown algorithm {algorithm!r}")


def _flavor_of(algorithm: str) -> str:
    return NASH if algorithm == "apa-nash" else WARDROP


def write_csv(path: str, header: list, rows: list) -> None:
    """Atomic CSV write: temp file in the target directory, then rename."""
    directory = os.path.dirname(os.path.abspath(path)) or "."
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(header)
            writer.writerows(rows)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return v


def _write_run_outputs(out_dir, game, result, report=None, extra=None):
    X = result.x.as_matrix()
    rows = [(i, t, repr(float(X[i, t])))
            for i in range(game.M) for t in range(game.n)]
    write_csv(os.path.join(out_dir, "equilibrium.csv"),
              ["agent", "component", "value"], rows)
    write_csv(os.path.join(out_dir, "duals.csv"), ["constraint", "lambda"],
              [(j, repr(float(v))) for j, v in enumerate(result.lam)])
    write_csv(os.path.join(out_dir, "trace.csv"),
              ["k", "residual", "max_violation", "primal_updates",
               "dual_updates"],
              [(r["k"], repr(r["residual"]), repr(r["max_violation"]),
                r["primal_updates"], r["dual_updates"])
               for r in result.trace])
    if report is not None:
        row = report.as_row()
        row.update(extra or {})
        keys = sorted(row)
        write_csv(os.path.join(out_dir, "report.csv"), keys,
                  [[_fmt(row[k]) for k in keys]])


def cmd_run(cfg: ExperimentConfig) -> int:
    game = build_game(cfg)
    try:
        result = _solve(game, cfg.algorithm, cfg.solver_config())
    except ConvergenceError as exc:
        print(f"solver failed: {exc}", file=sys.stderr)
        return 1
    report = verify_equilibrium(game, _flavor_of(cfg.algorithm),
                                result.x, result.lam,
                                seed=cfg.seed,
                                feas_tol=max(1e-6, 10.0 * cfg.tol))
    extra = {"converged": int(result.converged), "algorithm": cfg.algorithm,
             "M": game.M, "seed": cfg.seed,
             "primal_updates": result.primal_updates,
             "dual_updates": result.dual_updates}
    _write_run_outputs(cfg.output_dir, game, result, report, extra)
    if not result.converged:
        print("solver hit max_iter without reaching tol", file=sys.stderr)
        return 1
    return 0


def _wardrop_solver_for(game, solver_cfg):
    """Wardrop solutions need strong monotonicity for the projection
    scheme; fall back to extragradient when the constant is zero."""
    rep = monotonicity_analysis(build_operator(game, WARDROP),
                                seed=solver_cfg.seed)
    if rep.safe_alpha() > 0:
        return asymmetric_projection(game, WARDROP, solver_cfg,
                                     constants=rep)
    return extragradient(game, WARDROP, solver_cfg, constants=rep)


def cmd_sweep_m(cfg: ExperimentConfig) -> int:
    m_values = cfg.m_list or (cfg.M,)
    rows = []
    failures = 0
    solver_cfg = cfg.solver_config()
    for M in m_values:
        game = build_game(cfg, M=M)
        try:
            res_n = asymmetric_projection(game, NASH, solver_cfg)
            res_w = _wardrop_solver_for(game, solver_cfg)
        except (ConvergenceError, AggeqError) as exc:
            print(f"M={M}: {exc}", file=sys.stderr)
            rows.append([M, 0, 0] + [""] * 5 + [_fmt(1.0 / np.sqrt(M))])
            failures += 1
            continue
        Xn, Xw = res_n.x.as_matrix(), res_w.x.as_matrix()
        d_x = float(np.linalg.norm((Xn - Xw).reshape(-1)))
        d_s = float(np.linalg.norm(aggregate_matrix(Xn)
                                   - aggregate_matrix(Xw)))
        constants = estimate_constants(game)
        bounds = distance_bounds(constants, M, game.tag)
        sigma_bound = min(v for k, v in bounds.items() if "sigma" in k)
        rows.append([
            M, int(res_n.converged), int(res_w.converged), _fmt(d_x),
            _fmt(d_s), _fmt(bounds["strategy_bound"]), _fmt(sigma_bound),
            _fmt(constants.alpha), _fmt(1.0 / np.sqrt(M))])
        if not (res_n.converged and res_w.converged):
            failures += 1
    write_csv(os.path.join(cfg.output_dir, "distances.csv"),
              ["M", "converged_nash", "converged_wardrop",
               "strategy_distance", "sigma_distance", "strategy_bound",
               "sigma_bound", "alpha", "inv_sqrt_m"], rows)
    return 1 if failures else 0


def cmd_compare(cfg: ExperimentConfig) -> int:
    rows = []
    failures = 0
    algorithms = ("two-level", "apa-wardrop", "extragradient")
    for algo in algorithms:
        primal, dual, ok = [], [], []
        for rep in range(cfg.n_rep):
            seed = cfg.seed + rep
            game = build_game(cfg, seed=seed)
            solver_cfg = SolverConfig(tau=cfg.tau, tol=cfg.tol,
                                      max_iter=cfg.max_iter,
                                      inner_tol=cfg.inner_tol, seed=seed)
            try:
                res = _solve(game, algo, solver_cfg)
            except ConvergenceError as exc:
                print(f"{algo} rep {rep}: {exc}", file=sys.stderr)
                ok.append(False)
                continue
            primal.append(res.primal_updates)
            dual.append(res.dual_updates)
            ok.append(res.converged)
        if primal:
            rows.append([cfg.M, algo,
                         repr(float(np.mean(primal))),
                         repr(float(np.std(primal))),
                         repr(float(np.mean(dual))),
                         repr(float(np.std(dual))),
                         int(all(ok)), cfg.n_rep])
        else:
            rows.append([cfg.M, algo, "", "", "", "", 0, cfg.n_rep])
        if not all(ok):
            failures += 1
    write_csv(os.path.join(cfg.output_dir, "iterations.csv"),
              ["M", "algorithm", "primal_updates_mean", "primal_updates_std",
               "dual_updates_mean", "dual_updates_std", "converged",
               "n_rep"], rows)
    return 1 if failures else 0


def cmd_verify(cfg: ExperimentConfig, equilibrium_file: str) -> int:
    x_entries = {}
    with open(equilibrium_file, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            x_entries[(int(row["agent"]), int(row["component"]))] = \
                float(row["value"])
    M = 1 + max(k[0] for k in x_entries)
    n = 1 + max(k[1] for k in x_entries)
    X = np.zeros((M, n))
    for (i, t), v in x_entries.items():
        X[i, t] = v
    game = build_game(cfg, M=M)
    if game.n != n:
        raise ConfigError(
            f"equilibrium file has n={n} but the configured game has"
            f" n={game.n}")
    duals_file = os.path.join(os.path.dirname(equilibrium_file), "duals.csv")
    lam = np.zeros(game.coupling.m)
    if os.path.exists(duals_file):
        with open(duals_file, newline="", encoding="utf-8") as fh:
            for row in csv.DictReader(fh):
                lam[int(row["constraint"])] = float(row["lambda"])
    report = verify_equilibrium(game, _flavor_of(cfg.algorithm), X, lam,
                                seed=cfg.seed,
                                feas_tol=max(1e-6, 10.0 * cfg.tol))
    row = report.as_row()
    keys = sorted(row)
    write_csv(os.path.join(cfg.output_dir, "report.csv"), keys,
              [[_fmt(row[k]) for k in keys]])
    return 0 if report.feasibility.feasible else 1


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="aggeq",
        description="Equilibrium experiments for aggregative games")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("run", "sweep-m", "compare"):
        p = sub.add_parser(name)
        _common_flags(p)
    p = sub.add_parser("verify")
    p.add_argument("equilibrium", help="path to an equilibrium.csv")
    _common_flags(p)
    return parser


def _common_flags(p):
    p.add_argument("--config", default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", default=None)
    p.add_argument("--algorithm", default=None, choices=ALGORITHMS)
    p.add_argument("--tol", type=float, default=None)
    p.add_argument("--max-iter", type=int, default=None)
    p.add_argument("--kind", default=None, choices=KINDS)


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    overrides = {"seed": args.seed, "algorithm": args.algorithm,
                 "tol": args.tol, "max_iter": args.max_iter,
                 "output_dir": args.out, "kind": args.kind}
    try:
        cfg = _parse_config(args.config, overrides)
    except (ConfigError, KeyError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    try:
        if args.command == "run":
            return cmd_run(cfg)
        if args.command == "sweep-m":
            return cmd_sweep_m(cfg)
        if args.command == "compare":
            return cmd_compare(cfg)
        if args.command == "verify":
            return cmd_verify(cfg, args.equilibrium)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except AggeqError as exc:
        print(f"failure: {exc}", file=sys.stderr)
        return 1
    raise AssertionError("unreachable")


if __name__ == "__main__":
    sys.exit(main())
