"""Command-line experiment runner.

Subcommands: ``run``, ``mc``, ``reproduce-fig2``, ``check``.
Exit codes: 0 success, 1 configuration error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import math
import re
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from . import diagnostics as diag
from .engine import EngineConfig, RunReport, run
from .fixes import DegenerateSolutionError, FixConfig
from .graph import DisconnectedGraphError, NetworkGraph, prune_to_tree
from .problems import PROBLEMS, make_problem
from .compression import build_transition_matrix
from .scenarios import make_graph, random_model
from .signals import exact_statistics

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2
GRAPH_KINDS = {"er", "tree", "path", "star", "complete", "fig1", "edges"}

SCHEMA = {
    "problem": {"id", "Q", "L", "alpha", "gap_tol"},
    "graph": {"kind", "K", "channels", "p", "seed", "edges"},
    "signal": {"seed", "n_sources", "correlated_noise"},
    "engine": {f.name for f in fields(EngineConfig)} - {"fixes"},
    "fixes": {f.name for f in fields(FixConfig)},
    "monte_carlo": {"runs"},
    "output": {"prefix"},
}


class ConfigError(ValueError):
    pass


def _line_of(text: str, key: str) -> int | None:
    for n, line in enumerate(text.splitlines(), 1):
        if re.search(r'"%s"\s*:' % re.escape(key), line):
            return n
    return None


def _where(text, key):
    line = _line_of(text, key)
    return f" (line {line})" if line else ""


def load_config(path: str | Path) -> dict:
    """Parse and validate a JSON experiment config; errors name the key and line."""
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e.strerror}") from None
    try:
        cfg = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: line {e.lineno}: invalid JSON ({e.msg})") from None
    if not isinstance(cfg, dict):
        raise ConfigError(f"{path}: top level must be an object")
    for section, value in cfg.items():
        if section not in SCHEMA:
            raise ConfigError(f"{path}{_where(text, section)}: unknown key '{section}'")
        if not isinstance(value, dict):
            raise ConfigError(f"{path}{_where(text, section)}: '{section}' must be an object")
        for key in value:
            if key not in SCHEMA[section]:
                raise ConfigError(f"{path}{_where(text, key)}: unknown key '{section}.{key}'")
    try:
        _validate(cfg)
    except ConfigError as e:
        key = getattr(e, "key", None)
        raise ConfigError(f"{path}{_where(text, key) if key else ''}: {e}") from None
    return cfg


def _bad(key, msg):
    err = ConfigError(f"'{key}': {msg}")
    err.key = key.split(".")[-1]
    return err


def _validate(cfg):
    prob = cfg.get("problem", {})
    if prob.get("id") not in PROBLEMS:
        raise _bad("problem.id", f"must be one of {sorted(PROBLEMS)}")
    Q = prob.get("Q")
    if not isinstance(Q, int) or Q < 1:
        raise _bad("problem.Q", "must be a positive integer")
    if prob["id"] == "lcmv":
        L = prob.get("L")
        if not isinstance(L, int) or L < 1:
            raise _bad("problem.L", "LCMV needs a positive integer L")
    g = cfg.get("graph", {})
    K = g.get("K")
    if not isinstance(K, int) or K < 1:
        raise _bad("graph.K", "must be a positive integer")
    ch = g.get("channels", 1)
    counts = [ch] * K if isinstance(ch, int) else ch
    if not isinstance(counts, list) or len(counts) != K or any(not isinstance(c, int) or c < 1 for c in counts):
        raise _bad("graph.channels", f"must be a positive integer or a list of {K} positive integers")
    M = sum(counts)
    if prob["id"] == "lcmv" and not prob["L"] < M:
        raise _bad("problem.L", f"must be smaller than the total channel count {M}")
    if Q > M:
        raise _bad("problem.Q", f"exceeds the total channel count {M}")
    if g.get("kind", "er") not in GRAPH_KINDS:
        raise _bad("graph.kind", f"must be one of {sorted(GRAPH_KINDS)}")
    if g.get("kind") == "edges" and not isinstance(g.get("edges"), list):
        raise _bad("graph.edges", "graph kind 'edges' needs a list of [a, b] pairs")
    if "p" in g and not (isinstance(g["p"], (int, float)) and 0 < g["p"] <= 1):
        raise _bad("graph.p", "must lie in (0, 1]")
    try:
        engine_config(cfg)
    except (TypeError, ValueError) as e:
        msg = str(e)
        m = re.match(r"(engine|fixes)\.(\w+)", msg)
        raise _bad(m.group(0) if m else "engine", msg) from None


def engine_config(cfg: dict, seed_offset: int = 0) -> EngineConfig:
    eng = dict(cfg.get("engine", {}))
    fixes = FixConfig(**cfg.get("fixes", {}))
    eng["seed"] = eng.get("seed", 0) + seed_offset
    return EngineConfig(**eng, fixes=fixes)


@dataclass(frozen=True)
class Experiment:
    problem: object
    graph: NetworkGraph
    model: object
    engine: EngineConfig


def build_experiment(cfg: dict, seed_offset: int = 0) -> Experiment:
    prob, g, sig = cfg["problem"], cfg["graph"], cfg.get("signal", {})
    graph = make_graph(g.get("kind", "er"), g["K"], g.get("channels", 1), g.get("seed", 0) + seed_offset, g.get("p", 0.8), g.get("edges"))
    rng = np.random.default_rng([sig.get("seed", 0) + seed_offset, 17])
    model = random_model(prob["id"], graph.M, prob["Q"], rng, L=prob.get("L"), n_sources=sig.get("n_sources"), correlated_noise=sig.get("correlated_noise", False))
    params = {k: prob[k] for k in ("alpha", "gap_tol") if k in prob}
    return Experiment(make_problem(prob["id"], prob["Q"], **params), graph, model, engine_config(cfg, seed_offset))


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, (np.floating, float)):
        x = float(x)
        return x if math.isfinite(x) else str(x)
    if isinstance(x, np.integer):
        return int(x)
    if isinstance(x, np.bool_):
        return bool(x)
    return x


def _write_json(path: Path, obj):
    path.write_text(json.dumps(_jsonable(obj), indent=2, sort_keys=True) + "\n")


def condition_reports(problem, X, stats, graph, pruning_seed=None) -> list:
    reports = [diag.check_condition_1a(problem, X, stats), diag.check_condition_1b(problem, X, stats, graph, pruning_seed=pruning_seed)]
    J = problem.n_constraints(stats)
    bounds = diag.constraint_bounds(problem.Q, graph.node_count, graph.degrees())
    beta = problem.n_vars * bounds[3]
    reports.append(
        diag.ConditionReport(
            "bounds", float(beta), J <= beta, reason="" if J <= beta else f"J = {J} exceeds {beta:g}",
            extra={"J": J, "bound_1a": bounds[0], "bound_topology": bounds[1], "bound_global": bounds[2], "combined": bounds[3]},
        )
    )
    reports.append(diag.build_H_and_rank(problem, X, stats, graph, pruning_seed=pruning_seed))
    worst = None
    for q in range(graph.node_count):
        C = build_transition_matrix(X[0], prune_to_tree(graph, q, pruning_seed), graph)
        rep = diag.lemma5_check(stats.R_yy, C)
        if worst is None or rep.witness < worst.witness:
            worst = rep
    reports.append(worst)
    return reports


def execute(cfg: dict, seed_offset: int = 0) -> tuple[RunReport, Experiment]:
    exp = build_experiment(cfg, seed_offset)
    return run(exp.problem, exp.graph, exp.model, exp.engine), exp


def _save_run(report: RunReport, exp: Experiment, cfg: dict, out: Path, prefix: str, seed_offset: int):
    (out / f"{prefix}.csv").write_text(report.to_csv())
    stats = exact_statistics(exp.model)
    summary = report.summary()
    summary["conditions_final"] = [r.to_dict() for r in condition_reports(exp.problem, report.X, stats, exp.graph, exp.engine.pruning_seed)]
    summary["config_echo"] = cfg
    summary["seed_offset"] = seed_offset
    _write_json(out / f"{prefix}.json", summary)
    np.savez(out / f"{prefix}_iterate.npz", **{f"X{v}": x for v, x in enumerate(report.X)})


def cmd_run(args) -> int:
    cfg = load_config(args.config)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    prefix = cfg.get("output", {}).get("prefix", "run")
    report, exp = execute(cfg, args.seed_override or 0)
    _save_run(report, exp, cfg, out, prefix, args.seed_override or 0)
    print(f"{report.iterations} iterations, stop: {report.stop_reason}, eps = {report.final_error:.3e}")
    return EXIT_OK


def _mc_worker(job):
    cfg, offset, out, prefix = job
    try:
        report, exp = execute(cfg, offset)
    except Exception as e:  # recorded, aggregation continues
        return offset, None, f"{type(e).__name__}: {e}"
    _save_run(report, exp, cfg, Path(out), prefix, offset)
    return offset, report.column("eps").tolist(), None


def aggregate_curves(curves: list) -> tuple[np.ndarray, np.ndarray]:
    """Mean and standard error of the mean per iteration; short runs carry their last value."""
    n = max(len(c) for c in curves)
    A = np.array([list(c) + [c[-1]] * (n - len(c)) for c in curves], dtype=float)
    mean = A.mean(axis=0)
    sem = A.std(axis=0, ddof=1) / np.sqrt(len(curves)) if len(curves) > 1 else np.zeros(n)
    return mean, sem


def _write_aggregate(path: Path, mean, sem, runs):
    lines = ["iter,mean_eps,sem_eps,runs"]
    lines += [f"{i},{format(m, '.17g')},{format(s, '.17g')},{runs}" for i, (m, s) in enumerate(zip(mean, sem))]
    path.write_text("\n".join(lines) + "\n")


def _fan_out(jobs, parallelism):
    if parallelism <= 1:
        return [_mc_worker(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=parallelism) as pool:
        return list(pool.map(_mc_worker, jobs))


def cmd_mc(args) -> int:
    cfg = load_config(args.config)
    runs = cfg.get("monte_carlo", {}).get("runs", 1)
    if not isinstance(runs, int) or runs < 1:
        raise ConfigError("'monte_carlo.runs' must be a positive integer")
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    base = args.seed_override or 0
    jobs = [(cfg, base + r, str(out), f"run_{r:03d}") for r in range(runs)]
    results = _fan_out(jobs, args.parallelism)
    curves = [c for _, c, err in results if err is None and c]
    failures = {off: err for off, _, err in results if err is not None}
    for off, err in failures.items():
        print(f"warning: run with seed offset {off} failed: {err}", file=sys.stderr)
    if not curves:
        print("error: every Monte Carlo run failed", file=sys.stderr)
        return EXIT_RUNTIME
    mean, sem = aggregate_curves(curves)
    _write_aggregate(out / "aggregate.csv", mean, sem, len(curves))
    _write_json(out / "mc_summary.json", {"runs": runs, "completed": len(curves), "failures": failures, "final_mean_eps": mean[-1], "config_echo": cfg})
    print(f"{len(curves)}/{runs} runs completed, final mean eps = {mean[-1]:.3e}")
    return EXIT_OK


def fig2_regimes(beta: float, Q: int) -> dict:
    """Constraints-per-output L for J = QL below, at and above the bound."""
    at = int(beta // Q)
    return {"below": max(Q, at // 2), "at": at, "above": at + max(2, at // 2)}


def _fig2_config(kind, K, M_k, Q, L, iterations, seed):
    return {
        "problem": {"id": "lcmv", "Q": Q, "L": L},
        "graph": {"kind": kind, "K": K, "channels": M_k, "p": 0.8, "seed": seed},
        "signal": {"seed": seed},
        "engine": {"max_iterations": iterations, "tol": 0.0, "seed": seed, "diagnostics": False},
    }


def _fig2_worker(job):
    kind, regime, K, M_k, Q, factor, seed = job
    graph = make_graph(kind, K, M_k, seed=seed, p=0.8)
    beta = diag.constraint_bounds(Q, K, graph.degrees())[3]
    L = fig2_regimes(beta, Q)[regime]
    cfg = _fig2_config(kind, K, M_k, Q, L, factor * K, seed)
    report, _ = execute(cfg)
    return kind, regime, seed, Q * L, beta, report.column("eps").tolist()


def reproduce_fig2(runs=20, K=10, M_k=5, Q=2, factor=30, parallelism=1, seed=0):
    """Run every (graph type, J regime) cell; returns {(kind, regime): [(J, beta, eps curve), ...]}."""
    jobs = [(kind, regime, K, M_k, Q, factor, seed + r) for kind in ("er", "tree") for regime in ("below", "at", "above") for r in range(runs)]
    if parallelism > 1:
        with ProcessPoolExecutor(max_workers=parallelism) as pool:
            results = list(pool.map(_fig2_worker, jobs))
    else:
        results = [_fig2_worker(j) for j in jobs]
    cells: dict = {}
    for kind, regime, _, J, beta, curve in results:
        cells.setdefault((kind, regime), []).append((J, beta, curve))
    return cells


def cmd_reproduce_fig2(args) -> int:
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cells = reproduce_fig2(args.runs, args.K, args.Mk, args.Q, args.factor, args.parallelism, args.seed_override or 0)
    summary = {}
    for (kind, regime), rows in sorted(cells.items()):
        curves = [c for _, _, c in rows]
        mean, sem = aggregate_curves(curves)
        _write_aggregate(out / f"fig2_{kind}_{regime}.csv", mean, sem, len(curves))
        finals = [c[-1] for c in curves]
        summary[f"{kind}/{regime}"] = {
            "J_over_beta": sorted({round(J / b, 3) for J, b, _ in rows}),
            "converged_1e-6": sum(f <= 1e-6 for f in finals),
            "stagnated_1e-3": sum(f > 1e-3 for f in finals),
            "runs": len(finals),
            "final_eps": finals,
        }
        print(f"{kind:5s} {regime:6s} converged {summary[f'{kind}/{regime}']['converged_1e-6']:2d}/{len(finals)}  stagnated {summary[f'{kind}/{regime}']['stagnated_1e-3']:2d}/{len(finals)}")
    _write_json(out / "fig2_summary.json", {"K": args.K, "M_k": args.Mk, "Q": args.Q, "iterations_per_node": args.factor, "cells": summary})
    return EXIT_OK


def cmd_check(args) -> int:
    cfg = load_config(args.config)
    if not args.iterate:
        raise ConfigError("check needs --iterate pointing at a saved *_iterate.npz")
    path = Path(args.iterate)
    if not path.exists():
        print(f"error: iterate file {path} not found", file=sys.stderr)
        return EXIT_RUNTIME
    exp = build_experiment(cfg, args.seed_override or 0)
    with np.load(path) as data:
        X = tuple(data[f"X{v}"] for v in range(exp.problem.n_vars))
    if X[0].shape[0] != exp.graph.M:
        print(f"error: iterate has {X[0].shape[0]} rows, the configured network has {exp.graph.M} channels", file=sys.stderr)
        return EXIT_RUNTIME
    stats = exact_statistics(exp.model)
    reports = condition_reports(exp.problem, X, stats, exp.graph, exp.engine.pruning_seed)
    wanted = set(args.conditions.split(",")) if args.conditions else None
    reports = [r.to_dict() for r in reports if wanted is None or r.condition in wanted]
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "conditions.json", {"iterate": str(path), "reports": reports})
    for r in reports:
        print(f"{r['condition']:7s} {'pass' if r['passed'] else 'FAIL'}  witness={r['witness']}  {r['reason']}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="dasf", description="Distributed adaptive signal fusion simulator")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, config_required=True):
        p.add_argument("--config", required=config_required, help="JSON experiment config")
        p.add_argument("--out-dir", default="out", help="directory for CSV/JSON artifacts")
        p.add_argument("--seed-override", type=int, default=None, help="offset added to every seed in the config")
        p.add_argument("--parallelism", type=int, default=1, help="worker processes for Monte Carlo runs")

    common(sub.add_parser("run", help="one DASF run"))
    common(sub.add_parser("mc", help="Monte Carlo runs with aggregate curves"))
    f2 = sub.add_parser("reproduce-fig2", help="LCMV convergence versus the constraint-count bound")
    common(f2, config_required=False)
    f2.add_argument("--runs", type=int, default=20)
    f2.add_argument("--K", type=int, default=10)
    f2.add_argument("--Mk", type=int, default=5)
    f2.add_argument("--Q", type=int, default=2)
    f2.add_argument("--factor", type=int, default=30, help="iterations per node")
    chk = sub.add_parser("check", help="condition diagnostics on a saved iterate")
    common(chk)
    chk.add_argument("--iterate", help="*_iterate.npz written by 'run'")
    chk.add_argument("--conditions", help="comma-separated subset of 1a,1b,bounds,rankH,lemma5")
    return ap


COMMANDS = {"run": cmd_run, "mc": cmd_mc, "reproduce-fig2": cmd_reproduce_fig2, "check": cmd_check}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, DisconnectedGraphError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (DegenerateSolutionError, np.linalg.LinAlgError, RuntimeError) as e:
        print(f"runtime failure: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
