"""The DASF iteration: schedule, prune, compress, solve locally, update."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import diagnostics as diag
from .compression import build_transition_matrix, local_data_from_samples, local_statistics
from .fixes import DegenerateSolutionError, FixConfig, maybe_split, oscillation_guard
from .graph import NetworkGraph, prune_to_tree
from .problems import KktReport, SfoProblem, kkt_residual
from .signals import SignalModel, StatisticsSet, exact_statistics, sample_batch

CSV_COLUMNS = ["iter", "q", "f", "max_violation", "step_norm", "eps_vs_oracle", "sigmaJ_1b", "flags"]

MONOTONE_SLACK = 1e-10
FEASIBILITY_TOL = 1e-8


@dataclass(frozen=True)
class EngineConfig:
    max_iterations: int = 200
    tol: float = 1e-12  # relative step norm and objective change over one round
    mode: str = "exact"  # exact | batch
    N: int = 1000
    reuse_batch: bool = False
    schedule: str = "round_robin"  # round_robin | random
    seed: int = 0
    pruning_seed: int | None = None
    diagnostics: bool = True
    fixes: FixConfig = field(default_factory=FixConfig)

    def __post_init__(self):
        if self.max_iterations < 0:
            raise ValueError("engine.max_iterations must be non-negative")
        if not self.tol >= 0:
            raise ValueError("engine.tol must be non-negative")
        if self.mode not in ("exact", "batch"):
            raise ValueError("engine.mode must be 'exact' or 'batch'")
        if self.mode == "batch" and self.N < 1:
            raise ValueError("engine.N must be at least 1 in batch mode")
        if self.schedule not in ("round_robin", "random"):
            raise ValueError("engine.schedule must be 'round_robin' or 'random'")

    def to_dict(self):
        d = asdict(self)
        d["fixes"] = self.fixes.to_dict()
        return d


@dataclass
class IterationRecord:
    i: int
    q: int
    f: float
    max_violation: float
    step_norm: float
    eps: float
    sigma_1b: float
    flags: list = field(default_factory=list)
    channels_sent: int = 0
    eigengap: float = math.inf


@dataclass
class RunReport:
    records: list
    X: tuple
    X0: tuple
    X_star: tuple | None
    f0: float
    f_star: float | None
    kkt: KktReport | None
    config: dict
    stop_reason: str
    monotonicity_violations: int = 0
    feasibility_violations: int = 0
    skipped_updates: int = 0
    splits: int = 0
    degenerate_solves: int = 0

    @property
    def iterations(self) -> int:
        return len(self.records)

    @property
    def final_error(self) -> float:
        return self.records[-1].eps if self.records else math.nan

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.records], dtype=float)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for r in self.records:
            w.writerow([r.i, r.q, _fmt(r.f), _fmt(r.max_violation), _fmt(r.step_norm), _fmt(r.eps), _fmt(r.sigma_1b), ";".join(r.flags)])
        return buf.getvalue()

    def summary(self) -> dict:
        last = self.records[-1] if self.records else None
        return {
            "iterations": self.iterations,
            "stop_reason": self.stop_reason,
            "f0": self.f0,
            "f_final": last.f if last else self.f0,
            "f_star": self.f_star,
            "eps_final": self.final_error if last else None,
            "max_violation_final": last.max_violation if last else None,
            "monotonicity_violations": self.monotonicity_violations,
            "feasibility_violations": self.feasibility_violations,
            "skipped_updates": self.skipped_updates,
            "splits": self.splits,
            "degenerate_solves": self.degenerate_solves,
            "kkt": None
            if self.kkt is None
            else {"stationarity": self.kkt.stationarity, "primal_residual": self.kkt.primal_residual},
            "config": self.config,
        }


def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def _sq(X) -> float:
    return float(sum(np.sum(x * x) for x in X))


def local_solve_with_tiebreak(problem: SfoProblem, local_stats: StatisticsSet, reference: tuple):
    """Solve the compressed problem and pick the candidate closest to ``reference``.

    Sign-ambiguous problems align each column to the reference (an exact tie keeps
    the canonical sign, so the pick is deterministic); others have a unique solution.
    """
    return problem.solve(local_stats, reference)


def disseminate_and_update(Cs: list, X_local: tuple) -> tuple:
    """``X_q <- first block``, ``X_k <- X_k G_n`` for every k behind neighbor n."""
    return tuple(C.expand(x) for C, x in zip(Cs, X_local))


def _schedule(config: EngineConfig, K: int):
    rng = np.random.default_rng([config.seed, 1])
    i = 0
    while True:
        yield i % K if config.schedule == "round_robin" else int(rng.integers(K))
        i += 1


def run(
    problem: SfoProblem,
    graph: NetworkGraph,
    source: SignalModel | StatisticsSet,
    config: EngineConfig | None = None,
    x0=None,
    x_star=None,
) -> RunReport:
    """Run DASF on ``problem`` over ``graph``.

    ``source`` is a signal model (needed in batch mode) or exact statistics.
    ``x0`` defaults to a feasible random start; ``x_star`` to the centralized
    solution on the exact statistics.  Records hold the state after each update.
    """
    config = config or EngineConfig()
    model = source if isinstance(source, SignalModel) else None
    stats = exact_statistics(model) if model is not None else source
    if config.mode == "batch" and model is None:
        raise ValueError("batch mode needs a SignalModel to draw samples from")
    if stats.M != graph.M:
        raise ValueError(f"statistics have {stats.M} channels, graph has {graph.M}")
    K = graph.node_count
    fx = config.fixes
    rng_init = np.random.default_rng([config.seed, 0])
    rng_split = np.random.default_rng([config.seed, 2])

    if x0 is None:
        X = problem.initial_point(stats, rng_init)
    else:
        X = tuple(np.array(x, dtype=float) for x in (x0 if isinstance(x0, tuple) else (x0,)))
    if x_star is None:
        x_star = problem.solve(stats).X
    elif not isinstance(x_star, tuple):
        x_star = (x_star,)
    X0 = X
    f = problem.objective(X, stats)
    f0 = f
    f_star = problem.objective(x_star, stats)
    exact = config.mode == "exact"

    report = RunReport([], X, X0, x_star, f0, f_star, None, {"engine": config.to_dict(), "problem": problem.config()}, "max_iterations")
    fixed_batch = sample_batch(model, config.N, [config.seed, 3]) if not exact and config.reuse_batch else None
    sched = _schedule(config, K)
    window_f = [f]
    window_steps = []
    for i in range(config.max_iterations):
        q = next(sched)
        flags = []
        tree = prune_to_tree(graph, q, None if config.pruning_seed is None else config.pruning_seed + i)
        Cs = [build_transition_matrix(x, tree, graph) for x in X]
        want_sigma = config.diagnostics or fx.split_enabled
        sigma = diag.sigma_1b_at(problem, X, stats, Cs) if want_sigma else math.nan
        Cs, did_split = maybe_split(Cs, sigma, fx, rng_split)
        if did_split:
            flags.append("split")
            report.splits += 1

        C_y, C_v = Cs[0], Cs[problem.v_var]
        if exact:
            local = local_statistics(stats, C_y, C_v)
        else:
            batch = fixed_batch if fixed_batch is not None else sample_batch(model, config.N, [config.seed, 3, i])
            local = local_data_from_samples(batch, graph, tree, C_y, C_v, B=stats.B, A=stats.A)
        reference = tuple(C.reference() for C in Cs)
        sol = local_solve_with_tiebreak(problem, local.stats, reference)
        if sol.degenerate:
            flags.append("degenerate")
            report.degenerate_solves += 1
            if fx.on_degenerate == "abort":
                raise DegenerateSolutionError(f"local problem at node {q} is degenerate (eigengap {sol.eigengap:.3g})")
        X_new = disseminate_and_update(Cs, sol.X)
        f_new = problem.objective(X_new, stats)
        step = math.sqrt(_sq(tuple(a - b for a, b in zip(X_new, X))))

        if oscillation_guard(f, f_new, step, sol.eigengap, fx) == "skip":
            flags.append("skipped")
            report.skipped_updates += 1
            X_new, f_new, step = X, f, 0.0

        viol = problem.max_violation(X_new, stats)
        if exact and f_new > f + MONOTONE_SLACK * (1 + abs(f)):
            flags.append("nonmonotone")
            report.monotonicity_violations += 1
        if exact and viol > FEASIBILITY_TOL:
            flags.append("infeasible")
            report.feasibility_violations += 1
        rel_step = step / max(math.sqrt(_sq(X)), 1e-300)
        X, f = X_new, f_new
        eps = diag.solution_error(problem, X, x_star)
        sent = sum(sum(C.Q for _ in C.node_parts(k)) for C in Cs for k in range(K) if k != q)
        report.records.append(IterationRecord(i, q, f, viol, step, eps, sigma, flags, sent, sol.eigengap))

        window_f.append(f)
        window_steps.append(rel_step)
        if len(window_steps) >= K:
            steps = window_steps[-K:]
            df = abs(window_f[-1] - window_f[-1 - K])
            if max(steps) <= config.tol and df <= config.tol * (1 + abs(f)):
                report.stop_reason = "converged"
                break

    report.X = X
    report.kkt = kkt_residual(problem, X, stats)
    return report
