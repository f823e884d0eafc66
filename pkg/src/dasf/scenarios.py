"""Random but well-posed problem instances over simulated networks."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import graph as G
from .problems import SfoProblem, make_problem
from .signals import SignalModel, StatisticsSet, exact_statistics

SIGN_PROBLEMS = ("gevd", "tro", "cca")


@dataclass(frozen=True)
class Scenario:
    problem: SfoProblem
    graph: G.NetworkGraph
    model: SignalModel

    def stats(self) -> StatisticsSet:
        return exact_statistics(self.model)


def make_graph(kind: str, K: int, channels, seed: int = 0, p: float = 0.8, edges=None) -> G.NetworkGraph:
    if kind == "er":
        return G.erdos_renyi(K, p, seed, channels)
    if kind == "tree":
        return G.random_tree(K, seed, channels)
    if kind == "path":
        return G.path_graph(K, channels)
    if kind == "star":
        return G.star_graph(K, 0, channels)
    if kind == "complete":
        return G.complete_graph(K, channels)
    if kind == "fig1":
        return G.fig1_tree(channels)
    if kind == "edges":
        if edges is None:
            raise ValueError("graph kind 'edges' needs an edge list")
        return G.from_edges(K, edges, channels)
    raise ValueError(f"unknown graph kind {kind!r}")


def _noise_cov(rng, M, correlated=False):
    """Sensor noise; node-independent (diagonal) unless ``correlated``."""
    R = np.diag(0.5 + rng.random(M))
    if correlated:
        W = rng.standard_normal((M, M)) / np.sqrt(M)
        R = R + 0.2 * W @ W.T
    return R


def _mixing(rng, M, S, decay=1.0, amplitude=2.0):
    return amplitude * rng.standard_normal((M, S)) * np.sqrt(decay ** np.arange(S))


def _relative_gaps(w, Q):
    w = np.asarray(w)
    return np.min(np.diff(-w[: Q + 1])) / np.max(np.abs(w))


def random_model(
    name: str,
    M: int,
    Q: int,
    rng,
    L: int | None = None,
    n_sources: int | None = None,
    correlated_noise: bool = False,
    min_gap: float = 0.03,
    max_tries: int = 200,
) -> SignalModel:
    """Signal model for problem ``name``.

    Defaults: the regression and beamforming problems see ``Q`` (resp. ``L``)
    latent sources in node-independent noise, with the LCMV constraint matrix
    holding the steering vectors of the constrained sources; eigenproblems use
    ``Q + 1`` sources and are redrawn until the top ``Q + 1`` eigenvalues are
    separated by ``min_gap`` (relative).
    """
    noise = lambda: _noise_cov(rng, M, correlated_noise)  # noqa: E731
    if name in ("mmse", "ridge"):
        S = n_sources or Q
        return SignalModel(_mixing(rng, M, S), noise(), mix_d=rng.standard_normal((Q, S)))
    if name == "lcmv":
        if L is None:
            raise ValueError("LCMV needs the number of constraints per output L")
        S = max(n_sources or L, L)
        mix = _mixing(rng, M, S)
        return SignalModel(mix, noise(), B=mix[:, :L].copy(), A=rng.standard_normal((Q, L)))
    if name not in SIGN_PROBLEMS:
        raise ValueError(f"unknown problem {name!r}")
    S = n_sources or Q + 1
    for _ in range(max_tries):
        if name == "cca":
            # weak sources keep the canonical correlations away from 1
            mix = lambda: _mixing(rng, M, S, 0.5, 0.3)  # noqa: E731
            model = SignalModel(mix(), noise(), mix(), noise())
        else:
            model = SignalModel(_mixing(rng, M, S, 0.6), noise(), np.zeros((M, S)), noise())
        sol = make_problem(name, Q).solve(exact_statistics(model))
        if _relative_gaps(sol.eigenvalues, Q) > min_gap:
            return model
    raise RuntimeError(f"no well-separated {name} instance in {max_tries} draws")


def random_scenario(
    name: str,
    K: int,
    M_k: int,
    Q: int,
    seed: int,
    graph_kind: str = "er",
    p: float = 0.8,
    L: int | None = None,
    n_sources: int | None = None,
    correlated_noise: bool = False,
    **problem_params,
) -> Scenario:
    graph = make_graph(graph_kind, K, M_k, seed=seed, p=p)
    rng = np.random.default_rng([seed, 17])
    model = random_model(name, graph.M, Q, rng, L=L, n_sources=n_sources, correlated_noise=correlated_noise)
    return Scenario(make_problem(name, Q, **problem_params), graph, model)
