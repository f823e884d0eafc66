"""Numeric checks of the convergence conditions and convergence metrics.

Linear independence is always judged on the relative witness
``sigma_J / sigma_1`` against ``tol`` (default 1e-8).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .compression import TransitionMatrix, build_transition_matrix
from .graph import NetworkGraph, prune_to_tree, subtree_partition
from .problems import SfoProblem, column_signs

REL_TOL = 1e-8


@dataclass
class ConditionReport:
    condition: str  # 1a | 1b | bounds | rankH | eigengap | lemma5
    witness: float
    passed: bool
    node: int | None = None
    reason: str = ""
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "condition": self.condition,
            "witness": self.witness,
            "passed": self.passed,
            "node": self.node,
            "reason": self.reason,
            **({"extra": self.extra} if self.extra else {}),
        }


def _as_tuple(X):
    return X if isinstance(X, tuple) else (X,)


def relative_sigma(S: np.ndarray, J: int) -> float:
    """``sigma_J / sigma_1`` of a matrix with J columns (0 when rank is impossible)."""
    if J == 0:
        return 1.0
    if S.shape[0] < J:
        return 0.0
    s = np.linalg.svd(S, compute_uv=False)
    if s[0] == 0:
        return 0.0
    return float(s[J - 1] / s[0])


def _compressed_gradients(problem: SfoProblem, X, stats):
    """vec(X^T grad h_j) per constraint, per-variable blocks stacked."""
    grads = problem.constraint_gradients(X, stats)
    cols = [np.concatenate([(x.T @ g).reshape(-1, order="F") for x, g in zip(X, gj)]) for gj in grads]
    return np.column_stack(cols) if cols else np.zeros((problem.n_vars * problem.Q**2, 0))


def check_condition_1a(problem: SfoProblem, X, stats, tol: float = REL_TOL) -> ConditionReport:
    X = _as_tuple(X)
    J = problem.n_constraints(stats)
    if J == 0:
        return ConditionReport("1a", 1.0, True, reason="unconstrained")
    S = _compressed_gradients(problem, X, stats)
    rows = S.shape[0]
    if J > rows:
        return ConditionReport("1a", 0.0, False, reason=f"J = {J} exceeds {rows} = n_vars * Q^2")
    w = relative_sigma(S, J)
    ok = w > tol
    return ConditionReport("1a", w, ok, reason="" if ok else "compressed constraint gradients dependent")


def _transition_matrices(X, tree, graph):
    return [build_transition_matrix(x, tree, graph) for x in X]


def _d_blocks(C: TransitionMatrix, g: np.ndarray) -> np.ndarray:
    """``[X_q^T g_q; sum_k X_k^T g_k per stream]`` for one constraint gradient."""
    blocks = [C.own.T @ g[C._rows(C.q)]]
    for st in C.streams:
        blocks.append(sum(Xk.T @ g[C._rows(k)] for k, Xk in st.blocks.items()))
    return np.vstack(blocks)


def d_stack(problem: SfoProblem, X, stats, Cs: list[TransitionMatrix]) -> np.ndarray:
    """Columns vec(D_{j,q}) for all j, using the (possibly split) transition matrices.

    Each D_{j,q} stacks ``X_q^T grad_{X_q} h_j`` over one ``sum_k X_k^T grad_{X_k} h_j``
    per compression stream; multi-variable problems stack the variables.
    """
    X = _as_tuple(X)
    cols = [
        np.concatenate([_d_blocks(C, g).reshape(-1, order="F") for C, g in zip(Cs, gj)])
        for gj in problem.constraint_gradients(X, stats)
    ]
    return np.column_stack(cols) if cols else np.zeros((0, 0))


def build_D_matrices(problem: SfoProblem, X, stats, graph: NetworkGraph, q: int, pruning_seed=None) -> list:
    """D_{j,q} per constraint (a tuple with one matrix per variable for CCA)."""
    X = _as_tuple(X)
    Cs = _transition_matrices(X, prune_to_tree(graph, q, pruning_seed), graph)
    out = []
    for gj in problem.constraint_gradients(X, stats):
        mats = tuple(_d_blocks(C, g) for C, g in zip(Cs, gj))
        out.append(mats[0] if len(mats) == 1 else mats)
    return out


def sigma_1b_at(problem: SfoProblem, X, stats, Cs) -> float:
    J = problem.n_constraints(stats)
    if J == 0:
        return float("nan")
    return relative_sigma(d_stack(problem, X, stats, Cs), J)


def constraint_bounds(Q: int, K: int, degrees) -> tuple:
    """(single-node bound, topology bound, global bound, combined bound)."""
    degrees = list(degrees)
    b1a = Q**2
    b_top = (1 + min(degrees)) * Q**2
    b_glob = Q**2 * sum(degrees) / (K - 1) if K > 1 else float("inf")
    return b1a, b_top, b_glob, min(b_top, b_glob)


def check_condition_1b(problem: SfoProblem, X, stats, graph: NetworkGraph, tol: float = REL_TOL, pruning_seed=None) -> ConditionReport:
    X = _as_tuple(X)
    J = problem.n_constraints(stats)
    if J == 0:
        return ConditionReport("1b", 1.0, True, reason="unconstrained")
    K = graph.node_count
    *_, beta = constraint_bounds(problem.Q, K, graph.degrees())
    beta *= problem.n_vars
    witnesses = []
    tree_degrees = {}
    for q in range(K):
        tree = prune_to_tree(graph, q, pruning_seed)
        Cs = _transition_matrices(X, tree, graph)
        witnesses.append(relative_sigma(d_stack(problem, X, stats, Cs), J))
        deg = [0] * K
        for a, b in tree.edges:
            deg[a] += 1
            deg[b] += 1
        tree_degrees[q] = deg
    worst = int(np.argmin(witnesses))
    w = witnesses[worst]
    extra = {
        "per_node": witnesses,
        "bound": beta,
        "graph_degrees": graph.degrees(),
        "tree_bound_min": problem.n_vars * min(constraint_bounds(problem.Q, K, d)[3] for d in tree_degrees.values()),
    }
    if J > beta:
        return ConditionReport("1b", w, False, worst, f"J = {J} exceeds the combined bound {beta:g}", extra)
    ok = w > tol
    return ConditionReport("1b", w, ok, worst, "" if ok else "D matrices dependent", extra)


def _node_H(X, grads, k, graph):
    """H_k: columns vec(X_k^T grad_{X_k} h_j), variables stacked."""
    rows = graph.block(k)
    cols = [np.concatenate([(x[rows].T @ g[rows]).reshape(-1, order="F") for x, g in zip(X, gj)]) for gj in grads]
    return np.column_stack(cols)


def build_H(problem: SfoProblem, X, stats, graph: NetworkGraph, pruning_seed=None) -> np.ndarray:
    X = _as_tuple(X)
    grads = problem.constraint_gradients(X, stats)
    J = len(grads)
    K = graph.node_count
    Hk = [_node_H(X, grads, k, graph) for k in range(K)]
    rows = Hk[0].shape[0]
    blocks = []
    for q in range(K):
        tree = prune_to_tree(graph, q, pruning_seed)
        for n, members in sorted(subtree_partition(tree).items()):
            R = np.zeros((rows, K * J))
            R[:, q * J : (q + 1) * J] = -sum(Hk[k] for k in members)
            for l in members:
                R[:, l * J : (l + 1) * J] = Hk[l]
            blocks.append(R)
    if not blocks:
        return np.zeros((0, K * J))
    return np.vstack(blocks)


def build_H_and_rank(problem: SfoProblem, X, stats, graph: NetworkGraph, tol: float = REL_TOL, pruning_seed=None, seed: int = 0) -> ConditionReport:
    J = problem.n_constraints(stats)
    K = graph.node_count
    if J == 0:
        return ConditionReport("rankH", 0.0, True, reason="unconstrained")
    H = build_H(problem, X, stats, graph, pruning_seed)
    s = np.linalg.svd(H, compute_uv=False) if H.size else np.zeros(0)
    rank = int(np.sum(s > tol * s[0])) if s.size and s[0] > 0 else 0
    target = K * J - J
    # equal multipliers at every node are always in the null space
    mu = np.random.default_rng(seed).standard_normal(J)
    null_res = float(np.linalg.norm(H @ np.tile(mu, K)) / max(np.linalg.norm(H) * np.linalg.norm(mu), 1e-300)) if H.size else 0.0
    ok = rank == target
    return ConditionReport(
        "rankH",
        float(target - rank),
        ok,
        reason="" if ok else f"rank(H) = {rank}, expected {target}",
        extra={"rank": rank, "expected": target, "shape": list(H.shape), "constant_null_residual": null_res},
    )


def lemma5_check(R: np.ndarray, C, tol: float = REL_TOL) -> ConditionReport:
    """Non-singularity of ``C`` (full column rank) and of ``C^T R C``.

    Witnesses are relative smallest singular values after scaling the columns of
    C to unit norm, which leaves the rank unchanged but removes the scale gap
    between the identity block and the neighbor blocks.
    """
    Cd = C.dense() if isinstance(C, TransitionMatrix) else np.asarray(C, dtype=float)
    norms = np.linalg.norm(Cd, axis=0)
    Cn = Cd / np.where(norms > 0, norms, 1.0)
    sC = np.linalg.svd(Cn, compute_uv=False)
    sL = np.linalg.svd(Cn.T @ R @ Cn, compute_uv=False)
    wC = float(sC[-1] / sC[0]) if sC[0] > 0 else 0.0
    wL = float(sL[-1] / sL[0]) if sL[0] > 0 else 0.0
    ok = wC > tol and wL > tol
    return ConditionReport(
        "lemma5",
        min(wC, wL),
        ok,
        getattr(C, "q", None),
        "" if ok else "transition matrix or compressed covariance singular",
        {"sigma_min_C": float(np.linalg.svd(Cd, compute_uv=False)[-1]), "rel_sigma_min_C": wC, "rel_sigma_min_CtRC": wL},
    )


def eigengap_report(gap: float, threshold: float, node=None) -> ConditionReport:
    ok = gap >= threshold
    return ConditionReport("eigengap", float(gap), ok, node, "" if ok else "eigenvalues Q and Q+1 nearly collide")


def solution_error(problem: SfoProblem, X, X_star) -> float:
    """``||X - X* P||^2 / ||X*||^2`` with P the best column sign pattern for eigenproblems."""
    X, X_star = _as_tuple(X), _as_tuple(X_star)
    if problem.alignment == "sign":
        s = column_signs(X_star, X)
        X_star = tuple(x * s for x in X_star)
    num = sum(np.sum((x - xs) ** 2) for x, xs in zip(X, X_star))
    den = sum(np.sum(xs**2) for xs in X_star)
    return float(num / den)
