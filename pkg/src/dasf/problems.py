"""Signal fusion optimization problems and their centralized solvers.

A variable is always a tuple of ``M x Q`` arrays (one entry per optimization
variable, CCA being the only two-variable problem).  Every evaluator takes a
:class:`~dasf.signals.StatisticsSet`; feeding it compressed statistics turns the
same code into the local problem solved at the updating node.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from itertools import combinations_with_replacement

import numpy as np
from scipy import linalg as sla

from .signals import StatisticsSet


class SingularCovarianceError(np.linalg.LinAlgError):
    pass


class ConstraintRankError(ValueError):
    pass


@dataclass(frozen=True)
class Solution:
    X: tuple
    eigenvalues: np.ndarray | None = None
    eigengap: float = np.inf  # (lambda_Q - lambda_{Q+1}) / max |lambda|
    degenerate: bool = False


@dataclass
class KktReport:
    multipliers: np.ndarray
    stationarity: float
    primal_residual: float
    complementarity: float
    dual_feasible: bool
    active: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))


# -- linear algebra helpers -------------------------------------------------


def generalized_eigh(A, B):
    """Eigenpairs of the symmetric pencil (A, B), B SPD, by Cholesky whitening.

    Returns eigenvalues in descending order and B-orthonormal eigenvectors.
    """
    try:
        L = np.linalg.cholesky(B)
    except np.linalg.LinAlgError:
        raise SingularCovarianceError("second matrix of the pencil is not positive definite") from None
    T = sla.solve_triangular(L, A, lower=True)
    W = sla.solve_triangular(L, T.T, lower=True)
    w, U = np.linalg.eigh(0.5 * (W + W.T))
    order = np.argsort(w)[::-1]
    V = sla.solve_triangular(L.T, U[:, order], lower=False)
    return w[order], V


def canonical_signs(X):
    """Flip columns so that each column's largest-magnitude entry is positive."""
    idx = np.argmax(np.abs(X), axis=0)
    s = np.sign(X[idx, np.arange(X.shape[1])])
    s[s == 0] = 1.0
    return X * s


def column_signs(X: tuple, reference: tuple) -> np.ndarray:
    """Per-column signs bringing ``X`` closest (Frobenius) to ``reference``.

    Columns of all variables flip together.  The distance is separable over
    columns, so this is the exact minimiser over the 2^Q candidates; an exact tie
    keeps the unflipped column.
    """
    score = sum(np.sum(x * r, axis=0) for x, r in zip(X, reference))
    return np.where(score < 0, -1.0, 1.0)


def _gap(eigvals, Q):
    if len(eigvals) <= Q:
        return np.inf
    scale = max(np.max(np.abs(eigvals)), np.finfo(float).tiny)
    return float((eigvals[Q - 1] - eigvals[Q]) / scale)


def _stiefel_pairs(Q):
    return [(m, l) for l, m in combinations_with_replacement(range(Q), 2)]


def _quadratic_constraints(x, R, pairs):
    G = x.T @ R @ x
    return np.array([G[m, l] - (1.0 if m == l else 0.0) for m, l in pairs])


def _quadratic_constraint_grads(x, R, pairs):
    RX = R @ x
    out = []
    for m, l in pairs:
        g = np.zeros_like(x)
        g[:, l] += RX[:, m]
        g[:, m] += RX[:, l]
        out.append(g)
    return out


# -- centralized solvers ----------------------------------------------------


def mmse_solve(stats: StatisticsSet, cond_cap: float = 1e12) -> np.ndarray:
    # symmetric diagonal scaling first: compressed channels can be orders of
    # magnitude smaller than raw ones without the matrix being near-singular
    R = stats.R_yy
    d = np.sqrt(np.diag(R))
    if np.any(d <= 0):
        raise SingularCovarianceError("R_yy has a zero-variance channel; use ridge_solve with alpha > 0")
    Rs = R / np.outer(d, d)
    if np.linalg.cond(Rs) > cond_cap:
        raise SingularCovarianceError("R_yy is (numerically) singular; use ridge_solve with alpha > 0")
    return sla.solve(Rs, stats.R_yd / d[:, None], assume_a="pos") / d[:, None]


def ridge_solve(stats: StatisticsSet, alpha: float) -> np.ndarray:
    if alpha <= 0:
        raise ValueError("ridge parameter alpha must be positive")
    return sla.solve(stats.R_yy + alpha * stats.gamma(), stats.R_yd, assume_a="pos")


def lcmv_solve(stats: StatisticsSet, allow_rank_deficient: bool = False, rtol: float = 1e-10) -> np.ndarray:
    """Minimum-variance filter subject to ``X^T B = A``.

    With ``allow_rank_deficient`` the constraints are reduced to the range of B
    first; local problems need this when a node sees fewer channels than L.
    """
    R, B, A = stats.R_yy, stats.B, stats.A
    M, L = B.shape
    U, s, Vt = np.linalg.svd(B, full_matrices=False)
    r = int(np.sum(s > rtol * s[0])) if s.size and s[0] > 0 else 0
    if r < L and not allow_rank_deficient:
        raise ConstraintRankError(f"B has rank {r} < L = {L}; LICQ fails")
    cho = _cho(R)
    if r == L:
        RiB = sla.cho_solve(cho, B)
        return RiB @ np.linalg.solve(B.T @ RiB, A.T)
    Ur = U[:, :r]
    rhs = (Vt[:r] @ A.T) / s[:r, None]
    RiU = sla.cho_solve(cho, Ur)
    return RiU @ np.linalg.solve(Ur.T @ RiU, rhs)


def _cho(R):
    try:
        return sla.cho_factor(R)
    except np.linalg.LinAlgError:
        raise SingularCovarianceError("covariance matrix is not positive definite") from None


def _gevd_top(A, B, Q):
    w, V = generalized_eigh(A, B)
    return w, canonical_signs(V[:, :Q])


def gevd_solve(stats: StatisticsSet, Q: int, tie_break_reference=None, gap_tol: float = 1e-8) -> np.ndarray:
    return GevdProblem(Q, gap_tol=gap_tol).solve(stats, _wrap(tie_break_reference)).X[0]


def tro_solve(stats: StatisticsSet, Q: int, tie_break_reference=None, tol: float = 1e-12) -> np.ndarray:
    return TroProblem(Q, rho_tol=tol).solve(stats, _wrap(tie_break_reference)).X[0]


def cca_solve(stats: StatisticsSet, Q: int, tie_break_reference=None):
    X, W = CcaProblem(Q).solve(stats, tie_break_reference).X
    return X, W


def _wrap(ref):
    if ref is None or isinstance(ref, tuple):
        return ref
    return (ref,)


def trace_ratio_iteration(R_yy, R_vv, Gamma, Q, tol=1e-12, max_iter=500):
    """Fixed point of rho <- tr(X'R_yy X)/tr(X'R_vv X), X <- GEVD_Q(R_yy - rho R_vv, Gamma).

    Returns (X, rho, eigenvalues of the final pencil).
    """
    w, X = _gevd_top(R_yy, Gamma, Q)
    rho = np.trace(X.T @ R_yy @ X) / np.trace(X.T @ R_vv @ X)
    for _ in range(max_iter):
        w, X = _gevd_top(R_yy - rho * R_vv, Gamma, Q)
        new = np.trace(X.T @ R_yy @ X) / np.trace(X.T @ R_vv @ X)
        done = abs(new - rho) <= tol * max(1.0, abs(rho))
        rho = max(rho, new)
        if done:
            break
    return X, rho, w


# -- problem classes ----------------------------------------------------------


class SfoProblem:
    """Common interface.  Subclasses fill in the evaluators and ``solve``."""

    name = "sfo"
    n_vars = 1
    v_var = 0  # which variable compresses the second signal v
    alignment = "none"

    def __init__(self, Q: int):
        self.Q = int(Q)

    def n_constraints(self, stats: StatisticsSet) -> int:
        return 0

    def equality_mask(self, stats) -> np.ndarray:
        return np.ones(self.n_constraints(stats), dtype=bool)

    def objective(self, X, stats) -> float:
        raise NotImplementedError

    def gradient(self, X, stats) -> tuple:
        raise NotImplementedError

    def constraints(self, X, stats) -> np.ndarray:
        return np.zeros(0)

    def constraint_gradients(self, X, stats) -> list:
        return []

    def solve(self, stats, reference=None) -> Solution:
        raise NotImplementedError

    def initial_point(self, stats, rng) -> tuple:
        return tuple(rng.standard_normal((stats.M, self.Q)) for _ in range(self.n_vars))

    def max_violation(self, X, stats) -> float:
        h = self.constraints(X, stats)
        if h.size == 0:
            return 0.0
        eq = self.equality_mask(stats)
        viol = np.where(eq, np.abs(h), np.maximum(h, 0.0))
        return float(viol.max())

    def _align(self, X, reference):
        if reference is None or self.alignment == "none":
            return X
        s = column_signs(X, reference)
        return tuple(x * s for x in X)

    def config(self) -> dict:
        return {"id": self.name, "Q": self.Q}


class MmseProblem(SfoProblem):
    name = "mmse"

    def objective(self, X, stats):
        (x,) = X
        f = np.trace(x.T @ stats.R_yy @ x) - 2 * np.trace(x.T @ stats.R_yd)
        if stats.R_dd is not None:
            f += np.trace(stats.R_dd)
        return float(f)

    def gradient(self, X, stats):
        (x,) = X
        return (2 * (stats.R_yy @ x - stats.R_yd),)

    def solve(self, stats, reference=None):
        return Solution((mmse_solve(stats),))


class RidgeProblem(MmseProblem):
    """MMSE with the penalty ``alpha tr(X^T X)`` (Gamma-weighted on local data)."""

    name = "ridge"

    def __init__(self, Q, alpha: float = 0.1):
        super().__init__(Q)
        if alpha <= 0:
            raise ValueError("ridge parameter alpha must be positive")
        self.alpha = float(alpha)

    def objective(self, X, stats):
        (x,) = X
        return super().objective(X, stats) + self.alpha * float(np.trace(x.T @ stats.gamma() @ x))

    def gradient(self, X, stats):
        (x,) = X
        return (super().gradient(X, stats)[0] + 2 * self.alpha * stats.gamma() @ x,)

    def solve(self, stats, reference=None):
        return Solution((ridge_solve(stats, self.alpha),))

    def config(self):
        return {**super().config(), "alpha": self.alpha}


class LcmvProblem(SfoProblem):
    """min tr(X^T R_yy X) s.t. X^T B = A; constraint (m, l) is x_m^T b_l - A_ml."""

    name = "lcmv"

    def n_constraints(self, stats):
        return self.Q * stats.B.shape[1]

    def objective(self, X, stats):
        (x,) = X
        return float(np.trace(x.T @ stats.R_yy @ x))

    def gradient(self, X, stats):
        (x,) = X
        return (2 * stats.R_yy @ x,)

    def constraints(self, X, stats):
        (x,) = X
        return (x.T @ stats.B - stats.A).reshape(-1)

    def constraint_gradients(self, X, stats):
        (x,) = X
        B = stats.B
        out = []
        for m in range(self.Q):
            for l in range(B.shape[1]):
                g = np.zeros_like(x)
                g[:, m] = B[:, l]
                out.append((g,))
        return out

    def solve(self, stats, reference=None, allow_rank_deficient=True):
        return Solution((lcmv_solve(stats, allow_rank_deficient=allow_rank_deficient),))

    def initial_point(self, stats, rng):
        # minimal-norm correction of a Gaussian draw onto X^T B = A
        Z = rng.standard_normal((stats.M, self.Q))
        B = stats.B
        return (Z - B @ np.linalg.lstsq(B.T @ B, B.T @ Z - stats.A.T, rcond=None)[0],)


class _EigenProblem(SfoProblem):
    alignment = "sign"

    def __init__(self, Q, gap_tol: float = 1e-8):
        super().__init__(Q)
        self.gap_tol = float(gap_tol)

    def _solution(self, X, eigvals, reference):
        gap = _gap(eigvals, self.Q)
        return Solution(self._align(X, reference), eigvals, gap, bool(gap < self.gap_tol))

    def initial_point(self, stats, rng):
        # optimum over the column space of a random M x (Q+1) congruence
        P = min(stats.M, self.Q + 1)
        Z = rng.standard_normal((stats.M, P))
        from .compression import congruence_statistics

        sol = self.solve(congruence_statistics(stats, Z))
        return tuple(Z @ x for x in sol.X)


class GevdProblem(_EigenProblem):
    """max tr(X^T R_yy X) s.t. X^T R_vv X = I (minimised as its negative)."""

    name = "gevd"

    def n_constraints(self, stats):
        return self.Q * (self.Q + 1) // 2

    def objective(self, X, stats):
        (x,) = X
        return -float(np.trace(x.T @ stats.R_yy @ x))

    def gradient(self, X, stats):
        (x,) = X
        return (-2 * stats.R_yy @ x,)

    def constraints(self, X, stats):
        return _quadratic_constraints(X[0], stats.R_vv, _stiefel_pairs(self.Q))

    def constraint_gradients(self, X, stats):
        return [(g,) for g in _quadratic_constraint_grads(X[0], stats.R_vv, _stiefel_pairs(self.Q))]

    def solve(self, stats, reference=None):
        w, X = _gevd_top(stats.R_yy, stats.R_vv, self.Q)
        return self._solution((X,), w, reference)


class TroProblem(_EigenProblem):
    """max tr(X^T R_yy X) / tr(X^T R_vv X) s.t. X^T Gamma X = I."""

    name = "tro"

    def __init__(self, Q, gap_tol=1e-8, rho_tol=1e-12):
        super().__init__(Q, gap_tol)
        self.rho_tol = rho_tol

    def n_constraints(self, stats):
        return self.Q * (self.Q + 1) // 2

    def objective(self, X, stats):
        (x,) = X
        return -float(np.trace(x.T @ stats.R_yy @ x) / np.trace(x.T @ stats.R_vv @ x))

    def gradient(self, X, stats):
        (x,) = X
        num = np.trace(x.T @ stats.R_yy @ x)
        den = np.trace(x.T @ stats.R_vv @ x)
        return (-(2 * stats.R_yy @ x * den - 2 * stats.R_vv @ x * num) / den**2,)

    def constraints(self, X, stats):
        return _quadratic_constraints(X[0], stats.gamma(), _stiefel_pairs(self.Q))

    def constraint_gradients(self, X, stats):
        return [(g,) for g in _quadratic_constraint_grads(X[0], stats.gamma(), _stiefel_pairs(self.Q))]

    def solve(self, stats, reference=None):
        X, _, w = trace_ratio_iteration(stats.R_yy, stats.R_vv, stats.gamma(), self.Q, tol=self.rho_tol)
        return self._solution((X,), w, reference)


class CcaProblem(_EigenProblem):
    """max tr(X^T R_yv W) s.t. X^T R_yy X = I, W^T R_vv W = I.

    Constraints are the X-block pairs followed by the W-block pairs.
    """

    name = "cca"
    n_vars = 2
    v_var = 1

    def n_constraints(self, stats):
        return self.Q * (self.Q + 1)

    def objective(self, X, stats):
        x, w = X
        return -float(np.trace(x.T @ stats.R_yv @ w))

    def gradient(self, X, stats):
        x, w = X
        return (-stats.R_yv @ w, -stats.R_yv.T @ x)

    def constraints(self, X, stats):
        x, w = X
        pairs = _stiefel_pairs(self.Q)
        return np.concatenate([_quadratic_constraints(x, stats.R_yy, pairs), _quadratic_constraints(w, stats.R_vv, pairs)])

    def constraint_gradients(self, X, stats):
        x, w = X
        pairs = _stiefel_pairs(self.Q)
        gx = [(g, np.zeros_like(w)) for g in _quadratic_constraint_grads(x, stats.R_yy, pairs)]
        gw = [(np.zeros_like(x), g) for g in _quadratic_constraint_grads(w, stats.R_vv, pairs)]
        return gx + gw

    def solve(self, stats, reference=None):
        R_vy = stats.R_yv.T
        cho = _cho(stats.R_vv)
        S = stats.R_yv @ sla.cho_solve(cho, R_vy)
        lam, V = generalized_eigh(0.5 * (S + S.T), stats.R_yy)
        X = canonical_signs(V[:, : self.Q])
        top = lam[: self.Q]
        W = sla.cho_solve(cho, R_vy @ X) / np.sqrt(np.maximum(top, np.finfo(float).tiny))
        sol = self._solution((X, W), lam, reference)
        if np.any(top <= 0):
            sol = Solution(sol.X, sol.eigenvalues, 0.0, True)
        return sol


PROBLEMS = {cls.name: cls for cls in (MmseProblem, RidgeProblem, LcmvProblem, GevdProblem, TroProblem, CcaProblem)}


def make_problem(name: str, Q: int, **params) -> SfoProblem:
    try:
        cls = PROBLEMS[name]
    except KeyError:
        raise ValueError(f"unknown problem {name!r}; choose from {sorted(PROBLEMS)}") from None
    return cls(Q, **params)


# -- KKT residual -------------------------------------------------------------


def _flat(tup):
    return np.concatenate([np.asarray(t).reshape(-1, order="F") for t in tup])


def kkt_residual(problem: SfoProblem, X, stats, active_tol: float = 1e-8) -> KktReport:
    """Least-squares multipliers and first-order optimality residuals at ``X``.

    Never raises; meant for diagnostics on arbitrary iterates.
    """
    X = X if isinstance(X, tuple) else (X,)
    g = _flat(problem.gradient(X, stats))
    h = problem.constraints(X, stats)
    if h.size == 0:
        return KktReport(np.zeros(0), float(np.linalg.norm(g)), 0.0, 0.0, True)
    eq = problem.equality_mask(stats)
    active = np.flatnonzero(eq | (np.abs(h) <= active_tol))
    grads = problem.constraint_gradients(X, stats)
    G = np.column_stack([_flat(grads[j]) for j in active]) if active.size else np.zeros((g.size, 0))
    lam_active = np.linalg.lstsq(G, -g, rcond=None)[0] if active.size else np.zeros(0)
    lam = np.zeros(h.size)
    lam[active] = lam_active
    stationarity = float(np.linalg.norm(g + G @ lam_active))
    primal = float(np.max(np.where(eq, np.abs(h), np.maximum(h, 0.0))))
    ineq = ~eq
    comp = float(np.max(np.abs(lam[ineq] * h[ineq]))) if ineq.any() else 0.0
    dual_ok = bool(np.all(lam[ineq] >= -active_tol)) if ineq.any() else True
    return KktReport(lam, stationarity, primal, comp, dual_ok, active)
