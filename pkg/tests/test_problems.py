import itertools

import numpy as np
import pytest
from conftest import problem_stats, random_spd
from hypothesis import given
from hypothesis import strategies as st
from scipy import linalg as sla

from dasf.problems import (
    PROBLEMS,
    ConstraintRankError,
    SingularCovarianceError,
    canonical_signs,
    cca_solve,
    column_signs,
    gevd_solve,
    kkt_residual,
    lcmv_solve,
    make_problem,
    mmse_solve,
    ridge_solve,
    tro_solve,
)
from dasf.signals import StatisticsSet

ALL = sorted(PROBLEMS)


def random_point(problem, stats, rng):
    return tuple(rng.standard_normal((stats.M, problem.Q)) for _ in range(problem.n_vars))


# -- MMSE / ridge -----------------------------------------------------------------


def test_mmse_identity_covariance_returns_cross_covariance(rng):
    R_yd = rng.standard_normal((4, 2))
    np.testing.assert_allclose(mmse_solve(StatisticsSet(np.eye(4), R_yd=R_yd)), R_yd)


def test_mmse_noiseless_selection():
    # d = first Q channels of y, so X* selects them
    rng = np.random.default_rng(0)
    R = random_spd(rng, 5)
    X = mmse_solve(StatisticsSet(R, R_yd=R[:, :2]))
    np.testing.assert_allclose(X, np.eye(5)[:, :2], atol=1e-12)


def test_mmse_matches_linear_solve_oracle(rng):
    R, R_yd = random_spd(rng, 7), rng.standard_normal((7, 3))
    X = mmse_solve(StatisticsSet(R, R_yd=R_yd))
    np.testing.assert_allclose(X, np.linalg.solve(R, R_yd), rtol=1e-10, atol=1e-12)
    assert np.linalg.norm(R @ X - R_yd) <= 1e-10 * np.linalg.norm(R_yd)


def test_mmse_singular_advises_ridge():
    with pytest.raises(SingularCovarianceError, match="ridge"):
        mmse_solve(StatisticsSet(np.zeros((3, 3)), R_yd=np.ones((3, 1))))


def test_ridge_small_alpha_approaches_mmse(rng):
    s = StatisticsSet(random_spd(rng, 5), R_yd=rng.standard_normal((5, 2)))
    np.testing.assert_allclose(ridge_solve(s, 1e-10), mmse_solve(s), atol=1e-8)


def test_ridge_zero_covariance():
    R_yd = np.arange(6.0).reshape(3, 2)
    np.testing.assert_allclose(ridge_solve(StatisticsSet(np.zeros((3, 3)), R_yd=R_yd), 1.0), R_yd)


def test_ridge_singular_covariance(rng):
    a = rng.standard_normal((5, 1))
    s = StatisticsSet(a @ a.T, R_yd=rng.standard_normal((5, 2)))
    X = ridge_solve(s, 0.1)
    assert np.linalg.norm((s.R_yy + 0.1 * np.eye(5)) @ X - s.R_yd) <= 1e-10 * np.linalg.norm(s.R_yd)


def test_ridge_rejects_nonpositive_alpha(rng):
    s = StatisticsSet(np.eye(2), R_yd=np.ones((2, 1)))
    with pytest.raises(ValueError):
        ridge_solve(s, 0.0)
    with pytest.raises(ValueError):
        make_problem("ridge", 1, alpha=-1.0)


# -- LCMV --------------------------------------------------------------------------


def test_lcmv_orthonormal_b_identity_r(rng):
    B = np.linalg.qr(rng.standard_normal((6, 2)))[0]
    A = rng.standard_normal((3, 2))
    np.testing.assert_allclose(lcmv_solve(StatisticsSet(np.eye(6), B=B, A=A)), B @ A.T, atol=1e-12)


def test_lcmv_matches_kkt_system_oracle(rng):
    M, Q, L = 7, 2, 3
    R, B, A = random_spd(rng, M), rng.standard_normal((M, L)), rng.standard_normal((Q, L))
    X = lcmv_solve(StatisticsSet(R, B=B, A=A))
    # [2R B; B^T 0] [X; Lam^T] = [0; A^T]
    K = np.block([[2 * R, B], [B.T, np.zeros((L, L))]])
    sol = np.linalg.solve(K, np.vstack([np.zeros((M, Q)), A.T]))
    np.testing.assert_allclose(X, sol[:M], rtol=1e-9, atol=1e-10)
    assert np.abs(X.T @ B - A).max() <= 1e-10


def test_lcmv_rank_deficient_b_rejected(rng):
    b = rng.standard_normal((5, 1))
    with pytest.raises(ConstraintRankError):
        lcmv_solve(StatisticsSet(np.eye(5), B=np.hstack([b, 2 * b]), A=np.ones((1, 2))))


def test_lcmv_rank_deficient_consistent_system_allowed(rng):
    b = rng.standard_normal((5, 1))
    X = lcmv_solve(StatisticsSet(np.eye(5), B=np.hstack([b, 2 * b]), A=np.array([[1.0, 2.0]])), allow_rank_deficient=True)
    np.testing.assert_allclose(X.T @ np.hstack([b, 2 * b]), [[1.0, 2.0]], atol=1e-12)


# -- GEVD / TRO / CCA ----------------------------------------------------------------


def test_gevd_diagonal_picks_largest_entries():
    R = np.diag([1.0, 5.0, 3.0, 2.0])
    X = gevd_solve(StatisticsSet(R, R_vv=np.eye(4)), 2)
    np.testing.assert_allclose(X, np.eye(4)[:, [1, 2]], atol=1e-12)


def test_gevd_matches_dense_oracle(rng):
    A, B = random_spd(rng, 6), random_spd(rng, 6)
    s = StatisticsSet(A, R_vv=B)
    sol = make_problem("gevd", 3).solve(s)
    w = sla.eigh(A, B, eigvals_only=True)[::-1]
    np.testing.assert_allclose(sol.eigenvalues, w, rtol=1e-9)
    X = sol.X[0]
    np.testing.assert_allclose(A @ X - B @ X * w[:3], 0, atol=1e-8)
    np.testing.assert_allclose(X.T @ B @ X, np.eye(3), atol=1e-9)
    assert abs(-sol_obj(s, X) - w[:3].sum()) <= 1e-9 * w[:3].sum()


def sol_obj(s, X):
    return make_problem("gevd", X.shape[1]).objective((X,), s)


def test_gevd_sign_convention_and_tie_break(rng):
    s = StatisticsSet(random_spd(rng, 5), R_vv=random_spd(rng, 5))
    X = gevd_solve(s, 2)
    idx = np.argmax(np.abs(X), axis=0)
    assert np.all(X[idx, [0, 1]] > 0)
    ref = X * np.array([-1.0, 1.0])
    np.testing.assert_allclose(gevd_solve(s, 2, tie_break_reference=ref), ref)


def test_gevd_degenerate_flagged():
    s = StatisticsSet(np.diag([2.0, 2.0, 1.0]), R_vv=np.eye(3))
    assert make_problem("gevd", 1).solve(s).degenerate


def test_tro_identity_denominator_is_pca(rng):
    R = random_spd(rng, 6)
    s = StatisticsSet(R, R_vv=np.eye(6))
    X = tro_solve(s, 2)
    w = np.linalg.eigvalsh(R)[::-1]
    rho = np.trace(X.T @ R @ X) / np.trace(X.T @ X)
    assert rho == pytest.approx(w[:2].mean(), rel=1e-10)
    np.testing.assert_allclose(X.T @ X, np.eye(2), atol=1e-10)


def test_tro_beats_random_feasible_points(rng):
    A, B = random_spd(rng, 8), random_spd(rng, 8)
    X = tro_solve(StatisticsSet(A, R_vv=B), 2)
    rho = np.trace(X.T @ A @ X) / np.trace(X.T @ B @ X)
    for _ in range(1000):
        Z = np.linalg.qr(rng.standard_normal((8, 2)))[0]
        assert np.trace(Z.T @ A @ Z) / np.trace(Z.T @ B @ Z) <= rho + 1e-12


def test_cca_identical_signals_perfectly_correlated(rng):
    R = random_spd(rng, 4)
    sol = make_problem("cca", 2).solve(StatisticsSet(R, R_vv=R, R_yv=R))
    np.testing.assert_allclose(sol.eigenvalues[:2], 1.0, atol=1e-10)


def test_cca_matches_whitened_svd_oracle(rng):
    s = problem_stats("cca", rng, M=5)
    X, W = cca_solve(s, 2)
    Wy = np.linalg.inv(sla.sqrtm(s.R_yy)).real
    Wv = np.linalg.inv(sla.sqrtm(s.R_vv)).real
    rho = np.linalg.svd(Wy @ s.R_yv @ Wv, compute_uv=False)
    np.testing.assert_allclose(np.diag(X.T @ s.R_yv @ W), rho[:2], rtol=1e-8)
    np.testing.assert_allclose(X.T @ s.R_yy @ X, np.eye(2), atol=1e-9)
    np.testing.assert_allclose(W.T @ s.R_vv @ W, np.eye(2), atol=1e-9)


# -- generic properties ---------------------------------------------------------------


def finite_difference(fun, X, h=1e-6):
    out = []
    for v, x in enumerate(X):
        g = np.zeros_like(x)
        for idx in np.ndindex(x.shape):
            plus = [y.copy() for y in X]
            minus = [y.copy() for y in X]
            plus[v][idx] += h
            minus[v][idx] -= h
            g[idx] = (fun(tuple(plus)) - fun(tuple(minus))) / (2 * h)
        out.append(g)
    return out


def _rel(a, b):
    num = np.sqrt(sum(np.sum((x - y) ** 2) for x, y in zip(a, b)))
    den = max(np.sqrt(sum(np.sum(y**2) for y in b)), 1e-12)
    return num / den


@pytest.mark.parametrize("name", ALL)
def test_gradients_match_finite_differences(name):
    rng = np.random.default_rng(11)
    for _ in range(20):
        s = problem_stats(name, rng, M=5, Q=2, gamma=name in ("ridge", "tro"))
        p = make_problem(name, 2)
        X = random_point(p, s, rng)
        assert _rel(p.gradient(X, s), finite_difference(lambda Y: p.objective(Y, s), X)) <= 1e-5
        for j, g in enumerate(p.constraint_gradients(X, s)):
            fd = finite_difference(lambda Y: p.constraints(Y, s)[j], X)
            assert _rel(g, fd) <= 1e-5


@pytest.mark.parametrize("name", ALL)
def test_solver_output_feasible_and_stationary(name):
    rng = np.random.default_rng(5)
    for _ in range(5):
        s = problem_stats(name, rng, M=6, Q=2, L=2)
        p = make_problem(name, 2)
        X = p.solve(s).X
        assert p.max_violation(X, s) <= 1e-9
        assert kkt_residual(p, X, s).stationarity <= 1e-7


@pytest.mark.parametrize("name", ["gevd", "tro", "cca"])
def test_eigen_solvers_deterministic(name, rng):
    s = problem_stats(name, rng)
    p = make_problem(name, 2)
    a, b = p.solve(s).X, p.solve(s).X
    for x, y in zip(a, b):
        np.testing.assert_array_equal(x, y)


@pytest.mark.parametrize("name", ALL)
def test_initial_point_is_feasible(name, rng):
    s = problem_stats(name, rng, M=6, Q=2, L=2)
    p = make_problem(name, 2)
    X = p.initial_point(s, rng)
    assert p.max_violation(X, s) <= 1e-9


# -- KKT residual --------------------------------------------------------------------


def test_kkt_mmse_is_normal_equation_residual(rng):
    s = problem_stats("mmse", rng)
    p = make_problem("mmse", 2)
    X = mmse_solve(s)
    rep = kkt_residual(p, X, s)
    assert rep.stationarity <= 1e-9
    assert rep.multipliers.size == 0


def test_kkt_lcmv_multipliers_match_closed_form(rng):
    s = problem_stats("lcmv", rng, M=6, Q=2, L=3)
    p = make_problem("lcmv", 2)
    X = lcmv_solve(s)
    rep = kkt_residual(p, X, s)
    assert rep.stationarity <= 1e-8
    RiB = np.linalg.solve(s.R_yy, s.B)
    Lam = -2 * np.linalg.solve(s.B.T @ RiB, s.A.T).T  # Q x L
    np.testing.assert_allclose(rep.multipliers, Lam.reshape(-1), rtol=1e-8)


def test_kkt_lcmv_random_feasible_point_not_stationary(rng):
    s = problem_stats("lcmv", rng, M=6, Q=2, L=2)
    p = make_problem("lcmv", 2)
    X = p.initial_point(s, rng)
    assert p.max_violation(X, s) <= 1e-9
    assert kkt_residual(p, X, s).stationarity > 1e-3


def test_unknown_problem_rejected():
    with pytest.raises(ValueError, match="unknown problem"):
        make_problem("svm", 1)


# -- sign handling ---------------------------------------------------------------------


@given(st.integers(0, 10_000), st.integers(1, 4))
def test_column_signs_is_exhaustive_minimiser(seed, Q):
    r = np.random.default_rng(seed)
    X, ref = r.standard_normal((5, Q)), r.standard_normal((5, Q))
    s = column_signs((X,), (ref,))
    best = min(np.sum((X * np.array(p) - ref) ** 2) for p in itertools.product([-1, 1], repeat=Q))
    assert np.sum((X * s - ref) ** 2) <= best + 1e-12


@given(st.integers(0, 10_000))
def test_canonical_signs_idempotent(seed):
    X = np.random.default_rng(seed).standard_normal((4, 3))
    Y = canonical_signs(X)
    np.testing.assert_array_equal(canonical_signs(Y), Y)
    np.testing.assert_array_equal(np.abs(Y), np.abs(X))
