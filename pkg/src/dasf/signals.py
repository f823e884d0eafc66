"""Synthetic stationary multichannel signals with known second-order statistics.

Every signal is a linear mixture of a shared vector of unit-variance latent
sources plus its own independent Gaussian noise::

    y(t) = mix_y s(t) + n_y(t)
    v(t) = mix_v s(t) + n_v(t)
    d(t) = mix_d s(t) + n_d(t)

so all (cross-)covariances are available in closed form.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np


def _sym(R):
    return 0.5 * (R + R.T)


def _check_spd(name, R):
    try:
        np.linalg.cholesky(R)
    except np.linalg.LinAlgError:
        raise ValueError(f"{name} noise covariance is not positive definite") from None


@dataclass(frozen=True)
class SignalModel:
    mix_y: np.ndarray
    noise_y: np.ndarray
    mix_v: np.ndarray | None = None
    noise_v: np.ndarray | None = None
    mix_d: np.ndarray | None = None
    noise_d: np.ndarray | None = None
    B: np.ndarray | None = None
    A: np.ndarray | None = None
    seed: int = 0

    @property
    def M(self) -> int:
        return self.mix_y.shape[0]

    @property
    def n_sources(self) -> int:
        return self.mix_y.shape[1]


@dataclass(frozen=True)
class StatisticsSet:
    """Covariances and deterministic parameters consumed by the problem solvers.

    ``Gamma`` is the Gram matrix of an implicit ``X^T X`` term; ``None`` means the
    identity, which is what the global problem always uses.
    """

    R_yy: np.ndarray
    R_vv: np.ndarray | None = None
    R_yv: np.ndarray | None = None
    R_yd: np.ndarray | None = None
    R_dd: np.ndarray | None = None
    B: np.ndarray | None = None
    A: np.ndarray | None = None
    Gamma: np.ndarray | None = None

    @property
    def M(self) -> int:
        return self.R_yy.shape[0]

    def gamma(self) -> np.ndarray:
        return np.eye(self.M) if self.Gamma is None else self.Gamma

    def with_(self, **kw) -> "StatisticsSet":
        return replace(self, **kw)


@dataclass(frozen=True)
class SampleBatch:
    y: np.ndarray
    v: np.ndarray | None = None
    d: np.ndarray | None = None

    @property
    def N(self) -> int:
        return self.y.shape[0]


def exact_statistics(model: SignalModel) -> StatisticsSet:
    _check_spd("y", model.noise_y)
    R_yy = _sym(model.mix_y @ model.mix_y.T + model.noise_y)
    R_vv = R_yv = R_yd = R_dd = None
    if model.mix_v is not None:
        noise_v = model.noise_v if model.noise_v is not None else np.zeros((model.M, model.M))
        if model.noise_v is not None:
            _check_spd("v", noise_v)
        R_vv = _sym(model.mix_v @ model.mix_v.T + noise_v)
        R_yv = model.mix_y @ model.mix_v.T
    if model.mix_d is not None:
        R_yd = model.mix_y @ model.mix_d.T
        R_dd = model.mix_d @ model.mix_d.T
        if model.noise_d is not None:
            R_dd = R_dd + model.noise_d
        R_dd = _sym(R_dd)
    return StatisticsSet(R_yy=R_yy, R_vv=R_vv, R_yv=R_yv, R_yd=R_yd, R_dd=R_dd, B=model.B, A=model.A)


def _noise(rng, cov, N):
    if cov is None:
        return 0.0
    L = np.linalg.cholesky(cov)
    return rng.standard_normal((N, cov.shape[0])) @ L.T


def sample_batch(model: SignalModel, N: int, seed: int) -> SampleBatch:
    """Draw ``N`` i.i.d. Gaussian samples (rows) of y, and of v and d when modelled."""
    if N < 1:
        raise ValueError("N must be at least 1")
    rng = np.random.default_rng(seed)
    s = rng.standard_normal((N, model.n_sources))
    y = s @ model.mix_y.T + _noise(rng, model.noise_y, N)
    v = d = None
    if model.mix_v is not None:
        v = s @ model.mix_v.T + _noise(rng, model.noise_v, N)
    if model.mix_d is not None:
        d = s @ model.mix_d.T + _noise(rng, model.noise_d, N)
    return SampleBatch(y=y, v=v, d=d)


def estimate_statistics(batch: SampleBatch, B=None, A=None) -> StatisticsSet:
    """Plain sample averages ``(1/N) sum y y^T`` etc., symmetrized."""
    y, v, d = batch.y, batch.v, batch.d
    N = y.shape[0]
    if N < 1:
        raise ValueError("empty batch")
    for name, other in (("v", v), ("d", d)):
        if other is not None and other.shape[0] != N:
            raise ValueError(f"{name} has {other.shape[0]} samples, y has {N}")
    if B is not None and B.shape[0] != y.shape[1]:
        raise ValueError(f"B has {B.shape[0]} rows, y has {y.shape[1]} channels")
    R_yy = _sym(y.T @ y / N)
    R_vv = R_yv = R_yd = R_dd = None
    if v is not None:
        R_vv = _sym(v.T @ v / N)
        R_yv = y.T @ v / N
    if d is not None:
        R_yd = y.T @ d / N
        R_dd = _sym(d.T @ d / N)
    return StatisticsSet(R_yy=R_yy, R_vv=R_vv, R_yv=R_yv, R_yd=R_yd, R_dd=R_dd, B=B, A=A)
