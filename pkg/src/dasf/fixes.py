"""Remedies for near-violations of the convergence conditions.

* Node splitting: when the D-matrix witness at the updating node is small, the
  nodes behind each neighbor send two compressed streams built from a random
  split ``X_k = X_{k,a} + X_{k,b}``.  The local problem gains one extra ``G``
  block per neighbor; after the update the blocks merge back automatically.
  The streams carry ``X_k`` and ``X_{k,b}``, which span the same local search
  space as ``X_{k,a}`` and ``X_{k,b}`` but keep the original D rows and append
  new ones, so the D-matrix singular values cannot drop.
* Oscillation guard: an update that barely changes the objective while moving
  the iterate, at a node whose local eigengap nearly closes, is skipped.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .compression import Stream, TransitionMatrix


class DegenerateSolutionError(RuntimeError):
    pass


@dataclass(frozen=True)
class FixConfig:
    split_enabled: bool = False
    split_trigger: float = 1e-4  # relative sigma_J of the stacked D matrices
    split_scope: str = "all"  # all | neighbors
    split_scale: float = 0.1  # perturbation size relative to ||X_k||
    split_retries: int = 10
    guard_enabled: bool = False
    osc_eps: float = 1e-6  # |delta f| / ||delta X|| threshold
    gap_threshold: float = 1e-6  # relative eigengap threshold
    on_degenerate: str = "continue"  # continue | abort

    def __post_init__(self):
        for name in ("split_trigger", "split_scale", "osc_eps", "gap_threshold"):
            if not getattr(self, name) > 0:
                raise ValueError(f"fixes.{name} must be positive")
        if self.split_scope not in ("all", "neighbors"):
            raise ValueError("fixes.split_scope must be 'all' or 'neighbors'")
        if self.on_degenerate not in ("continue", "abort"):
            raise ValueError("fixes.on_degenerate must be 'continue' or 'abort'")
        if self.split_retries < 1:
            raise ValueError("fixes.split_retries must be at least 1")

    def to_dict(self):
        return asdict(self)


def _full_rank(A: np.ndarray) -> bool:
    r = min(A.shape)
    s = np.linalg.svd(A, compute_uv=False)
    return s.size >= r and s[0] > 0 and s[r - 1] > 1e-10 * s[0]


def split_block(X_k: np.ndarray, rng, scale: float = 0.1, retries: int = 10):
    """Random ``(X_a, X_b)`` with ``X_a + X_b == X_k`` and both of rank min(M_k, Q)."""
    size = scale * max(np.linalg.norm(X_k), 1.0) / np.sqrt(X_k.size)
    for _ in range(retries):
        a = 0.5 * X_k + size * rng.standard_normal(X_k.shape)
        b = X_k - a
        if _full_rank(a) and _full_rank(b):
            return a, b
    raise np.linalg.LinAlgError(f"no full-rank split found in {retries} draws")


def split_count(C: TransitionMatrix) -> int:
    """Neighbors currently sending two streams."""
    return sum(1 for c in C.stream_counts().values() if c > 1)


def _pair_rank_ok(first: dict, second: dict, Q: int) -> bool:
    """Both streams of one neighbor together must have rank 2Q on the subtree rows."""
    keys = sorted(first)
    A = np.vstack([first[k] for k in keys])
    B = np.vstack([second.get(k, np.zeros_like(first[k])) for k in keys])
    P = np.hstack([A, B])
    return P.shape[0] >= 2 * Q and _full_rank(P)


def split_transition(C: TransitionMatrix, rng, scope: str = "all", scale: float = 0.1, retries: int = 10) -> TransitionMatrix:
    """Double every neighbor's stream where the subtree has room for it.

    With scope ``neighbors`` only the direct neighbor's block is split; the
    rest of its subtree stays in the first stream.  A neighbor whose subtree
    cannot carry 2Q independent channels keeps a single stream, otherwise the
    local covariance would be singular.
    """
    streams = []
    for st in C.streams:
        for _ in range(retries):
            first, second = {}, {}
            for k, Xk in st.blocks.items():
                first[k] = Xk
                if scope == "all" or k == st.neighbor:
                    second[k] = split_block(Xk, rng, scale, retries)[1]
            if _pair_rank_ok(first, second, C.Q):
                streams += [Stream(st.neighbor, first), Stream(st.neighbor, second)]
                break
        else:
            streams.append(st)
    return TransitionMatrix(C.q, C.offsets, C.own, tuple(streams), C.Q)


def maybe_split(Cs: list, witness: float, config: FixConfig, rng) -> tuple[list, bool]:
    """Split all variables' transition matrices when the witness is below the trigger."""
    if not config.split_enabled or not (witness < config.split_trigger):
        return Cs, False
    out = [split_transition(C, rng, config.split_scope, config.split_scale, config.split_retries) for C in Cs]
    return out, any(split_count(C) > 0 for C in out)


def oscillation_guard(f_prev: float, f_next: float, step_norm: float, gap: float, config: FixConfig) -> str:
    """``"skip"`` when the update is a near-flat move at a near-degenerate node."""
    if not config.guard_enabled:
        return "continue"
    if step_norm <= 1e-14 * max(1.0, abs(f_prev)):
        return "continue"  # converged, not oscillating
    ratio = abs(f_next - f_prev) / step_norm
    if ratio <= config.osc_eps and gap < config.gap_threshold:
        return "skip"
    return "continue"
