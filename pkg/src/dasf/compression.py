"""Per-node compression, in-network fusion and the local/global variable map.

The transition matrix ``C_q`` is kept block-sparse: an identity block for the
updating node's own channels plus one *stream* per block-column.  A stream
belongs to a neighbor ``n`` of ``q`` and carries a ``M_k x Q`` block for each
node ``k`` behind ``n``.  Normally there is one stream per neighbor; a node split
(see :mod:`dasf.fixes`) adds a second one.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .graph import NetworkGraph, PrunedTree, subtree_partition
from .signals import SampleBatch, StatisticsSet, estimate_statistics


@dataclass(frozen=True)
class Stream:
    neighbor: int
    blocks: dict  # node k -> M_k x Q block


@dataclass(frozen=True)
class TransitionMatrix:
    q: int
    offsets: np.ndarray  # length K+1 block offsets of the global variable
    own: np.ndarray  # current X_q, used for the local reference point
    streams: tuple[Stream, ...]
    Q: int

    @property
    def M(self) -> int:
        return int(self.offsets[-1])

    @property
    def M_q(self) -> int:
        return int(self.offsets[self.q + 1] - self.offsets[self.q])

    @property
    def n_local(self) -> int:
        return self.M_q + self.Q * len(self.streams)

    def _rows(self, k):
        return slice(int(self.offsets[k]), int(self.offsets[k + 1]))

    def _cols(self, s):
        start = self.M_q + s * self.Q
        return slice(start, start + self.Q)

    def compress(self, Y: np.ndarray) -> np.ndarray:
        """``C^T Y`` for ``Y`` with M rows, computed block by block."""
        out = np.empty((self.n_local,) + Y.shape[1:])
        out[: self.M_q] = Y[self._rows(self.q)]
        for s, st in enumerate(self.streams):
            acc = 0.0
            for k, Xk in st.blocks.items():
                acc = acc + Xk.T @ Y[self._rows(k)]
            out[self._cols(s)] = acc
        return out

    def congruence(self, R: np.ndarray) -> np.ndarray:
        """``C^T R C`` (exactly symmetric when R is)."""
        T = self.compress(R)
        out = self.compress(T.T).T
        return 0.5 * (out + out.T) if np.array_equal(R, R.T) else out

    def gram(self) -> np.ndarray:
        """``C^T C``; block diagonal because stream supports are disjoint per neighbor."""
        G = np.zeros((self.n_local, self.n_local))
        G[: self.M_q, : self.M_q] = np.eye(self.M_q)
        for s, a in enumerate(self.streams):
            for t, b in enumerate(self.streams):
                if a.neighbor != b.neighbor:
                    continue
                G[self._cols(s), self._cols(t)] = sum(a.blocks[k].T @ b.blocks[k] for k in a.blocks if k in b.blocks)
        return G

    def expand(self, Xt: np.ndarray) -> np.ndarray:
        """``C X~``: node q takes the first block, node k in B_nq gets sum_s X_k^(s) G_s."""
        if Xt.shape[0] != self.n_local:
            raise ValueError(f"local variable has {Xt.shape[0]} rows, expected {self.n_local}")
        X = np.zeros((self.M, Xt.shape[1]))
        X[self._rows(self.q)] = Xt[: self.M_q]
        for s, st in enumerate(self.streams):
            G = Xt[self._cols(s)]
            for k, Xk in st.blocks.items():
                X[self._rows(k)] += Xk @ G
        return X

    def reference(self) -> np.ndarray:
        """Local point ``[X_q; I; ...; I]`` that maps back to the current X.

        Extra streams of a split neighbor get ``G = 0``.
        """
        blocks, seen = [self.own], set()
        for st in self.streams:
            blocks.append(np.zeros((self.Q, self.Q)) if st.neighbor in seen else np.eye(self.Q))
            seen.add(st.neighbor)
        return np.vstack(blocks)

    def dense(self) -> np.ndarray:
        C = np.zeros((self.M, self.n_local))
        C[self._rows(self.q), : self.M_q] = np.eye(self.M_q)
        for s, st in enumerate(self.streams):
            for k, Xk in st.blocks.items():
                C[self._rows(k), self._cols(s)] = Xk
        return C

    def node_parts(self, k: int) -> list[np.ndarray]:
        """Blocks node k compresses with, in stream order."""
        return [st.blocks[k] for st in self.streams if k in st.blocks]

    def stream_counts(self) -> dict[int, int]:
        counts: dict[int, int] = {}
        for st in self.streams:
            counts[st.neighbor] = counts.get(st.neighbor, 0) + 1
        return counts


def build_transition_matrix(X: np.ndarray, tree: PrunedTree, graph: NetworkGraph) -> TransitionMatrix:
    off = graph.offsets()
    q = tree.root
    blocks = lambda ks: {k: X[off[k] : off[k + 1]] for k in ks}  # noqa: E731
    streams = tuple(Stream(n, blocks(members)) for n, members in sorted(subtree_partition(tree).items()))
    return TransitionMatrix(q, off, X[off[q] : off[q + 1]].copy(), streams, X.shape[1])


def expand(C: TransitionMatrix, Xt: np.ndarray) -> np.ndarray:
    return C.expand(Xt)


def congruence_statistics(stats: StatisticsSet, Z: np.ndarray) -> StatisticsSet:
    """Statistics of ``Z^T y`` for a dense matrix Z (used for random initial points)."""
    def cong(R):
        return None if R is None else 0.5 * (Z.T @ R @ Z + (Z.T @ R @ Z).T)

    return StatisticsSet(
        R_yy=cong(stats.R_yy),
        R_vv=cong(stats.R_vv),
        R_yv=None if stats.R_yv is None else Z.T @ stats.R_yv @ Z,
        R_yd=None if stats.R_yd is None else Z.T @ stats.R_yd,
        R_dd=stats.R_dd,
        B=None if stats.B is None else Z.T @ stats.B,
        A=stats.A,
        Gamma=Z.T @ stats.gamma() @ Z,
    )


@dataclass(frozen=True)
class LocalData:
    q: int
    stats: StatisticsSet
    samples: SampleBatch | None = None

    @property
    def n_local(self) -> int:
        return self.stats.M


def local_statistics(stats: StatisticsSet, C_y: TransitionMatrix, C_v: TransitionMatrix | None = None) -> LocalData:
    """Exact local statistics by congruence with the transition matrices.

    ``C_y`` compresses y, B and the implicit X^T X term; ``C_v`` compresses v
    (defaults to ``C_y``).
    """
    C_v = C_y if C_v is None else C_v
    opt = lambda R, f: None if R is None else f(R)  # noqa: E731
    local = StatisticsSet(
        R_yy=C_y.congruence(stats.R_yy),
        R_vv=opt(stats.R_vv, C_v.congruence),
        R_yv=opt(stats.R_yv, lambda R: C_v.compress(C_y.compress(R).T).T),
        R_yd=opt(stats.R_yd, C_y.compress),
        R_dd=stats.R_dd,
        B=opt(stats.B, C_y.compress),
        A=stats.A,
        Gamma=C_y.gram() if stats.Gamma is None else C_y.congruence(stats.Gamma),
    )
    return LocalData(C_y.q, local)


# -- sample path: compress, fuse and forward, stack --------------------------


def compress_node(X_k: np.ndarray, y_k: np.ndarray, B_k: np.ndarray | None = None):
    """Compressed samples ``y_k X_k`` (rows are time) and ``X_k^T B_k``."""
    if X_k.shape[0] != y_k.shape[1]:
        raise ValueError(f"X_k has {X_k.shape[0]} rows but y_k has {y_k.shape[1]} channels")
    B_hat = None
    if B_k is not None:
        if B_k.shape[0] != X_k.shape[0]:
            raise ValueError("B_k and X_k row counts differ")
        B_hat = X_k.T @ B_k
    return y_k @ X_k, B_hat


def _add(a, b):
    if a is None:
        return b
    if b is None:
        return a
    return tuple(None if x is None else x + y for x, y in zip(a, b))


def fuse_and_forward(tree: PrunedTree, data: dict) -> dict:
    """Sum per-node payloads toward the root.

    ``data`` maps every node to a tuple of arrays (``None`` entries allowed).
    Each non-root node forwards its own payload plus everything received from
    its children; returns, for each root neighbor n, what the root receives
    from n (the sum over the subtree behind n).
    """
    missing = set(range(tree.node_count)) - set(data)
    if missing:
        raise ValueError(f"no compressed data for nodes {sorted(missing)}")
    outgoing = {}
    for k in tree.postorder():
        if k == tree.root:
            continue
        msg = data[k]
        for c in tree.children[k]:
            msg = _add(msg, outgoing[c])
        outgoing[k] = msg
    return {n: outgoing[n] for n in tree.root_neighbors}


def build_local_data(q: int, own, aggregates: dict, neighbors=None) -> tuple:
    """Stack own data with the fused aggregates (ascending neighbor order).

    ``own`` and each aggregate are ``(samples, B)`` pairs; samples are stacked
    column-wise (channels), B row-wise.
    """
    neighbors = sorted(aggregates) if neighbors is None else list(neighbors)
    missing = [n for n in neighbors if n not in aggregates]
    if missing:
        raise ValueError(f"missing aggregate from neighbors {missing}")
    y_own, B_own = own
    y = np.hstack([y_own] + [aggregates[n][0] for n in neighbors])
    B = None
    if B_own is not None:
        B = np.vstack([B_own] + [aggregates[n][1] for n in neighbors])
    return y, B


def _stream_layout(C: TransitionMatrix, neighbors):
    """Streams grouped by neighbor in ascending order; checks the engine's ordering."""
    order = [st.neighbor for st in C.streams]
    if order != sorted(order):
        raise ValueError("streams must be ordered by ascending neighbor")
    return [C.stream_counts().get(n, 0) for n in neighbors]


def local_data_from_samples(
    batch: SampleBatch,
    graph: NetworkGraph,
    tree: PrunedTree,
    C_y: TransitionMatrix,
    C_v: TransitionMatrix | None = None,
    B=None,
    A=None,
) -> LocalData:
    """Run the in-network compression of one batch and estimate local statistics.

    Every node compresses its channels with all of its stream blocks; the
    payloads travel toward ``q`` by fuse-and-forward, and ``q`` stacks them with
    its own raw channels.
    """
    C_v = C_y if C_v is None else C_v
    q = tree.root
    rows = graph.block
    payload = {}
    for k in range(graph.node_count):
        if k == q:
            continue
        Py = np.hstack(C_y.node_parts(k))
        y_hat, B_hat = compress_node(Py, batch.y[:, rows(k)], None if B is None else B[rows(k)])
        v_hat = None
        if batch.v is not None:
            v_hat = compress_node(np.hstack(C_v.node_parts(k)), batch.v[:, rows(k)])[0]
        payload[k] = (y_hat, v_hat, B_hat, Py.T @ Py)
    payload[q] = None
    fused = fuse_and_forward(tree, payload)
    nbrs = sorted(fused)
    _stream_layout(C_y, nbrs)

    y_loc, B_loc = build_local_data(q, (batch.y[:, rows(q)], None if B is None else B[rows(q)]),
                                    {n: (fused[n][0], fused[n][2]) for n in nbrs}, nbrs)
    v_loc = None
    if batch.v is not None:
        v_loc = np.hstack([batch.v[:, rows(q)]] + [fused[n][1] for n in nbrs])
    local_batch = SampleBatch(y=y_loc, v=v_loc, d=batch.d)
    stats = estimate_statistics(local_batch, B=B_loc, A=A)

    # Gram blocks C^T C: identity for own channels, fused P_k^T P_k per neighbor
    n_local = C_y.n_local
    G = np.zeros((n_local, n_local))
    G[: C_y.M_q, : C_y.M_q] = np.eye(C_y.M_q)
    start = C_y.M_q
    for n in nbrs:
        blk = fused[n][3]
        G[start : start + blk.shape[0], start : start + blk.shape[0]] = blk
        start += blk.shape[0]
    return LocalData(q, stats.with_(Gamma=G), local_batch)
