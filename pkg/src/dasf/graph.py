"""Network topologies and their pruning into trees rooted at the updating node.

Nodes are indexed ``0 .. K-1``.  Edges are stored as sorted pairs ``(a, b)`` with
``a < b``.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np


class DisconnectedGraphError(ValueError):
    pass


@dataclass(frozen=True)
class NetworkGraph:
    node_count: int
    channel_counts: tuple[int, ...]
    edges: frozenset[tuple[int, int]]
    _adj: tuple[tuple[int, ...], ...] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        K = self.node_count
        if K < 1:
            raise ValueError("node_count must be positive")
        counts = tuple(int(m) for m in self.channel_counts)
        if len(counts) != K or any(m < 1 for m in counts):
            raise ValueError(f"channel_counts must hold {K} positive integers, got {self.channel_counts!r}")
        object.__setattr__(self, "channel_counts", counts)

        edges = set()
        for a, b in self.edges:
            a, b = int(a), int(b)
            if a == b:
                raise ValueError(f"self-loop at node {a}")
            if not (0 <= a < K and 0 <= b < K):
                raise ValueError(f"edge ({a}, {b}) references a node outside 0..{K - 1}")
            edges.add((min(a, b), max(a, b)))
        object.__setattr__(self, "edges", frozenset(edges))

        adj = [[] for _ in range(K)]
        for a, b in edges:
            adj[a].append(b)
            adj[b].append(a)
        object.__setattr__(self, "_adj", tuple(tuple(sorted(n)) for n in adj))

        if not self.is_connected():
            raise DisconnectedGraphError("network graph is not connected")

    @property
    def M(self) -> int:
        return sum(self.channel_counts)

    def neighbors(self, k: int) -> tuple[int, ...]:
        return self._adj[k]

    def degrees(self) -> list[int]:
        return [len(n) for n in self._adj]

    def offsets(self) -> np.ndarray:
        """Row offset of every node's block in the stacked signal; length K+1."""
        return np.concatenate([[0], np.cumsum(self.channel_counts)])

    def block(self, k: int) -> slice:
        off = self.offsets()
        return slice(int(off[k]), int(off[k + 1]))

    def is_connected(self) -> bool:
        seen = {0}
        stack = [0]
        while stack:
            k = stack.pop()
            for n in self._adj[k]:
                if n not in seen:
                    seen.add(n)
                    stack.append(n)
        return len(seen) == self.node_count


@dataclass(frozen=True)
class PrunedTree:
    root: int
    parent: dict[int, int]
    children: dict[int, tuple[int, ...]]
    node_count: int

    @property
    def root_neighbors(self) -> tuple[int, ...]:
        return self.children[self.root]

    @property
    def edges(self) -> frozenset[tuple[int, int]]:
        return frozenset((min(k, p), max(k, p)) for k, p in self.parent.items())

    def subtree(self, n: int) -> list[int]:
        """All nodes hanging below ``n`` (inclusive), sorted."""
        out = []
        stack = [n]
        while stack:
            k = stack.pop()
            out.append(k)
            stack.extend(self.children[k])
        return sorted(out)

    def postorder(self) -> list[int]:
        """Nodes ordered leaves first, root last."""
        order = []
        stack = [(self.root, False)]
        while stack:
            k, done = stack.pop()
            if done:
                order.append(k)
                continue
            stack.append((k, True))
            for c in reversed(self.children[k]):
                stack.append((c, False))
        return order


def prune_to_tree(graph: NetworkGraph, q: int, policy_seed: int | None = None) -> PrunedTree:
    """Breadth-first spanning tree rooted at ``q``.

    Every graph neighbor of ``q`` stays a tree neighbor because BFS discovers them
    first.  Ties are broken by the lowest node index; passing ``policy_seed``
    shuffles the neighbor visiting order instead (still deterministic per seed).
    """
    if not 0 <= q < graph.node_count:
        raise ValueError(f"updating node {q} not in graph")
    rng = np.random.default_rng(policy_seed) if policy_seed is not None else None

    parent: dict[int, int] = {}
    children: dict[int, list[int]] = {k: [] for k in range(graph.node_count)}
    seen = {q}
    queue = deque([q])
    while queue:
        k = queue.popleft()
        nbrs = list(graph.neighbors(k))
        if rng is not None:
            nbrs = [nbrs[i] for i in rng.permutation(len(nbrs))]
        for n in nbrs:
            if n not in seen:
                seen.add(n)
                parent[n] = k
                children[k].append(n)
                queue.append(n)
    if len(seen) != graph.node_count:
        raise DisconnectedGraphError("cannot prune a disconnected graph into a spanning tree")
    return PrunedTree(
        root=q,
        parent=parent,
        children={k: tuple(sorted(c)) for k, c in children.items()},
        node_count=graph.node_count,
    )


def subtree_partition(tree: PrunedTree) -> dict[int, list[int]]:
    """Map each root neighbor ``n`` to the node set hidden behind it."""
    return {n: tree.subtree(n) for n in tree.root_neighbors}


def next_hop(tree: PrunedTree, k: int) -> int:
    if k == tree.root:
        raise ValueError("the root has no next hop")
    return tree.parent[k]


# -- generators -------------------------------------------------------------


def _as_counts(K, channels):
    if np.isscalar(channels):
        return (int(channels),) * K
    return tuple(int(c) for c in channels)


def from_edges(K: int, edges, channels=1) -> NetworkGraph:
    return NetworkGraph(K, _as_counts(K, channels), frozenset(tuple(e) for e in edges))


def path_graph(K: int, channels=1) -> NetworkGraph:
    return from_edges(K, [(k, k + 1) for k in range(K - 1)], channels)


def star_graph(K: int, center: int = 0, channels=1) -> NetworkGraph:
    return from_edges(K, [(center, k) for k in range(K) if k != center], channels)


def complete_graph(K: int, channels=1) -> NetworkGraph:
    return from_edges(K, [(a, b) for a in range(K) for b in range(a + 1, K)], channels)


def erdos_renyi(K: int, p: float, seed: int, channels=1, max_tries: int = 1000) -> NetworkGraph:
    """ER(p) graph, resampled until connected."""
    if not 0 < p <= 1:
        raise ValueError("connection probability must lie in (0, 1]")
    rng = np.random.default_rng(seed)
    pairs = [(a, b) for a in range(K) for b in range(a + 1, K)]
    for _ in range(max_tries):
        keep = rng.random(len(pairs)) < p
        try:
            return from_edges(K, [e for e, kp in zip(pairs, keep) if kp], channels)
        except DisconnectedGraphError:
            continue
    raise DisconnectedGraphError(f"no connected ER({p}) graph on {K} nodes after {max_tries} draws")


def random_tree(K: int, seed: int, channels=1) -> NetworkGraph:
    """Random recursive tree over a random node labelling."""
    rng = np.random.default_rng(seed)
    order = rng.permutation(K)
    edges = [(int(order[i]), int(order[rng.integers(i)])) for i in range(1, K)]
    return from_edges(K, edges, channels)


# Ten-node tree in the style of the classic illustration: node 4 updates and its
# neighbors 3, 5, 8 hide the clusters {0,1,2,3}, {5,6,7}, {8,9}.
FIG1_EDGES = ((0, 1), (1, 3), (2, 3), (3, 4), (4, 5), (5, 6), (5, 7), (4, 8), (8, 9))


def fig1_tree(channels=1) -> NetworkGraph:
    return from_edges(10, FIG1_EDGES, channels)
