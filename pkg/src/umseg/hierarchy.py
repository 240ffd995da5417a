"""Binary partition tree over a weighted graph.

Edges are processed in nondecreasing weight order (ties by edge-list
position); every merge of two components creates one internal node whose
altitude is the merging edge's weight. The altitude of the lowest common
ancestor of two leaves is then exactly the minimax path value between them:
the smallest, over all connecting paths, of the largest edge weight on the
path. Threshold cuts of this tree reproduce the flooding segmentation of
the source graph level-for-level.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .graphs import UnionFind, WeightedGraph, canonical_labels

UNREACHABLE = np.inf


@dataclass
class BinaryPartitionTree:
    """Dendrogram of a graph; one forest root per connected component.

    Tree nodes are 0..total_count-1: leaves first (graph nodes), then
    internal nodes in creation order, so a parent id always exceeds its
    children's ids and internal altitudes are nondecreasing with id.
    """

    leaf_count: int
    parent: np.ndarray          # (total,) root is its own parent
    altitude: np.ndarray        # (total,) 0.0 at leaves
    left: np.ndarray            # (internal,) child ids
    right: np.ndarray
    merge_edge: np.ndarray      # (internal,) source edge index per merge

    def __post_init__(self):
        total = len(self.parent)
        self._root = np.empty(total, dtype=np.int64)
        self._depth = np.empty(total, dtype=np.int64)
        for x in range(total - 1, -1, -1):
            p = self.parent[x]
            if p == x:
                self._root[x] = x
                self._depth[x] = 0
            else:
                self._root[x] = self._root[p]
                self._depth[x] = self._depth[p] + 1
        # binary-lifting ancestor table, built once; queries allocate nothing
        levels = max(1, int(np.ceil(np.log2(max(2, total)))))
        up = np.empty((levels, total), dtype=np.int64)
        up[0] = self.parent
        for k in range(1, levels):
            up[k] = up[k - 1][up[k - 1]]
        self._up = up

    @property
    def internal_count(self) -> int:
        return len(self.left)

    @property
    def total_count(self) -> int:
        return len(self.parent)

    @property
    def component_count(self) -> int:
        return self.leaf_count - self.internal_count

    def lca(self, i: int, j: int) -> int:
        """Lowest common ancestor, or -1 if i and j are in different trees."""
        if self._root[i] != self._root[j]:
            return -1
        di, dj = self._depth[i], self._depth[j]
        if di < dj:
            i, j, di, dj = j, i, dj, di
        diff = di - dj
        k = 0
        while diff:
            if diff & 1:
                i = self._up[k][i]
            diff >>= 1
            k += 1
        if i == j:
            return i
        for k in range(len(self._up) - 1, -1, -1):
            if self._up[k][i] != self._up[k][j]:
                i = self._up[k][i]
                j = self._up[k][j]
        return int(self.parent[i])

    def distance(self, i: int, j: int) -> float:
        return ultrametric_distance(self, i, j)

    def lca_batch(self, ii: np.ndarray, jj: np.ndarray) -> np.ndarray:
        """Vectorized LCA; -1 where the pair spans different trees."""
        a = np.asarray(ii, dtype=np.int64).copy()
        b = np.asarray(jj, dtype=np.int64).copy()
        out = np.full(len(a), -1, dtype=np.int64)
        same = self._root[a] == self._root[b]
        a, b = a[same], b[same]
        da, db = self._depth[a], self._depth[b]
        swap = da < db
        tmp = a[swap].copy()
        a[swap] = b[swap]
        b[swap] = tmp
        diff = np.abs(da - db)
        for k in range(len(self._up)):
            lift = ((diff >> k) & 1).astype(bool)
            a[lift] = self._up[k][a[lift]]
        done = a == b
        for k in range(len(self._up) - 1, -1, -1):
            lift = ~done & (self._up[k][a] != self._up[k][b])
            a[lift] = self._up[k][a[lift]]
            b[lift] = self._up[k][b[lift]]
        out[same] = np.where(done, a, self.parent[a])
        return out

    def leaves_under(self) -> list[np.ndarray]:
        """Leaf ids below each tree node (index by node id)."""
        out: list = [None] * self.total_count
        for x in range(self.leaf_count):
            out[x] = np.array([x], dtype=np.int64)
        for n in range(self.internal_count):
            node = self.leaf_count + n
            out[node] = np.concatenate([out[self.left[n]], out[self.right[n]]])
        return out

    def full_distance_matrix(self) -> np.ndarray:
        """All-pairs ultrametric distances; UNREACHABLE across components."""
        n = self.leaf_count
        d = np.full((n, n), UNREACHABLE)
        np.fill_diagonal(d, 0.0)
        under = self.leaves_under()
        for m in range(self.internal_count):
            la = under[self.left[m]]
            lb = under[self.right[m]]
            alt = self.altitude[self.leaf_count + m]
            d[np.ix_(la, lb)] = alt
            d[np.ix_(lb, la)] = alt
        return d

    def to_dendrogram(self) -> list[dict]:
        return [
            {
                "id": i,
                "parent": int(self.parent[i]),
                "altitude": float(self.altitude[i]),
                "leaf": i < self.leaf_count,
            }
            for i in range(self.total_count)
        ]


def build_bpt(g: WeightedGraph) -> BinaryPartitionTree:
    """Kruskal-order construction of the subdominant ultrametric tree."""
    n = g.node_count
    max_total = 2 * n - 1 if n else 0
    parent = np.arange(max_total, dtype=np.int64)
    altitude = np.zeros(max_total)
    left = np.empty(max(0, n - 1), dtype=np.int64)
    right = np.empty(max(0, n - 1), dtype=np.int64)
    merge_edge = np.empty(max(0, n - 1), dtype=np.int64)

    uf = UnionFind(n)
    comp_node = np.arange(n, dtype=np.int64)  # union-find root -> current tree node
    next_id = n
    order = np.argsort(g.weights, kind="stable")
    for e in order:
        a = uf.find(int(g.edges_u[e]))
        b = uf.find(int(g.edges_v[e]))
        if a == b:
            continue
        ta, tb = comp_node[a], comp_node[b]
        parent[ta] = next_id
        parent[tb] = next_id
        altitude[next_id] = g.weights[e]
        left[next_id - n] = ta
        right[next_id - n] = tb
        merge_edge[next_id - n] = e
        uf.union(a, b)
        comp_node[uf.find(a)] = next_id
        next_id += 1
    m = next_id - n
    return BinaryPartitionTree(
        leaf_count=n,
        parent=parent[:next_id],
        altitude=altitude[:next_id],
        left=left[:m],
        right=right[:m],
        merge_edge=merge_edge[:m],
    )


def ultrametric_distance(bpt: BinaryPartitionTree, i: int, j: int) -> float:
    """Minimax path distance between leaves i and j (LCA altitude)."""
    if not (0 <= i < bpt.leaf_count and 0 <= j < bpt.leaf_count):
        raise IndexError(f"leaf id out of range: ({i}, {j})")
    if i == j:
        return 0.0
    a = bpt.lca(i, j)
    if a < 0:
        return UNREACHABLE
    return float(bpt.altitude[a])


def threshold_cut(bpt: BinaryPartitionTree, t: float) -> np.ndarray:
    """Partition leaves so i, j share a label iff their distance is <= t.

    Labels are canonical: 0..c-1 in order of each cluster's smallest leaf.
    """
    if not np.isfinite(t):
        raise ValueError("threshold must be finite")
    total = bpt.total_count
    comp = np.arange(total, dtype=np.int64)
    for m in range(bpt.internal_count):
        node = bpt.leaf_count + m
        if bpt.altitude[node] <= t:
            comp[bpt.left[m]] = node
            comp[bpt.right[m]] = node
    # pointers go strictly upward; one reverse pass resolves them
    for x in range(total - 1, -1, -1):
        if comp[x] != x:
            comp[x] = comp[comp[x]]
    return canonical_labels(comp[: bpt.leaf_count])


def active_edge(
    bpt: BinaryPartitionTree, g: WeightedGraph, i: int, j: int
) -> tuple[int, int, float]:
    """The bottleneck edge between i and j: recorded at their LCA merge.

    This is the unique graph edge whose weight equals the ultrametric
    distance and whose removal at that level separates i from j. Undefined
    for i == j or disconnected pairs.
    """
    if i == j:
        raise ValueError("active edge undefined for identical endpoints")
    a = bpt.lca(i, j)
    if a < 0:
        raise ValueError(f"nodes {i} and {j} are not connected")
    return g.edge(int(bpt.merge_edge[a - bpt.leaf_count]))


def brute_force_ultrametric(g: WeightedGraph, max_nodes: int = 256) -> np.ndarray:
    """Minimax distances by dense dynamic programming (verification oracle).

    d[i][j] <- min(d[i][j], max(d[i][k], d[k][j])) over all k, seeded from
    the direct edges. Quadratic memory, cubic time; refuses large graphs.
    """
    n = g.node_count
    if n > max_nodes:
        raise ValueError(f"graph too large for the oracle: {n} > {max_nodes}")
    d = np.full((n, n), UNREACHABLE)
    np.fill_diagonal(d, 0.0)
    for i in range(g.edge_count):
        u, v, w = g.edge(i)
        if w < d[u, v]:
            d[u, v] = w
            d[v, u] = w
    for k in range(n):
        np.minimum(d, np.maximum(d[:, k][:, None], d[k, :][None, :]), out=d)
    return d
