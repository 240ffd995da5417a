"""Edge-weighted graphs over pixel grids and point clouds.

Graphs built here are undirected, loop-free and duplicate-free, with edges
stored in (u, v)-lexicographic order so downstream tie-breaking is
deterministic. Edge weights are feature distances; neighbor selection is
always spatial (2D pixel plane or 3D position).
"""

from __future__ import annotations

import enum
import warnings
from dataclasses import dataclass
from functools import cached_property

import numpy as np


class Metric(enum.Enum):
    EUCLIDEAN = "euclidean"
    COSINE = "cosine"

    @classmethod
    def parse(cls, name: str) -> "Metric":
        key = name.strip().lower()
        if key in ("l2", "euclidean", "euclid"):
            return cls.EUCLIDEAN
        if key == "cosine":
            return cls.COSINE
        raise ValueError(f"unknown metric {name!r} (expected l2 or cosine)")


def feature_distance(fa: np.ndarray, fb: np.ndarray, metric: Metric) -> np.ndarray:
    """Rowwise distance between two (n, d) feature arrays."""
    fa = np.atleast_2d(np.asarray(fa, dtype=np.float64))
    fb = np.atleast_2d(np.asarray(fb, dtype=np.float64))
    if metric is Metric.EUCLIDEAN:
        return np.sqrt(np.sum((fa - fb) ** 2, axis=-1))
    na = np.linalg.norm(fa, axis=-1)
    nb = np.linalg.norm(fb, axis=-1)
    if np.any(na == 0) or np.any(nb == 0):
        raise ValueError("cosine distance requires nonzero feature vectors")
    return 1.0 - np.sum(fa * fb, axis=-1) / (na * nb)


@dataclass
class FeatureMap:
    """Dense per-pixel feature image, (height, width, dim) row-major."""

    data: np.ndarray

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 3:
            raise ValueError(f"feature map must be (h, w, d), got shape {self.data.shape}")
        h, w, d = self.data.shape
        if h < 1 or w < 1 or d < 1:
            raise ValueError(f"feature map dimensions must be >= 1, got {self.data.shape}")
        if not np.all(np.isfinite(self.data)):
            raise ValueError("feature map contains non-finite values")

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def dim(self) -> int:
        return self.data.shape[2]

    @property
    def pixel_count(self) -> int:
        return self.height * self.width

    def flat_features(self) -> np.ndarray:
        """(h*w, d) view in row-major pixel order."""
        return self.data.reshape(-1, self.dim)


@dataclass
class PointCloud:
    """3D points with per-point features and optional integer segment labels."""

    positions: np.ndarray
    features: np.ndarray
    labels: np.ndarray | None = None

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64)
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.positions.ndim != 2 or self.positions.shape[1] != 3:
            raise ValueError(f"positions must be (n, 3), got {self.positions.shape}")
        if self.features.ndim != 2 or len(self.features) != len(self.positions):
            raise ValueError("features must be (n, d) matching positions")
        if not np.all(np.isfinite(self.positions)):
            raise ValueError("positions contain non-finite values")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if self.labels.shape != (len(self.positions),):
                raise ValueError("labels must be (n,) matching positions")

    def __len__(self) -> int:
        return len(self.positions)


@dataclass
class WeightedGraph:
    """Undirected edge-weighted graph; edges stored with u < v, lexicographic.

    node_ids optionally maps graph node index -> caller id (e.g. flat pixel
    index for graphs over a sampled pixel subset); None means identity.
    """

    node_count: int
    edges_u: np.ndarray
    edges_v: np.ndarray
    weights: np.ndarray
    node_ids: np.ndarray | None = None

    def __post_init__(self):
        self.edges_u = np.asarray(self.edges_u, dtype=np.int64)
        self.edges_v = np.asarray(self.edges_v, dtype=np.int64)
        self.weights = np.asarray(self.weights, dtype=np.float64)
        m = len(self.edges_u)
        if len(self.edges_v) != m or len(self.weights) != m:
            raise ValueError("edge arrays must share length")
        if m:
            if self.edges_u.min() < 0 or self.edges_v.max() >= self.node_count:
                raise ValueError("edge endpoint out of range")
            if np.any(self.edges_u == self.edges_v):
                raise ValueError("self loops are not allowed")
            if not np.all(self.edges_u < self.edges_v):
                raise ValueError("edges must be stored with u < v")
            key = self.edges_u * self.node_count + self.edges_v
            if len(np.unique(key)) != m:
                raise ValueError("duplicate edges")
            if not np.all(np.isfinite(self.weights)) or self.weights.min() < 0:
                raise ValueError("weights must be finite and >= 0")

    @property
    def edge_count(self) -> int:
        return len(self.weights)

    def edge(self, index: int) -> tuple[int, int, float]:
        return (int(self.edges_u[index]), int(self.edges_v[index]), float(self.weights[index]))

    @cached_property
    def adjacency(self) -> list[np.ndarray]:
        """Per-node arrays of incident edge indices."""
        inc: list[list[int]] = [[] for _ in range(self.node_count)]
        for i in range(self.edge_count):
            inc[self.edges_u[i]].append(i)
            inc[self.edges_v[i]].append(i)
        return [np.asarray(a, dtype=np.int64) for a in inc]


def _canonical_edges(u: np.ndarray, v: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Orient u < v, drop duplicates, sort lexicographically by (u, v)."""
    lo = np.minimum(u, v)
    hi = np.maximum(u, v)
    order = np.lexsort((hi, lo))
    lo, hi = lo[order], hi[order]
    if len(lo):
        keep = np.ones(len(lo), dtype=bool)
        keep[1:] = (lo[1:] != lo[:-1]) | (hi[1:] != hi[:-1])
        lo, hi = lo[keep], hi[keep]
    return lo, hi


def grid_graph(fmap: FeatureMap, metric: Metric = Metric.EUCLIDEAN) -> WeightedGraph:
    """4-connected pixel graph; nodes are row-major pixel indices."""
    h, w = fmap.height, fmap.width
    ids = np.arange(h * w, dtype=np.int64).reshape(h, w)
    us = []
    vs = []
    if w > 1:
        us.append(ids[:, :-1].ravel())
        vs.append(ids[:, 1:].ravel())
    if h > 1:
        us.append(ids[:-1, :].ravel())
        vs.append(ids[1:, :].ravel())
    if not us:
        return WeightedGraph(h * w, np.empty(0, np.int64), np.empty(0, np.int64), np.empty(0))
    u, v = _canonical_edges(np.concatenate(us), np.concatenate(vs))
    feats = fmap.flat_features()
    w_arr = feature_distance(feats[u], feats[v], metric)
    return WeightedGraph(h * w, u, v, w_arr)


def _knn_indices(points: np.ndarray, k: int, chunk: int = 512) -> np.ndarray:
    """Exact k nearest neighbors per row; ties break toward the lower index.

    Brute force in row chunks to bound memory; stable argsort on squared
    distance gives the lower-index tie rule for free.
    """
    n = len(points)
    out = np.empty((n, k), dtype=np.int64)
    for start in range(0, n, chunk):
        stop = min(start + chunk, n)
        diff = points[start:stop, None, :] - points[None, :, :]
        d2 = np.einsum("ijk,ijk->ij", diff, diff)
        d2[np.arange(stop - start), np.arange(start, stop)] = np.inf
        order = np.argsort(d2, axis=1, kind="stable")
        out[start:stop] = order[:, :k]
    return out


def knn_graph(cloud: PointCloud, k: int, metric: Metric = Metric.EUCLIDEAN) -> WeightedGraph:
    """Symmetrized kNN graph by 3D position; weights are feature distances."""
    n = len(cloud)
    if n == 0:
        raise ValueError("empty point cloud")
    if n == 1:
        raise ValueError("kNN graph needs at least 2 points")
    if k < 1:
        raise ValueError("k must be >= 1")
    if k >= n:
        warnings.warn(f"k={k} >= point count {n}; using k={n - 1}", stacklevel=2)
        k = n - 1
    nbrs = _knn_indices(cloud.positions, k)
    u = np.repeat(np.arange(n, dtype=np.int64), k)
    v = nbrs.ravel()
    u, v = _canonical_edges(u, v)
    w = feature_distance(cloud.features[u], cloud.features[v], metric)
    return WeightedGraph(n, u, v, w)


def sampled_pixel_graph(
    fmap: FeatureMap,
    pixel_ids: np.ndarray,
    k: int,
    metric: Metric = Metric.EUCLIDEAN,
    seed: int = 0,
) -> WeightedGraph:
    """kNN graph over a pixel subset, neighbors by 2D image-plane distance.

    Node i corresponds to flat pixel index pixel_ids[i] (kept on the graph
    as node_ids). Fully deterministic: neighbor ties break toward the lower
    node index; the seed is accepted for callers that sample the pixel set
    with it and does not perturb construction.
    """
    del seed
    pixel_ids = np.asarray(pixel_ids, dtype=np.int64)
    n = len(pixel_ids)
    if n < 2:
        raise ValueError("need at least 2 sampled pixels")
    if len(np.unique(pixel_ids)) != n:
        raise ValueError("pixel_ids must be distinct")
    if pixel_ids.min() < 0 or pixel_ids.max() >= fmap.pixel_count:
        raise ValueError("pixel id out of bounds")
    if k < 1:
        raise ValueError("k must be >= 1")
    if k >= n:
        warnings.warn(f"k={k} >= sample count {n}; using k={n - 1}", stacklevel=2)
        k = n - 1
    rows = (pixel_ids // fmap.width).astype(np.float64)
    cols = (pixel_ids % fmap.width).astype(np.float64)
    coords = np.column_stack([rows, cols, np.zeros(n)])
    nbrs = _knn_indices(coords, k)
    u = np.repeat(np.arange(n, dtype=np.int64), k)
    v = nbrs.ravel()
    u, v = _canonical_edges(u, v)
    feats = fmap.flat_features()
    w = feature_distance(feats[pixel_ids[u]], feats[pixel_ids[v]], metric)
    return WeightedGraph(n, u, v, w, node_ids=pixel_ids)


def sample_pixel_ids(fmap: FeatureMap, count: int, seed: int) -> np.ndarray:
    """Draw `count` distinct flat pixel indices uniformly (capped at all pixels)."""
    rng = np.random.default_rng(seed)
    count = min(count, fmap.pixel_count)
    return np.sort(rng.choice(fmap.pixel_count, size=count, replace=False)).astype(np.int64)


class UnionFind:
    def __init__(self, n: int):
        self.parent = np.arange(n, dtype=np.int64)

    def find(self, x: int) -> int:
        root = x
        p = self.parent
        while p[root] != root:
            root = p[root]
        while p[x] != root:
            p[x], x = root, p[x]
        return root

    def union(self, a: int, b: int) -> bool:
        ra, rb = self.find(a), self.find(b)
        if ra == rb:
            return False
        self.parent[max(ra, rb)] = min(ra, rb)
        return True


def components_under_threshold(g: WeightedGraph, t: float) -> np.ndarray:
    """Connected components keeping edges with w <= t.

    Component labels are 0..c-1 in order of each component's smallest node.
    """
    if not np.isfinite(t):
        raise ValueError("threshold must be finite")
    uf = UnionFind(g.node_count)
    for i in np.nonzero(g.weights <= t)[0]:
        uf.union(int(g.edges_u[i]), int(g.edges_v[i]))
    return canonical_labels(np.array([uf.find(x) for x in range(g.node_count)]))


def canonical_labels(rep: np.ndarray) -> np.ndarray:
    """Renumber arbitrary representatives to 0..c-1 by first occurrence."""
    labels = np.empty(len(rep), dtype=np.int64)
    seen: dict[int, int] = {}
    for i, r in enumerate(rep):
        r = int(r)
        if r not in seen:
            seen[r] = len(seen)
        labels[i] = seen[r]
    return labels


def voxel_downsample(cloud: PointCloud, voxel: float) -> PointCloud:
    """Average positions and features per occupied voxel.

    The grid is anchored at the origin: cell index = floor(coordinate/voxel)
    per axis. Output points are ordered by lexicographic cell index; labels
    are dropped (downsampling precedes labeling in the pipeline).
    """
    if voxel <= 0:
        raise ValueError("voxel size must be positive")
    if len(cloud) == 0:
        raise ValueError("empty point cloud")
    cells = np.floor(cloud.positions / voxel).astype(np.int64)
    _, inverse = np.unique(cells, axis=0, return_inverse=True)
    counts = np.bincount(inverse).astype(np.float64)
    pos = np.column_stack(
        [np.bincount(inverse, weights=cloud.positions[:, a]) for a in range(3)]
    ) / counts[:, None]
    feats = np.column_stack(
        [np.bincount(inverse, weights=cloud.features[:, d]) for d in range(cloud.features.shape[1])]
    ) / counts[:, None]
    return PointCloud(pos, feats)


def radius_outlier_filter(cloud: PointCloud, radius: float, min_neighbors: int) -> PointCloud:
    """Keep points with at least min_neighbors *other* points within radius."""
    if radius <= 0:
        raise ValueError("radius must be positive")
    n = len(cloud)
    if min_neighbors <= 0:
        return PointCloud(cloud.positions.copy(), cloud.features.copy(),
                          None if cloud.labels is None else cloud.labels.copy())
    r2 = radius * radius
    keep = np.zeros(n, dtype=bool)
    chunk = 512
    for start in range(0, n, chunk):
        stop = min(start + chunk, n)
        diff = cloud.positions[start:stop, None, :] - cloud.positions[None, :, :]
        d2 = np.einsum("ijk,ijk->ij", diff, diff)
        within = (d2 <= r2).sum(axis=1) - 1  # strict self-exclusion
        keep[start:stop] = within >= min_neighbors
    return PointCloud(
        cloud.positions[keep],
        cloud.features[keep],
        None if cloud.labels is None else cloud.labels[keep],
    )
