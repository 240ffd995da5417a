"""Hierarchical 2D/3D segmentation by threshold cuts, and label transfer.

A Segmenter owns one partition tree (built once from a feature map's grid
graph or a point cloud's kNN graph) and serves cuts and point queries at
any granularity; cuts are cached per threshold. Output label maps reserve
0 for unlabeled pixels and use dense ids from 1, ordered by each segment's
smallest member.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .graphs import (
    FeatureMap,
    Metric,
    PointCloud,
    WeightedGraph,
    components_under_threshold,
    grid_graph,
    knn_graph,
)
from .hierarchy import BinaryPartitionTree, build_bpt, threshold_cut
from .metrics import CameraModel
from .parallel import parallel_map

FEATURE_MAP_2D = "feature_map_2d"
POINT_CLOUD_3D = "point_cloud_3d"


@dataclass
class LabelMap:
    height: int
    width: int
    labels: np.ndarray

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.labels.shape != (self.height, self.width):
            raise ValueError("label array shape mismatch")

    def mask(self, label: int) -> np.ndarray:
        return self.labels == label

    def segment_ids(self) -> np.ndarray:
        ids = np.unique(self.labels)
        return ids[ids > 0]


def _finalize_labels(partition: np.ndarray, min_size: int) -> np.ndarray:
    """Canonical 0-based partition -> ids from 1, tiny components to 0."""
    counts = np.bincount(partition)
    out = np.zeros(len(partition), dtype=np.int64)
    next_id = 1
    # partition labels are already ordered by smallest member
    for comp in range(len(counts)):
        if counts[comp] >= max(min_size, 1):
            out[partition == comp] = next_id
            next_id += 1
    return out


class Segmenter:
    """Threshold-cut model over a fixed domain; immutable after build."""

    def __init__(self, source: str, bpt: BinaryPartitionTree, graph: WeightedGraph,
                 shape: tuple[int, ...], min_size: int = 0):
        self.source = source
        self.bpt = bpt
        self.graph = graph
        self.shape = shape
        self.min_size = min_size
        self._cuts: dict[float, np.ndarray] = {}

    @classmethod
    def from_feature_map(cls, fmap: FeatureMap, metric: Metric = Metric.EUCLIDEAN,
                         min_size: int = 0) -> "Segmenter":
        g = grid_graph(fmap, metric)
        return cls(FEATURE_MAP_2D, build_bpt(g), g, (fmap.height, fmap.width), min_size)

    @classmethod
    def from_point_cloud(cls, cloud: PointCloud, k_graph: int = 16,
                         metric: Metric = Metric.EUCLIDEAN, min_size: int = 0) -> "Segmenter":
        g = knn_graph(cloud, k_graph, metric)
        return cls(POINT_CLOUD_3D, build_bpt(g), g, (len(cloud),), min_size)

    def cut(self, t: float) -> np.ndarray:
        """Canonical 0-based partition labels at granularity t (cached)."""
        key = float(t)
        if key not in self._cuts:
            self._cuts[key] = threshold_cut(self.bpt, key)
        return self._cuts[key]

    def query(self, index, t: float) -> np.ndarray:
        """Mask of the component containing `index` at granularity t.

        index is (row, col) or a flat pixel id for 2D domains, a point id
        for 3D. A query landing in a component smaller than min_size
        returns an empty mask.
        """
        if self.source == FEATURE_MAP_2D and isinstance(index, tuple):
            flat = index[0] * self.shape[1] + index[1]
        else:
            flat = int(index)
        if not (0 <= flat < self.graph.node_count):
            raise IndexError(f"query index {index} out of range")
        labels = self.cut(t)
        member = labels == labels[flat]
        if self.min_size and member.sum() < self.min_size:
            member = np.zeros_like(member)
        return member.reshape(self.shape)


def query_mask(seg: Segmenter, index, t: float) -> np.ndarray:
    return seg.query(index, t)


class CloudViewSegmenter:
    """Pixel-queryable view of a 3D point-cloud segmenter.

    All views built over one cloud share its partition at every threshold,
    so cross-view queries are consistent by construction. Each pixel
    back-projects through the view's depth map and votes among its nearest
    cloud points (mode, ties to the smallest id), mirroring novel-view
    label transfer; a query returns the footprint of the chosen component
    in this view.
    """

    def __init__(self, cloud_seg: Segmenter, cloud: PointCloud, cam: CameraModel,
                 depth: np.ndarray, k_query: int = 5, d_max: float = 0.005,
                 min_size: int = 0):
        if cloud_seg.source != POINT_CLOUD_3D:
            raise ValueError("CloudViewSegmenter needs a point-cloud segmenter")
        self.cloud_seg = cloud_seg
        self.shape = (cam.height, cam.width)
        self.min_size = min_size
        self._modes: dict[float, np.ndarray] = {}

        depth = np.asarray(depth, dtype=np.float64)
        valid = np.isfinite(depth) & (depth > 0)
        pix = np.argwhere(valid)
        n_px = self.shape[0] * self.shape[1]
        k = min(k_query, len(cloud))
        self._nbrs = np.full((n_px, k), -1, dtype=np.int64)
        if len(pix):
            world = cam.back_project(pix.astype(np.float64), depth[valid])
            flat = pix[:, 0] * self.shape[1] + pix[:, 1]
            d2max = d_max * d_max
            for start in range(0, len(pix), 256):
                stop = min(start + 256, len(pix))
                diff = world[start:stop, None, :] - cloud.positions[None, :, :]
                d2 = np.einsum("ijk,ijk->ij", diff, diff)
                order = np.argsort(d2, axis=1, kind="stable")[:, :k]
                near = np.take_along_axis(d2, order, axis=1) <= d2max
                rows = self._nbrs[flat[start:stop]]
                rows[near] = order[near]
                self._nbrs[flat[start:stop]] = rows

    def _pixel_components(self, t: float) -> np.ndarray:
        key = float(t)
        if key not in self._modes:
            labels = self.cloud_seg.cut(key)
            n_px, k = self._nbrs.shape
            votes = np.where(self._nbrs >= 0, labels[np.maximum(self._nbrs, 0)], -1)
            votes = np.sort(votes, axis=1)
            best_count = np.zeros(n_px, dtype=np.int64)
            best_label = np.full(n_px, -1, dtype=np.int64)
            run = np.zeros(n_px, dtype=np.int64)
            for c in range(k):
                col = votes[:, c]
                if c == 0:
                    run[:] = 1
                else:
                    cont = col == votes[:, c - 1]
                    run = np.where(cont, run + 1, 1)
                better = (col >= 0) & (run > best_count)
                best_count[better] = run[better]
                best_label[better] = col[better]
            self._modes[key] = best_label
        return self._modes[key]

    def query(self, index, t: float) -> np.ndarray:
        if isinstance(index, tuple):
            flat = index[0] * self.shape[1] + index[1]
        else:
            flat = int(index)
        comps = self._pixel_components(t)
        comp = comps[flat]
        if comp < 0:
            return np.zeros(self.shape, dtype=bool)
        member = comps == comp
        if self.min_size and member.sum() < self.min_size:
            member = np.zeros_like(member)
        return member.reshape(self.shape)


def segment_2d(fmap: FeatureMap, t: float, min_pixels: int = 20,
               metric: Metric = Metric.EUCLIDEAN) -> LabelMap:
    """Threshold cut of the 4-connected grid graph at t.

    Components smaller than min_pixels are relabeled 0.
    """
    g = grid_graph(fmap, metric)
    partition = components_under_threshold(g, t)
    labels = _finalize_labels(partition, min_pixels)
    return LabelMap(fmap.height, fmap.width, labels.reshape(fmap.height, fmap.width))


def segment_3d(cloud: PointCloud, t: float, k_graph: int = 16, n_keep: int = 200,
               metric: Metric = Metric.EUCLIDEAN) -> PointCloud:
    """Threshold cut of the kNN graph; keep the n_keep largest components.

    Kept components get ids 1..n_keep ordered by size (ties by smallest
    member id); everything else is labeled 0.
    """
    if len(cloud) == 0:
        raise ValueError("empty point cloud")
    if len(cloud) == 1:
        labels = np.array([1 if n_keep >= 1 else 0], dtype=np.int64)
        return PointCloud(cloud.positions.copy(), cloud.features.copy(), labels)
    g = knn_graph(cloud, k_graph, metric)
    partition = components_under_threshold(g, t)
    counts = np.bincount(partition)
    # canonical partition ids are ordered by smallest member already, so a
    # stable sort on -size keeps that order among equal-sized components
    order = np.argsort(-counts, kind="stable")
    labels = np.zeros(len(cloud), dtype=np.int64)
    for rank, comp in enumerate(order[:n_keep]):
        labels[partition == comp] = rank + 1
    return PointCloud(cloud.positions.copy(), cloud.features.copy(), labels)


def transfer_labels(cloud: PointCloud, novel_depth: np.ndarray, cam: CameraModel,
                    k_query: int = 5, d_max: float = 0.005, threads: int = 1) -> LabelMap:
    """Assign each novel-view pixel the mode label of nearby cloud points.

    Pixels back-project through the depth map; up to k_query nearest
    labeled points within d_max vote, mode ties going to the smallest
    label id. Pixels with nonpositive depth or no neighbors get 0. Pixel
    chunks are independent, so threads never change the output.
    """
    if cloud.labels is None:
        raise ValueError("point cloud must be labeled")
    novel_depth = np.asarray(novel_depth, dtype=np.float64)
    h, w = novel_depth.shape
    if (h, w) != (cam.height, cam.width):
        raise ValueError("depth map does not match camera resolution")
    labeled = cloud.labels > 0
    out = np.zeros((h, w), dtype=np.int64)
    if not labeled.any():
        return LabelMap(h, w, out)
    points = cloud.positions[labeled]
    point_labels = cloud.labels[labeled]

    valid = np.isfinite(novel_depth) & (novel_depth > 0)
    pix = np.argwhere(valid)
    if not len(pix):
        return LabelMap(h, w, out)
    world = cam.back_project(pix.astype(np.float64), novel_depth[valid])

    k = min(k_query, len(points))
    d2max = d_max * d_max

    def run_chunk(start: int) -> np.ndarray:
        stop = min(start + 256, len(pix))
        diff = world[start:stop, None, :] - points[None, :, :]
        d2 = np.einsum("ijk,ijk->ij", diff, diff)
        order = np.argsort(d2, axis=1, kind="stable")[:, :k]
        near = np.take_along_axis(d2, order, axis=1) <= d2max
        chunk_labels = np.zeros(stop - start, dtype=np.int64)
        for i in range(stop - start):
            votes = point_labels[order[i][near[i]]]
            if len(votes):
                chunk_labels[i] = np.bincount(votes).argmax()
        return chunk_labels

    chunks = parallel_map(run_chunk, range(0, len(pix), 256), threads)
    flat_labels = np.concatenate(chunks) if chunks else np.empty(0, dtype=np.int64)
    out[pix[:, 0], pix[:, 1]] = flat_labels
    return LabelMap(h, w, out)
