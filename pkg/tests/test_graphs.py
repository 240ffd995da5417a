import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from umseg.graphs import (
    FeatureMap,
    Metric,
    PointCloud,
    components_under_threshold,
    feature_distance,
    grid_graph,
    knn_graph,
    radius_outlier_filter,
    sampled_pixel_graph,
    voxel_downsample,
)


def edge_set(g):
    return {(int(u), int(v)): float(w) for u, v, w in zip(g.edges_u, g.edges_v, g.weights)}


def scalar_map(values) -> FeatureMap:
    return FeatureMap(np.asarray(values, dtype=float)[:, :, None])


class TestGridGraph:
    def test_two_by_two_scalar(self):
        g = grid_graph(scalar_map([[0, 1], [2, 3]]))
        assert edge_set(g) == {(0, 1): 1.0, (0, 2): 2.0, (1, 3): 2.0, (2, 3): 1.0}

    def test_constant_map_zero_weights(self):
        g = grid_graph(FeatureMap(np.full((3, 4, 5), 2.5)))
        assert g.edge_count == 3 * 3 + 2 * 4
        assert np.all(g.weights == 0.0)

    def test_three_by_three_against_loop_oracle(self, rng):
        fmap = FeatureMap(rng.normal(size=(3, 3, 4)))
        g = grid_graph(fmap)
        assert g.edge_count == 12
        feats = fmap.flat_features()
        for u, v, w in zip(g.edges_u, g.edges_v, g.weights):
            expected = sum((feats[u][d] - feats[v][d]) ** 2 for d in range(4)) ** 0.5
            assert w == pytest.approx(expected, rel=1e-12)

    @given(st.integers(1, 6), st.integers(1, 6))
    def test_edge_count_formula(self, h, w):
        g = grid_graph(FeatureMap(np.zeros((h, w, 2))))
        assert g.edge_count == h * (w - 1) + (h - 1) * w

    def test_cosine_metric(self):
        fmap = FeatureMap(np.array([[[1.0, 0.0], [0.0, 1.0]]]))
        g = grid_graph(fmap, Metric.COSINE)
        assert g.weights[0] == pytest.approx(1.0)

    def test_cosine_rejects_zero_vectors(self):
        with pytest.raises(ValueError):
            feature_distance(np.zeros((1, 2)), np.ones((1, 2)), Metric.COSINE)


def brute_force_knn(points, k):
    n = len(points)
    out = []
    for i in range(n):
        d = [(np.linalg.norm(points[i] - points[j]), j) for j in range(n) if j != i]
        d.sort()
        out.append(sorted(j for _, j in d[:k]))
    return out


class TestKnnGraph:
    def test_collinear_points(self):
        cloud = PointCloud([[0, 0, 0], [1, 0, 0], [10, 0, 0]], np.eye(3))
        g = knn_graph(cloud, 1)
        assert set(edge_set(g)) == {(0, 1), (1, 2)}

    def test_duplicate_positions_tie_to_lower_index(self):
        pos = [[0, 0, 0], [0, 0, 0], [0, 0, 0], [5, 0, 0]]
        feats = np.arange(8.0).reshape(4, 2)
        g = knn_graph(PointCloud(pos, feats), 1)
        # point 3's nearest is the duplicate trio; the tie goes to point 0
        assert (0, 3) in edge_set(g)
        # weights come from features, not positions
        assert edge_set(g)[(0, 1)] == pytest.approx(np.linalg.norm(feats[0] - feats[1]))

    @pytest.mark.parametrize("n,k", [(64, 4), (256, 6)])
    def test_against_brute_force_oracle(self, rng, n, k):
        pts = rng.normal(size=(n, 3))
        cloud = PointCloud(pts, rng.normal(size=(n, 2)))
        g = knn_graph(cloud, k)
        oracle = brute_force_knn(pts, k)
        expected = set()
        for i, nbrs in enumerate(oracle):
            for j in nbrs:
                expected.add((min(i, j), max(i, j)))
        assert set(edge_set(g)) == expected

    def test_k_downgrade_warns(self):
        cloud = PointCloud(np.eye(3), np.eye(3))
        with pytest.warns(UserWarning, match="using k=2"):
            g = knn_graph(cloud, 5)
        assert g.edge_count == 3

    def test_empty_cloud_rejected(self):
        with pytest.raises(ValueError):
            knn_graph(PointCloud(np.empty((0, 3)), np.empty((0, 2))), 1)


class TestSampledPixelGraph:
    def test_corner_pixels(self):
        fmap = FeatureMap(np.zeros((5, 5, 1)))
        corners = np.array([0, 4, 20, 24])
        g = sampled_pixel_graph(fmap, corners, 2, seed=0)
        # each corner connects to the two corners 4 apart, never the diagonal
        assert set(edge_set(g)) == {(0, 1), (0, 2), (1, 3), (2, 3)}
        assert g.node_ids is not None and list(g.node_ids) == [0, 4, 20, 24]

    def test_saturated_sample_is_complete_graph(self, rng):
        fmap = FeatureMap(rng.normal(size=(3, 3, 2)))
        g = sampled_pixel_graph(fmap, np.arange(9), 8, seed=1)
        assert g.edge_count == 9 * 8 // 2

    def test_training_graph_shape(self, rng):
        fmap = FeatureMap(rng.normal(size=(128, 128, 2)))
        ids = np.sort(rng.choice(128 * 128, size=4096, replace=False))
        g = sampled_pixel_graph(fmap, ids, 10, seed=0)
        assert g.node_count == 4096
        assert g.edge_count <= 4096 * 10
        assert g.edge_count >= 4096 * 10 // 2

    def test_too_few_pixels_rejected(self):
        with pytest.raises(ValueError):
            sampled_pixel_graph(FeatureMap(np.zeros((2, 2, 1))), np.array([1]), 1, seed=0)


class TestComponents:
    def chain(self, weights):
        from umseg.graphs import WeightedGraph

        n = len(weights) + 1
        u = np.arange(n - 1)
        return WeightedGraph(n, u, u + 1, np.asarray(weights, dtype=float))

    def test_chain_cut(self):
        labels = components_under_threshold(self.chain([1, 5, 1]), 2.0)
        assert list(labels) == [0, 0, 1, 1]

    def test_below_min_weight_gives_singletons(self):
        labels = components_under_threshold(self.chain([1, 5, 1]), 0.5)
        assert list(labels) == [0, 1, 2, 3]

    def test_at_max_weight_joins_component(self):
        labels = components_under_threshold(self.chain([1, 5, 1]), 5.0)
        assert list(labels) == [0, 0, 0, 0]

    def test_monotone_refinement(self, rng):
        from conftest import random_connected_graph

        for _ in range(10):
            g = random_connected_graph(rng, int(rng.integers(5, 40)))
            t1, t2 = sorted(rng.random(2))
            fine = components_under_threshold(g, t1)
            coarse = components_under_threshold(g, t2)
            for comp in np.unique(fine):
                assert len(np.unique(coarse[fine == comp])) == 1


class TestVoxelDownsample:
    def test_two_points_one_voxel(self):
        cloud = PointCloud([[0.1, 0.1, 0.1], [0.2, 0.2, 0.2]], [[0.0], [1.0]])
        out = voxel_downsample(cloud, 1.0)
        assert len(out) == 1
        assert np.allclose(out.positions[0], [0.15, 0.15, 0.15])
        assert out.features[0, 0] == pytest.approx(0.5)

    def test_spread_points_unchanged_count(self, rng):
        pts = np.arange(12).reshape(4, 3) * 10.0
        out = voxel_downsample(PointCloud(pts, np.ones((4, 1))), 0.5)
        assert len(out) == 4

    def test_occupancy_oracle(self, rng):
        pts = rng.random((1000, 3))
        cloud = PointCloud(pts, rng.random((1000, 2)))
        out = voxel_downsample(cloud, 0.5)
        occupied = {tuple(np.floor(p / 0.5).astype(int)) for p in pts}
        assert len(out) == len(occupied)

    def test_positions_stay_in_voxel_bounds(self, rng):
        pts = rng.normal(0, 3, size=(200, 3))
        out = voxel_downsample(PointCloud(pts, np.ones((200, 1))), 0.7)
        assert len(out) <= 200
        cells = np.floor(out.positions / 0.7)
        assert np.all(out.positions >= cells * 0.7 - 1e-12)
        assert np.all(out.positions <= (cells + 1) * 0.7 + 1e-12)

    def test_nonpositive_voxel_rejected(self):
        with pytest.raises(ValueError):
            voxel_downsample(PointCloud([[0, 0, 0]], [[1.0]]), 0.0)


class TestRadiusOutlierFilter:
    def test_isolated_point_removed(self):
        cloud = PointCloud([[0, 0, 0], [0.1, 0, 0], [9, 9, 9]], np.eye(3))
        out = radius_outlier_filter(cloud, 0.5, 1)
        assert len(out) == 2

    def test_zero_min_neighbors_is_identity(self, rng):
        cloud = PointCloud(rng.random((20, 3)), rng.random((20, 2)))
        out = radius_outlier_filter(cloud, 0.01, 0)
        assert np.array_equal(out.positions, cloud.positions)

    @pytest.mark.parametrize("n", [100, 256])
    def test_against_brute_force_oracle(self, rng, n):
        pts = rng.random((n, 3))
        cloud = PointCloud(pts, rng.random((n, 1)),
                           labels=rng.integers(0, 5, n))
        radius, min_n = 0.25, 3
        out = radius_outlier_filter(cloud, radius, min_n)
        keep = []
        for i in range(n):
            count = sum(1 for j in range(n)
                        if j != i and np.linalg.norm(pts[i] - pts[j]) <= radius)
            if count >= min_n:
                keep.append(i)
        assert np.array_equal(out.positions, pts[keep])
        assert np.array_equal(out.labels, cloud.labels[keep])


def test_constructors_produce_clean_edge_lists(rng):
    fmap = FeatureMap(rng.normal(size=(6, 7, 3)))
    cloud = PointCloud(rng.normal(size=(30, 3)), rng.normal(size=(30, 3)))
    graphs = [
        grid_graph(fmap),
        knn_graph(cloud, 4),
        sampled_pixel_graph(fmap, np.arange(0, 42, 2), 3, seed=0),
    ]
    for g in graphs:
        assert np.all(g.edges_u < g.edges_v)
        keys = g.edges_u * g.node_count + g.edges_v
        assert len(np.unique(keys)) == g.edge_count
        assert np.all(np.isfinite(g.weights)) and np.all(g.weights >= 0)
