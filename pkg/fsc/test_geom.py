"""
Tests for point cloud storage, neighbor queries, normals and subsampling
"""

from itertools import product

import numpy as np
import pytest
from errors import DegenerateExtent, EmptyInput, InsufficientPoints, InvalidCloud
from geom import (
    NeighborIndex,
    PointCloud,
    estimate_normals,
    farthest_point_indices,
    farthest_point_sample,
    knn,
    knn_batch,
    normalize_unit,
    radius_neighbors,
    radius_pairs,
    subsample_random,
)
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays


def brute_force_knn(points, query, k):
    dists = np.sqrt(((points - query) ** 2).sum(axis=1))
    order = np.lexsort((np.arange(len(points)), dists))[:k]
    return [(int(i), float(dists[i])) for i in order]


class TestPointCloud:
    """Test construction invariants"""

    def test_points_are_read_only_float64(self):
        cloud = PointCloud([[0, 0, 0], [1, 2, 3]])
        assert cloud.points.dtype == np.float64
        with pytest.raises(ValueError):
            cloud.points[0, 0] = 5.0

    def test_rejects_bad_shape(self):
        with pytest.raises(InvalidCloud):
            PointCloud(np.zeros((4, 2)))

    def test_rejects_non_finite(self):
        with pytest.raises(InvalidCloud):
            PointCloud([[0.0, np.nan, 0.0]])

    def test_rejects_non_unit_normals(self):
        with pytest.raises(InvalidCloud):
            PointCloud([[0, 0, 0]], [[0, 0, 2]])

    def test_empty_cloud_is_allowed(self):
        assert len(PointCloud(np.empty(0))) == 0

    def test_subset_keeps_order_and_normals(self, cube_cloud):
        sub = cube_cloud.subset([5, 1, 3])
        np.testing.assert_array_equal(sub.points, cube_cloud.points[[5, 1, 3]])
        np.testing.assert_array_equal(sub.normals, cube_cloud.normals[[5, 1, 3]])


class TestNeighborQueries:
    """Test kd-tree queries against an exhaustive scan"""

    def test_knn_matches_brute_force(self, sphere_cloud, rng):
        index = NeighborIndex(sphere_cloud)
        for query in rng.normal(size=(20, 3)):
            assert knn(index, query, 7) == brute_force_knn(sphere_cloud.points, query, 7)

    def test_knn_ties_prefer_lower_index(self):
        # four points equidistant from the origin
        cloud = PointCloud([[1, 0, 0], [0, 1, 0], [-1, 0, 0], [0, -1, 0], [5, 5, 5]])
        result = knn(NeighborIndex(cloud, leaf_size=1), [0, 0, 0], 2)
        assert [i for i, _ in result] == [0, 1]

    def test_batch_matches_single_queries(self, sphere_cloud):
        index = NeighborIndex(sphere_cloud)
        batch = knn_batch(index, sphere_cloud.points, 10)
        for row, query in zip(batch, sphere_cloud.points, strict=True):
            assert row.tolist() == [i for i, _ in knn(index, query, 10)]

    def test_batch_ties_prefer_lower_index(self):
        # origin plus the twelve cuboctahedron vertices, all at distance sqrt(2)
        ring = [v for v in product((-1.0, 0.0, 1.0), repeat=3) if np.count_nonzero(v) == 2]
        cloud = PointCloud(np.vstack([[0.0, 0.0, 0.0], *ring]))
        index = NeighborIndex(cloud, leaf_size=1)
        # the widened query cannot hold every tie here, so the row falls back to knn
        assert knn_batch(index, [[0.0, 0.0, 0.0]], 4).tolist() == [[0, 1, 2, 3]]

    def test_knn_too_many(self, sphere_cloud):
        with pytest.raises(InsufficientPoints):
            knn(NeighborIndex(sphere_cloud), [0, 0, 0], len(sphere_cloud) + 1)

    @given(
        arrays(np.float64, (40, 3), elements=st.floats(-1, 1, allow_nan=False)),
        st.integers(1, 40),
    )
    def test_knn_property(self, points, k):
        cloud = PointCloud(points)
        query = points.mean(axis=0)
        assert knn(NeighborIndex(cloud, leaf_size=4), query, k) == brute_force_knn(
            points, query, k
        )

    def test_radius_neighbors_sorted_and_excluding_self(self, sphere_cloud):
        index = NeighborIndex(sphere_cloud)
        found = radius_neighbors(index, sphere_cloud.points[0], 0.3, exclude=0)
        dists = np.linalg.norm(sphere_cloud.points - sphere_cloud.points[0], axis=1)
        expected = [i for i in np.flatnonzero(dists <= 0.3) if i != 0]
        assert found == expected
        assert found == sorted(found)

    def test_radius_pairs_symmetric(self, sphere_cloud):
        pairs, dists = radius_pairs(NeighborIndex(sphere_cloud), 0.2)
        as_set = {tuple(p) for p in pairs.tolist()}
        assert all((j, i) in as_set for i, j in as_set)
        assert np.all(dists <= 0.2)
        assert np.all(pairs[:, 0] != pairs[:, 1])

    def test_radius_must_be_positive(self, sphere_cloud):
        with pytest.raises(ValueError):
            radius_neighbors(NeighborIndex(sphere_cloud), [0, 0, 0], 0.0)


class TestNormalize:
    """Test unit-ball normalization"""

    def test_farthest_point_lands_on_unit_sphere(self, rng):
        cloud = PointCloud(rng.normal(3.0, 2.0, size=(100, 3)))
        normalized, scale, centroid = normalize_unit(cloud)
        np.testing.assert_allclose(normalized.points.mean(axis=0), 0.0, atol=1e-12)
        assert np.linalg.norm(normalized.points, axis=1).max() == pytest.approx(1.0)
        np.testing.assert_allclose(normalized.points / scale + centroid, cloud.points)

    def test_empty(self):
        with pytest.raises(EmptyInput):
            normalize_unit(PointCloud(np.empty((0, 3))))

    def test_coincident_points(self):
        with pytest.raises(DegenerateExtent):
            normalize_unit(PointCloud(np.ones((5, 3))))


class TestNormals:
    """Test PCA normal estimation"""

    def test_sphere_normals_point_outward(self, sphere_cloud):
        with_normals = estimate_normals(sphere_cloud, 10)
        cosines = (with_normals.normals * sphere_cloud.points).sum(axis=1)
        assert np.all(cosines > 0.8)
        np.testing.assert_allclose(np.linalg.norm(with_normals.normals, axis=1), 1.0)

    def test_collinear_points_are_flagged(self):
        points = np.column_stack([np.linspace(0, 1, 12), np.zeros(12), np.zeros(12)])
        result = estimate_normals(PointCloud(points), 5)
        assert result.degenerate.all()
        np.testing.assert_array_equal(result.normals, np.tile([0.0, 0.0, 1.0], (12, 1)))

    def test_tied_neighbours_use_lowest_indices(self):
        # three unit-distance neighbours of the origin; the two lowest span z=0
        cloud = PointCloud([[0, 0, 0], [1.0, 0, 0], [0, 1.0, 0], [0, 0, 1.0], [-1.0, 0, 0]])
        normal = estimate_normals(cloud, 3).normals[0]
        np.testing.assert_allclose(np.abs(normal), [0.0, 0.0, 1.0], atol=1e-12)

    def test_needs_k_points(self):
        with pytest.raises(InsufficientPoints):
            estimate_normals(PointCloud(np.eye(3)), 5)


class TestSubsampling:
    """Test random and farthest point subsampling"""

    def test_random_is_deterministic_without_replacement(self, sphere_cloud):
        a = subsample_random(sphere_cloud, 100, 9)
        b = subsample_random(sphere_cloud, 100, 9)
        np.testing.assert_array_equal(a.points, b.points)
        assert len(np.unique(a.points, axis=0)) == 100

    def test_random_too_many(self, sphere_cloud):
        with pytest.raises(InsufficientPoints):
            subsample_random(sphere_cloud, 513, 0)

    def test_fps_prefix_property(self, sphere_cloud):
        long = farthest_point_indices(sphere_cloud.points, 64)
        short = farthest_point_indices(sphere_cloud.points, 16)
        np.testing.assert_array_equal(long[:16], short)

    def test_fps_on_a_line_picks_extremes_first(self):
        points = np.column_stack([np.arange(11.0), np.zeros(11), np.zeros(11)])
        chosen = farthest_point_sample(PointCloud(points), 3).points[:, 0]
        np.testing.assert_array_equal(chosen, [0.0, 10.0, 5.0])

    def test_fps_points_are_distinct(self, sphere_cloud):
        picked = farthest_point_indices(sphere_cloud.points, 200)
        assert len(set(picked.tolist())) == 200
