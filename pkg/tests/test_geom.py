import itertools

import numpy as np
import pytest

from pointpwc.errors import GeometryError
from pointpwc.errors import ShapeError
from pointpwc.geom import PointCloud
from pointpwc.geom import furthest_point_sample
from pointpwc.geom import interpolate_idw
from pointpwc.geom import knn
from pointpwc.geom import knn_excluding_self
from pointpwc.geom import warp


def _fps_oracle(points, m, start):
    selected = [start]
    while len(selected) < m:
        best, best_d = None, -1.0
        for index in range(len(points)):
            if index in selected:
                continue
            d = min(float(np.sum((points[index] - points[s]) ** 2)) for s in selected)
            if d > best_d:
                best, best_d = index, d
        selected.append(best)
    return selected


def _knn_oracle(queries, refs, k):
    out = []
    for q in queries:
        d2 = [(float(np.sum((r - q) ** 2)), j) for j, r in enumerate(refs)]
        out.append([j for _, j in sorted(d2)[:k]])
    return np.asarray(out)


def _min_pairwise(points):
    return min(np.linalg.norm(a - b) for a, b in itertools.combinations(points, 2))


class TestPointCloud:
    def test_rejects_bad_shape(self):
        with pytest.raises(GeometryError):
            PointCloud(np.zeros((4, 2)))
        with pytest.raises(GeometryError):
            PointCloud(np.zeros((0, 3)))

    def test_rejects_non_finite(self):
        with pytest.raises(GeometryError):
            PointCloud(np.array([[0.0, np.nan, 0.0]]))


class TestFurthestPointSample:
    def test_square_corners(self):
        corners = np.array([[0, 0, 0], [1, 0, 0], [1, 1, 0], [0, 1, 0]], dtype=float)
        np.testing.assert_array_equal(furthest_point_sample(corners, 2, start=0), [0, 2])

    def test_full_sample_is_permutation(self, rng):
        points = rng.uniform(size=(20, 3))
        assert sorted(furthest_point_sample(points, 20).tolist()) == list(range(20))

    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_matches_greedy_oracle(self, seed):
        points = np.random.default_rng(seed).uniform(-1, 1, size=(64, 3))
        np.testing.assert_array_equal(furthest_point_sample(points, 16, start=3), _fps_oracle(points, 16, 3))

    def test_beats_random_subsets(self, rng):
        points = rng.uniform(size=(64, 3))
        chosen = _min_pairwise(points[furthest_point_sample(points, 8)])
        randoms = [_min_pairwise(points[rng.choice(64, 8, replace=False)]) for _ in range(100)]
        assert chosen >= np.percentile(randoms, 95)

    def test_ties_go_to_lowest_index(self):
        points = np.array([[0, 0, 0], [1, 0, 0], [-1, 0, 0]], dtype=float)
        np.testing.assert_array_equal(furthest_point_sample(points, 2), [0, 1])

    def test_errors(self, rng):
        points = rng.uniform(size=(5, 3))
        with pytest.raises(GeometryError):
            furthest_point_sample(points, 6)
        with pytest.raises(GeometryError):
            furthest_point_sample(points, 2, start=5)


class TestKnn:
    def test_self_is_nearest(self, rng):
        points = rng.uniform(size=(30, 3))
        np.testing.assert_array_equal(knn(points, points, 1).indices[:, 0], np.arange(30))

    def test_simple_line(self):
        refs = np.array([[1, 0, 0], [3, 0, 0], [2, 0, 0]], dtype=float)
        np.testing.assert_array_equal(knn(np.zeros((1, 3)), refs, 2).indices, [[0, 2]])

    def test_matches_sort_oracle(self, rng):
        points = rng.uniform(-1, 1, size=(200, 3))
        np.testing.assert_array_equal(knn(points, points, 16).indices, _knn_oracle(points, points, 16))

    def test_distance_rows_non_decreasing(self, rng):
        queries, refs = rng.normal(size=(40, 3)), rng.normal(size=(60, 3))
        index = knn(queries, refs, 10).indices
        d = np.linalg.norm(refs[index] - queries[:, None, :], axis=-1)
        assert np.all(np.diff(d, axis=1) >= 0)

    def test_permuting_refs_permutes_indices(self, rng):
        queries, refs = rng.normal(size=(25, 3)), rng.normal(size=(50, 3))
        perm = rng.permutation(50)
        original = knn(queries, refs, 6).indices
        permuted = knn(queries, refs[perm], 6).indices
        np.testing.assert_array_equal(perm[permuted], original)

    @pytest.mark.parametrize("seed", [0, 1, 2, 3])
    def test_kdtree_matches_brute(self, seed):
        rng = np.random.default_rng(seed)
        refs = rng.uniform(-1, 1, size=(150, 3))
        queries = np.concatenate([rng.uniform(-1, 1, size=(40, 3)), refs[:10]])
        np.testing.assert_array_equal(knn(queries, refs, 12, "kdtree").indices, knn(queries, refs, 12, "brute").indices)

    def test_kdtree_matches_brute_with_duplicates(self):
        grid = np.array([[x, y, 0.0] for x in range(4) for y in range(4)], dtype=float)
        refs = np.concatenate([grid, grid[:5]])
        np.testing.assert_array_equal(knn(grid, refs, 7, "kdtree").indices, knn(grid, refs, 7, "brute").indices)

    def test_errors(self, rng):
        points = rng.uniform(size=(5, 3))
        with pytest.raises(GeometryError):
            knn(points, points, 6)
        with pytest.raises(GeometryError):
            knn(points, points, 0)
        with pytest.raises(GeometryError):
            knn(points, points, 2, backend="grid")


class TestKnnExcludingSelf:
    def test_self_removed(self, rng):
        points = rng.uniform(size=(30, 3))
        index = knn_excluding_self(points, 5).indices
        assert index.shape == (30, 5)
        assert not np.any(index == np.arange(30)[:, None])
        np.testing.assert_array_equal(index, knn(points, points, 6).indices[:, 1:])

    def test_k_clamped_to_cloud(self):
        points = np.array([[0, 0, 0], [1, 0, 0]], dtype=float)
        np.testing.assert_array_equal(knn_excluding_self(points, 8).indices, [[1], [0]])

    def test_single_point(self):
        with pytest.raises(GeometryError):
            knn_excluding_self(np.zeros((1, 3)), 3)

    def test_duplicates_keep_width(self):
        points = np.zeros((4, 3))
        index = knn_excluding_self(points, 2).indices
        assert index.shape == (4, 2)
        assert not np.any(index == np.arange(4)[:, None])


class TestInterpolateIdw:
    def test_coincident_point_snaps(self, rng):
        coarse = rng.uniform(size=(6, 3))
        values = rng.normal(size=(6, 3))
        out = interpolate_idw(coarse, values, coarse[[4, 1]], 3)
        np.testing.assert_array_equal(out.data, values[[4, 1]])

    def test_equidistant_average(self):
        coarse = np.array([[-1, 0, 0], [1, 0, 0]], dtype=float)
        values = np.array([[2.0, 0.0, 0.0], [4.0, 2.0, -2.0]])
        out = interpolate_idw(coarse, values, np.zeros((1, 3)), 2)
        np.testing.assert_allclose(out.data, [[3.0, 1.0, -1.0]], rtol=1e-12)

    def test_constant_field(self, rng):
        coarse = rng.uniform(size=(10, 3))
        values = np.tile([0.3, -0.2, 1.5], (10, 1))
        out = interpolate_idw(coarse, values, rng.uniform(size=(25, 3)), 3)
        np.testing.assert_allclose(out.data, np.tile([0.3, -0.2, 1.5], (25, 1)), rtol=1e-12)

    def test_k_one_copies_nearest(self, rng):
        coarse = rng.uniform(size=(10, 3))
        values = rng.normal(size=(10, 4))
        fine = rng.uniform(size=(7, 3))
        nearest = knn(fine, coarse, 1).indices[:, 0]
        np.testing.assert_allclose(interpolate_idw(coarse, values, fine, 1).data, values[nearest], rtol=1e-12)

    def test_rows_in_neighbour_hull(self, rng):
        coarse = rng.uniform(size=(12, 3))
        values = rng.normal(size=(12, 3))
        fine = rng.uniform(size=(30, 3))
        out = interpolate_idw(coarse, values, fine, 3).data
        gathered = values[knn(fine, coarse, 3).indices]
        assert np.all(out >= gathered.min(axis=1) - 1e-12)
        assert np.all(out <= gathered.max(axis=1) + 1e-12)

    def test_value_rows_must_match(self, rng):
        with pytest.raises(ShapeError):
            interpolate_idw(rng.uniform(size=(5, 3)), np.zeros((4, 3)), rng.uniform(size=(2, 3)), 2)


class TestWarp:
    def test_zero_flow(self, rng):
        points = rng.normal(size=(10, 3))
        np.testing.assert_array_equal(warp(points, np.zeros((10, 3))).array, points)

    def test_constant_translation(self, rng):
        points = rng.normal(size=(10, 3))
        t = np.array([0.5, -1.0, 2.0])
        np.testing.assert_array_equal(warp(points, np.tile(t, (10, 1))).array, points + t)

    def test_inverse(self, rng):
        points, flow = rng.normal(size=(10, 3)), rng.normal(size=(10, 3))
        np.testing.assert_allclose(warp(warp(points, flow), -flow).array, points, atol=1e-12)

    def test_translation_equivariance(self, rng):
        points, flow = rng.normal(size=(10, 3)), rng.normal(size=(10, 3))
        t = np.array([1.0, 2.0, 3.0])
        np.testing.assert_allclose(warp(points + t, flow).array, warp(points, flow).array + t, atol=1e-12)

    def test_size_mismatch(self, rng):
        with pytest.raises(ShapeError):
            warp(rng.normal(size=(10, 3)), np.zeros((9, 3)))
