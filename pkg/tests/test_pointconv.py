import numpy as np
import pytest

from pointpwc.autodiff import MlpParams
from pointpwc.autodiff import Tensor
from pointpwc.errors import ShapeError
from pointpwc.geom import furthest_point_sample
from pointpwc.geom import knn
from pointpwc.pointconv import FeatureCloud
from pointpwc.pointconv import PointConvParams
from pointpwc.pointconv import per_point_linear
from pointpwc.pointconv import pointconv


def _leaky(x, slope=0.1):
    return np.where(x > 0, x, slope * x)


def _random_params(rng, in_width, mid=4, out=5, k=6):
    weight_net = MlpParams(
        [
            (Tensor(rng.normal(size=(8, 3))), Tensor(rng.normal(size=8))),
            (Tensor(rng.normal(size=(mid, 8))), Tensor(rng.normal(size=mid))),
        ]
    )
    return PointConvParams(weight_net, Tensor(rng.normal(size=(out, mid * in_width))), Tensor(rng.normal(size=out)), k=k)


def _loop_oracle(centers, positions, features, index, params):
    (w0, b0), (w1, b1) = [(w.data, b.data) for w, b in params.weight_net.layers]
    rows = []
    for i, center in enumerate(centers):
        acc = np.zeros((params.mid_width, features.shape[1]))
        for j in index[i]:
            direction = positions[j] - center
            weight = w1 @ _leaky(w0 @ direction + b0) + b1
            acc += np.outer(weight, features[j])
        rows.append(_leaky(params.projection_weight.data @ acc.reshape(-1) + params.projection_bias.data))
    return np.asarray(rows)


class TestPointConv:
    def test_uniform_weights_give_neighbourhood_mean(self, rng):
        k, channels = 4, 3
        positions = rng.uniform(size=(12, 3))
        features = rng.uniform(0.0, 1.0, size=(12, channels))
        weight_net = MlpParams(
            [
                (Tensor(np.zeros((2, 3))), Tensor(np.zeros(2))),
                (Tensor(np.zeros((1, 2))), Tensor(np.full(1, 1.0 / k))),
            ]
        )
        params = PointConvParams(weight_net, Tensor(np.eye(channels)), Tensor(np.zeros(channels)), k=k)
        nbrs = knn(positions, positions, k)
        out = pointconv(positions, FeatureCloud(positions, features), nbrs, params)
        np.testing.assert_allclose(out.features.data, features[nbrs.indices].mean(axis=1), rtol=1e-12)

    def test_single_neighbour_copies_feature(self, rng):
        positions = rng.uniform(size=(6, 3))
        features = rng.uniform(0.0, 1.0, size=(6, 2))
        weight_net = MlpParams(
            [
                (Tensor(np.zeros((2, 3))), Tensor(np.zeros(2))),
                (Tensor(np.zeros((1, 2))), Tensor(np.ones(1))),
            ]
        )
        params = PointConvParams(weight_net, Tensor(np.eye(2)), Tensor(np.zeros(2)), k=1)
        out = pointconv(positions, FeatureCloud(positions, features), knn(positions, positions, 1), params)
        np.testing.assert_array_equal(out.features.data, features)

    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_matches_loop_oracle(self, seed):
        rng = np.random.default_rng(seed)
        positions = rng.uniform(-1, 1, size=(40, 3))
        features = rng.normal(size=(40, 3))
        centers = positions[furthest_point_sample(positions, 10)]
        params = _random_params(rng, in_width=3)
        nbrs = knn(centers, positions, params.k)
        out = pointconv(centers, FeatureCloud(positions, features), nbrs, params)
        assert out.features.shape == (10, params.out_width)
        np.testing.assert_allclose(out.features.data, _loop_oracle(centers, positions, features, nbrs.indices, params), rtol=1e-10, atol=1e-12)

    def test_translation_invariance(self, rng):
        positions = rng.integers(-512, 512, size=(30, 3)) / 256.0
        features = rng.normal(size=(30, 3))
        params = _random_params(rng, in_width=3)
        nbrs = knn(positions, positions, params.k)
        t = np.array([0.5, -1.25, 2.0])
        base = pointconv(positions, FeatureCloud(positions, features), nbrs, params)
        moved = pointconv(positions + t, FeatureCloud(positions + t, features), nbrs, params)
        np.testing.assert_array_equal(base.features.data, moved.features.data)

    @pytest.mark.parametrize("seed", [0, 1])
    def test_source_permutation_invariance(self, seed):
        rng = np.random.default_rng(seed)
        positions = rng.uniform(-1, 1, size=(32, 3))
        features = rng.normal(size=(32, 3))
        centers = positions[furthest_point_sample(positions, 8)]
        params = _random_params(rng, in_width=3)
        perm = rng.permutation(32)
        nbrs = knn(centers, positions, params.k)
        permuted_nbrs = knn(centers, positions[perm], params.k)
        np.testing.assert_array_equal(perm[permuted_nbrs.indices], nbrs.indices)
        base = pointconv(centers, FeatureCloud(positions, features), nbrs, params)
        permuted = pointconv(centers, FeatureCloud(positions[perm], features[perm]), permuted_nbrs, params)
        np.testing.assert_allclose(permuted.features.data, base.features.data, rtol=1e-12, atol=1e-14)

    def test_neighbour_rows_must_match_centers(self, rng):
        positions = rng.uniform(size=(20, 3))
        params = _random_params(rng, in_width=3)
        nbrs = knn(positions[:5], positions, params.k)
        with pytest.raises(ShapeError):
            pointconv(positions[:6], FeatureCloud(positions, np.zeros((20, 3))), nbrs, params)

    def test_feature_width_must_match(self, rng):
        positions = rng.uniform(size=(20, 3))
        params = _random_params(rng, in_width=3)
        nbrs = knn(positions, positions, params.k)
        with pytest.raises(ShapeError):
            pointconv(positions, FeatureCloud(positions, np.zeros((20, 4))), nbrs, params)

    def test_projection_width_checked(self, rng):
        weight_net = _random_params(rng, in_width=3).weight_net
        with pytest.raises(ShapeError):
            PointConvParams(weight_net, Tensor(np.zeros((5, 7))), Tensor(np.zeros(5)), k=4)


class TestPerPointLinear:
    def test_identity(self, rng):
        x = rng.normal(size=(5, 3))
        np.testing.assert_array_equal(per_point_linear(x, Tensor(np.eye(3)), Tensor(np.zeros(3)), slope=None).data, x)

    def test_zero_weights_give_bias(self):
        bias = np.array([0.5, -1.0])
        out = per_point_linear(np.ones((4, 3)), Tensor(np.zeros((2, 3))), Tensor(bias), slope=None)
        np.testing.assert_array_equal(out.data, np.tile(bias, (4, 1)))

    def test_width_mismatch(self):
        with pytest.raises(ShapeError):
            per_point_linear(np.ones((4, 3)), Tensor(np.zeros((2, 4))), Tensor(np.zeros(2)))


class TestFeatureCloud:
    def test_row_counts_must_match(self, rng):
        with pytest.raises(ShapeError):
            FeatureCloud(rng.uniform(size=(5, 3)), np.zeros((4, 2)))
