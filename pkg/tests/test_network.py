import math

import numpy as np
import pytest

from conftest import small_network_config
from pointpwc.errors import GeometryError
from pointpwc.errors import ShapeError
from pointpwc.geom import interpolate_idw
from pointpwc.network import COMPONENTS
from pointpwc.network import build_pyramid
from pointpwc.network import component_timings
from pointpwc.network import forward
from pointpwc.network import gt_pyramid
from pointpwc.network import init_params
from pointpwc.network import param_shapes
from pointpwc.network import predict_flow_level
from pointpwc.network import predict_full_resolution
from pointpwc.pointconv import FeatureCloud


def _pair(rng, n=64, shift=(0.1, 0.05, 0.0)):
    P = rng.uniform(-1, 1, size=(n, 3))
    return P, P + np.asarray(shift) + rng.normal(0.0, 0.01, size=P.shape)


def _randomize_heads(params, rng):
    for name, value in params.arrays.items():
        if ".head.1." in name:
            value[...] = rng.normal(0.0, 0.1, size=value.shape)
    return params


class TestPyramid:
    def test_level_sizes_follow_factor_four(self, rng):
        config = small_network_config(levels=4, pyramid_channels=[8, 8, 8], cost_dims=[8, 8, 8])
        P = rng.uniform(size=(256, 3))
        pyramid = build_pyramid(P, P, init_params(config, 0))
        assert pyramid.sizes == [256, 64, 16, 4]

    def test_odd_sizes_round_up(self, net_config, rng):
        P = rng.uniform(size=(37, 3))
        assert build_pyramid(P, P, init_params(net_config, 0)).sizes == [37, math.ceil(37 / 4), math.ceil(math.ceil(37 / 4) / 4)]

    def test_level_zero_is_input(self, net_config, rng):
        P = rng.uniform(size=(64, 3))
        pyramid = build_pyramid(P, P, init_params(net_config, 0))
        np.testing.assert_array_equal(pyramid.cloud(0).array, P)
        np.testing.assert_array_equal(pyramid.sample_maps[0], np.arange(64))

    def test_levels_are_fps_subsets(self, net_config, rng):
        P = rng.uniform(size=(64, 3))
        pyramid = build_pyramid(P, P, init_params(net_config, 0))
        for level in range(1, len(pyramid.levels)):
            previous = pyramid.cloud(level - 1).array
            np.testing.assert_array_equal(pyramid.cloud(level).array, previous[pyramid.sample_maps[level]])

    def test_shared_weights(self, net_config, rng):
        P = rng.uniform(size=(64, 3))
        params = init_params(net_config, 3)
        first = build_pyramid(P, P, params)
        second = build_pyramid(P.copy(), P.copy(), params)
        for a, b in zip(first.levels, second.levels):
            np.testing.assert_array_equal(a.features.data, b.features.data)

    def test_feature_widths(self, net_config, rng):
        P = rng.uniform(size=(64, 3))
        pyramid = build_pyramid(P, P, init_params(net_config, 0))
        assert [level.width for level in pyramid.levels] == [3, 16, 16]

    def test_too_few_points(self, net_config, rng):
        P = rng.uniform(size=(15, 3))
        with pytest.raises(GeometryError, match="16"):
            build_pyramid(P, P, init_params(net_config, 0))


class TestParams:
    def test_init_layout(self, net_config):
        params = init_params(net_config, 0)
        shapes = param_shapes(net_config)
        assert list(params.arrays) == list(shapes)
        for name, value in params.arrays.items():
            assert value.shape == shapes[name]
            if name.endswith(".b") or ".head.1." in name:
                assert not value.any()
            else:
                fan_out, fan_in = value.shape
                assert np.abs(value).max() <= math.sqrt(6.0 / (fan_in + fan_out))

    def test_predictors_not_shared_across_levels(self, net_config):
        names = list(param_shapes(net_config))
        assert any(name.startswith("predictor.1.") for name in names)
        assert any(name.startswith("predictor.2.") for name in names)

    def test_same_seed_same_params(self, net_config):
        a, b = init_params(net_config, 11), init_params(net_config, 11)
        for name in a.arrays:
            np.testing.assert_array_equal(a.arrays[name], b.arrays[name])

    def test_copy_is_independent(self, net_config):
        params = init_params(net_config, 0)
        clone = params.copy()
        clone.arrays["pyramid.1.linear.w"][...] = 0.0
        assert params.arrays["pyramid.1.linear.w"].any()

    def test_feature_toggles_change_layout(self):
        full = param_shapes(small_network_config())
        bare = param_shapes(small_network_config(use_upsampled_feature=False, use_predictor_feature=False))
        assert "pyramid.1.merge.w" in full
        assert "pyramid.1.merge.w" not in bare
        assert bare["predictor.1.conv.0.proj.w"][1] < full["predictor.1.conv.0.proj.w"][1]

    def test_correlation_matching_has_no_cost_mlp(self):
        shapes = param_shapes(small_network_config(matching="correlation"))
        assert not any(".mlp." in name for name in shapes)


class TestPredictor:
    def test_zero_head_zero_flow_and_feature_width(self, net_config, rng):
        params = init_params(net_config, 0).bind()
        top = net_config.levels - 1
        p_feats = FeatureCloud(rng.uniform(size=(10, 3)), rng.normal(size=(10, net_config.pyramid_channels[-1])))
        cost = rng.normal(size=(10, net_config.cost_dims[-1]))
        flow, pred_feat = predict_flow_level(p_feats, cost, None, None, params.predictor(top, 8))
        np.testing.assert_array_equal(flow.data, np.zeros((10, 3)))
        assert pred_feat.shape == (10, net_config.predictor_feature_width)

    def test_channel_mismatch(self, net_config, rng):
        params = init_params(net_config, 0).bind()
        top = net_config.levels - 1
        p_feats = FeatureCloud(rng.uniform(size=(10, 3)), rng.normal(size=(10, net_config.pyramid_channels[-1])))
        with pytest.raises(ShapeError):
            predict_flow_level(p_feats, rng.normal(size=(10, 7)), None, None, params.predictor(top, 8))


class TestForward:
    def test_zero_heads_give_zero_flow(self, net_config, rng):
        P = rng.uniform(size=(64, 3))
        flows = forward(P, P.copy(), init_params(net_config, 0))
        for flow in flows.flows:
            np.testing.assert_array_equal(flow.data, np.zeros(flow.shape))

    def test_flow_sizes_match_pyramid(self, net_config, rng):
        P, Q = _pair(rng)
        flows = forward(P, Q, _randomize_heads(init_params(net_config, 0), rng))
        assert flows.sizes == flows.p_pyramid.sizes
        assert len(flows) == net_config.levels

    def test_residual_structure(self, net_config, rng):
        P, Q = _pair(rng)
        params = _randomize_heads(init_params(net_config, 2), rng).zero_flow_heads([1])
        flows = forward(P, Q, params)
        coarse, fine = flows.p_pyramid.cloud(2), flows.p_pyramid.cloud(1)
        upsampled = interpolate_idw(coarse, flows.flows[2], fine, min(net_config.k_upsample, len(coarse)))
        assert np.any(flows.flows[2].data != 0.0)
        np.testing.assert_array_equal(flows.flows[1].data, upsampled.data)

    def test_finest_level_is_upsampled(self, net_config, rng):
        P, Q = _pair(rng)
        flows = forward(P, Q, _randomize_heads(init_params(net_config, 2), rng))
        level1 = flows.p_pyramid.cloud(1)
        expected = interpolate_idw(level1, flows.flows[1], flows.p_pyramid.cloud(0), net_config.k_upsample)
        np.testing.assert_array_equal(flows.flows[0].data, expected.data)

    def test_deterministic(self, net_config, rng):
        P, Q = _pair(rng)
        params = _randomize_heads(init_params(net_config, 4), rng)
        first, second = forward(P, Q, params), forward(P, Q, params)
        for a, b in zip(first.flows, second.flows):
            np.testing.assert_array_equal(a.data, b.data)

    def test_kdtree_backend_matches_brute(self, rng):
        P, Q = _pair(rng)
        brute = _randomize_heads(init_params(small_network_config(), 4), np.random.default_rng(0))
        kdtree = init_params(small_network_config(knn_backend="kdtree"), 4)
        kdtree.arrays = {name: value.copy() for name, value in brute.arrays.items()}
        np.testing.assert_array_equal(predict_full_resolution(P, Q, brute), predict_full_resolution(P, Q, kdtree))

    @pytest.mark.parametrize(
        "overrides",
        [
            {"use_upsampled_feature": False, "use_predictor_feature": False},
            {"use_upsampled_feature": True, "use_predictor_feature": False},
            {"use_upsampled_feature": False, "use_predictor_feature": True},
            {"matching": "correlation"},
        ],
    )
    def test_variants_run(self, rng, overrides):
        config = small_network_config(**overrides)
        P, Q = _pair(rng)
        flow = predict_full_resolution(P, Q, _randomize_heads(init_params(config, 0), rng))
        assert flow.shape == P.shape
        assert np.all(np.isfinite(flow))

    def test_unequal_cloud_sizes(self, net_config, rng):
        P = rng.uniform(size=(64, 3))
        Q = rng.uniform(size=(48, 3))
        flows = forward(P, Q, _randomize_heads(init_params(net_config, 0), rng))
        assert flows.q_pyramid.sizes == [48, 12, 3]
        assert flows.flows[0].shape == (64, 3)


class TestGroundTruthPyramid:
    def test_subsampled_through_sample_maps(self, net_config, rng):
        P = rng.uniform(size=(64, 3))
        gt = rng.normal(size=(64, 3))
        pyramid = build_pyramid(P, P, init_params(net_config, 0))
        levels = gt_pyramid(gt, pyramid)
        assert [len(level) for level in levels] == pyramid.sizes
        np.testing.assert_array_equal(levels[2], gt[pyramid.sample_maps[1]][pyramid.sample_maps[2]])

    def test_size_mismatch(self, net_config, rng):
        P = rng.uniform(size=(64, 3))
        pyramid = build_pyramid(P, P, init_params(net_config, 0))
        with pytest.raises(ShapeError):
            gt_pyramid(np.zeros((63, 3)), pyramid)


class TestComponentTimings:
    def test_all_components_positive(self, net_config, rng):
        P, Q = _pair(rng)
        timings = component_timings(P, Q, init_params(net_config, 0))
        assert set(timings) == set(COMPONENTS)
        assert all(value > 0 for value in timings.values())
