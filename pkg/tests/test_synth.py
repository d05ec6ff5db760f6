import math

import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from pointpwc.config import DataConfig
from pointpwc.errors import ConfigError
from pointpwc.synth import SynthSpec
from pointpwc.synth import synth_pair


class TestSynthPair:
    def test_translation_rows_equal_t(self):
        P, Q, gt = synth_pair(SynthSpec(n_points=64, translation=[0.2, -0.1, 0.05], seed=3))
        np.testing.assert_array_equal(gt, np.tile([0.2, -0.1, 0.05], (64, 1)))
        np.testing.assert_array_equal(Q, P + gt)

    def test_rigid_motion(self):
        spec = SynthSpec(n_points=64, motion="rigid", rotation_axis=[1.0, 1.0, 0.0], rotation_deg=20.0, translation=[0.1, 0.0, 0.2], seed=1)
        P, Q, gt = synth_pair(spec)
        axis = np.array([1.0, 1.0, 0.0]) / math.sqrt(2.0)
        expected = Rotation.from_rotvec(axis * math.radians(20.0)).apply(P) + np.array([0.1, 0.0, 0.2])
        np.testing.assert_allclose(Q, expected, atol=1e-12)
        np.testing.assert_allclose(gt, expected - P, atol=1e-12)

    @pytest.mark.parametrize("shape", ["uniform-box", "sphere-shell", "planar-grid", "multi-object"])
    @pytest.mark.parametrize("motion", ["translation", "rigid", "per-object-rigid", "smooth-deformation"])
    def test_same_seed_bit_identical(self, shape, motion):
        spec = SynthSpec(n_points=50, shape=shape, motion=motion, noise_sigma=0.01, seed=9)
        first, second = synth_pair(spec), synth_pair(spec)
        for a, b in zip(first, second):
            np.testing.assert_array_equal(a, b)
        assert first[0].shape == (50, 3)

    def test_seeds_differ(self):
        first = synth_pair(SynthSpec(n_points=32, seed=0))[0]
        second = synth_pair(SynthSpec(n_points=32, seed=1))[0]
        assert not np.array_equal(first, second)

    def test_noise_only_on_second_cloud(self):
        clean = synth_pair(SynthSpec(n_points=64, seed=5))
        noisy = synth_pair(SynthSpec(n_points=64, noise_sigma=0.05, seed=5))
        np.testing.assert_array_equal(clean[0], noisy[0])
        np.testing.assert_array_equal(clean[2], noisy[2])
        assert not np.array_equal(clean[1], noisy[1])

    def test_shapes_lie_where_expected(self):
        sphere = synth_pair(SynthSpec(n_points=200, shape="sphere-shell", seed=2))[0]
        radii = np.linalg.norm(sphere, axis=1)
        assert radii.min() >= 0.9 - 1e-12 and radii.max() <= 1.0 + 1e-12
        plane = synth_pair(SynthSpec(n_points=50, shape="planar-grid", seed=2))[0]
        assert not plane[:, 2].any()
        assert len(np.unique(plane, axis=0)) == 50
        box = synth_pair(SynthSpec(n_points=200, seed=2))[0]
        assert np.abs(box).max() <= 1.0

    def test_per_object_rigid_preserves_object_shape(self):
        spec = SynthSpec(n_points=60, shape="multi-object", motion="per-object-rigid", n_objects=3, seed=4)
        P, Q, _ = synth_pair(spec)
        labels = np.arange(60) % 3
        for label in range(3):
            before = P[labels == label]
            after = Q[labels == label]
            d_before = np.linalg.norm(before[:, None] - before[None], axis=-1)
            d_after = np.linalg.norm(after[:, None] - after[None], axis=-1)
            np.testing.assert_allclose(d_after, d_before, atol=1e-12)

    def test_smooth_deformation_bounded(self):
        spec = SynthSpec(n_points=100, motion="smooth-deformation", translation=[0.0, 0.0, 0.0], deformation_amplitude=0.05, seed=6)
        gt = synth_pair(spec)[2]
        assert np.abs(gt).max() <= 0.05 + 1e-12
        assert np.abs(gt).max() > 0.0


class TestSynthSpec:
    def test_too_few_points(self):
        with pytest.raises(ConfigError):
            synth_pair(SynthSpec(n_points=10, min_points=64))

    def test_negative_noise(self):
        with pytest.raises(ConfigError):
            synth_pair(SynthSpec(noise_sigma=-0.1))

    def test_unknown_shape(self):
        with pytest.raises(ConfigError):
            synth_pair(SynthSpec(shape="torus"))

    def test_zero_rotation_axis(self):
        with pytest.raises(ConfigError):
            synth_pair(SynthSpec(motion="rigid", rotation_axis=[0.0, 0.0, 0.0]))

    def test_from_config_prefers_data_seed(self):
        data = DataConfig(n_points=64, seed=42)
        assert SynthSpec.from_config(data, seed=1).seed == 42
        assert SynthSpec.from_config(DataConfig(n_points=64), seed=1).seed == 1
