import numpy as np
import pytest

from pointpwc.config import DataConfig
from pointpwc.config import LossConfig
from pointpwc.config import NetworkConfig
from pointpwc.config import RunConfig
from pointpwc.config import TrainConfig


def small_network_config(**overrides) -> NetworkConfig:
    values = dict(
        levels=3,
        pyramid_channels=[8, 16],
        cost_dims=[8, 8],
        predictor_channels=[8, 8],
        predictor_feature_width=8,
        weight_net_hidden=4,
        weight_net_channels=4,
        k_pyramid=8,
        k_cost=8,
        k_predictor=8,
    )
    values.update(overrides)
    return NetworkConfig(**values)


def small_run_config(steps: int = 3, mode: str = "self-supervised", n_points: int = 32, **network) -> RunConfig:
    return RunConfig(
        network=small_network_config(**network),
        loss=LossConfig(mode=mode, alpha=[0.04, 0.08, 0.16]),
        train=TrainConfig(lr=1e-3, steps=steps, seed=7, checkpoint_every=2),
        data=DataConfig(n_points=n_points, motion="translation", translation=[0.1, 0.05, 0.0]),
    ).validate()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def net_config():
    return small_network_config()


@pytest.fixture
def run_config():
    return small_run_config()
