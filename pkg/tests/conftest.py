"""
Shared fixtures: a tiny network config that trains in milliseconds and small
synthetic datasets.
"""
import numpy as np
import pytest

from mtdnet.core.config import desk_preset
from mtdnet.models import (
    ClsConvConfig,
    ConvStage,
    ExperimentConfig,
    LossConfig,
    NetConfig,
    SplitProtocol,
    SynthSpec,
    TrainConfig,
    TrunkConfig,
)
from mtdnet.services.synth_data import generate


def tiny_net_config(**loss) -> NetConfig:
    """16x16 input, trunk [6, 5, 5], classifier flattening to 24 values."""
    return NetConfig(
        input_shape=[3, 16, 16],
        trunk=TrunkConfig(
            conv1=ConvStage(channels=4, kernel=3, pool_k=2, pool_stride=2),
            conv2=ConvStage(channels=6, kernel=3),
        ),
        embed_dim=8,
        cls_convs=ClsConvConfig(
            conv3=ConvStage(channels=8, kernel=3, pad=1, in_channels=12),
            conv4=ConvStage(channels=8, kernel=3, pad=1),
            conv5=ConvStage(channels=6, kernel=3, pad=1, pool_k=2, pool_stride=2),
        ),
        fc_dims=[16, 8, 2],
        loss=LossConfig(**loss),
    )


@pytest.fixture
def tiny_cfg() -> NetConfig:
    return tiny_net_config()


@pytest.fixture
def desk_cfg() -> NetConfig:
    return desk_preset()


@pytest.fixture
def tiny_spec() -> SynthSpec:
    return SynthSpec(n_identities=6, image_size=[16, 16], seed=3)


@pytest.fixture
def tiny_dataset(tiny_spec):
    return generate(tiny_spec)


@pytest.fixture
def tiny_train_cfg() -> TrainConfig:
    return TrainConfig(epochs=2, batch_size=8, triplets_per_pair=2, learning_rate=1e-3, seed=1)


@pytest.fixture
def tiny_experiment(tiny_cfg, tiny_spec, tiny_train_cfg) -> ExperimentConfig:
    return ExperimentConfig(
        net=tiny_cfg,
        train=tiny_train_cfg,
        data=tiny_spec.model_copy(update={"n_identities": 8}),
        split=SplitProtocol(n_test_identities=4, seed=0),
    )


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)
