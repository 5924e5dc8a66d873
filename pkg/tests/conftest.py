import numpy as np
import pytest

from protosmooth import MlpSpec, NoiseAugmentation, train_mlp
from protosmooth.episodes import ClusterSpec, episode_stream, generate_episode

TOY_CLUSTERS = dict(n_way=2, shots=1, input_dim=32, center_spread=2.0, within_std=0.5)


@pytest.fixture(scope="session")
def toy_model():
    """2-way, D=32 -> d=16 prototypical MLP trained with noise augmentation."""
    spec = ClusterSpec(queries_per_class=10, seed=1, **TOY_CLUSTERS)
    return train_mlp(MlpSpec([32, 64, 16]), episode_stream(spec), 1e-3, 2000,
                     NoiseAugmentation(1.0, 0.3), seed=0)


@pytest.fixture(scope="session")
def toy_episode():
    return generate_episode(ClusterSpec(queries_per_class=100, seed=2024, **TOY_CLUSTERS))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
