import numpy as np
import pytest

from app.models.quant_params import QuantParams
from app.models.training import TrainConfig


@pytest.fixture
def rng():
    return np.random.Generator(np.random.Philox(1234))


@pytest.fixture
def nonuniform_params():
    """n=2, s=0, a=[0.2, 1.0, 0.8]: cut points {0, 0.2, 1.2, 2.0}, thresholds {0.1, 0.7, 1.6}."""
    return QuantParams(n=2, s=0.0, a=[0.2, 1.0, 0.8], beta1=1.0, beta2=1.0)


@pytest.fixture
def tiny_config():
    """Small synthetic run used by the checkpoint / export / CLI tests."""
    return TrainConfig(
        hidden=[8, 8],
        epochs=2,
        batch_size=32,
        synthetic_samples=128,
        synthetic_dim=4,
        seed=3,
    )
