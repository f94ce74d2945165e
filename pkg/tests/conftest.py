import numpy as np
import pytest

from src.services.calibration import calibrate_model
from src.services.transformer_runner import ModelConfig, build_random_model
from src.utils.synthetic import token_batches


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def toy_config():
    return ModelConfig(
        name="toy",
        layers=2,
        d_model=64,
        ffn_dim=256,
        heads=2,
        d_k=32,
        max_seq=64,
        token_source={"kind": "text", "seq_len": 64},
    )


@pytest.fixture(scope="session")
def toy_model(toy_config):
    return build_random_model(toy_config, seed=0)


@pytest.fixture(scope="session")
def spread_model(toy_config):
    """Weight blocks spread over seven binades"""
    return build_random_model(toy_config, seed=1, scale_spread=3)


@pytest.fixture(scope="session")
def toy_batches(toy_config):
    return token_batches(2, 32, toy_config.d_model, seed=0)


@pytest.fixture(scope="session")
def toy_calibration(toy_model, toy_batches):
    return calibrate_model(toy_model, toy_batches)


@pytest.fixture(scope="session")
def spread_calibration(spread_model, toy_batches):
    return calibrate_model(spread_model, toy_batches)

