import numpy as np
import pytest

from candyman.experiment import generate_data, load_config, train_model


@pytest.fixture(scope="session")
def circle_cfg():
    return load_config("s1")


@pytest.fixture(scope="session")
def circle_data(circle_cfg):
    return generate_data(circle_cfg)


@pytest.fixture(scope="session")
def circle_model(circle_cfg, circle_data):
    return train_model(circle_cfg, circle_data)


@pytest.fixture
def rng():
    return np.random.default_rng(0)
