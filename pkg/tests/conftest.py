import numpy as np
import pytest
import torch

from portraitgen.assets import generate_toy_models
from portraitgen.render import set_threads


def pytest_configure(config):
    set_threads(1)
    torch.set_default_dtype(torch.float32)


@pytest.fixture(scope="session")
def toy_models():
    return generate_toy_models(0)


@pytest.fixture(scope="session")
def face(toy_models):
    return toy_models[0]


@pytest.fixture(scope="session")
def body(toy_models):
    return toy_models[1]


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
