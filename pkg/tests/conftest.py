import dataclasses

import numpy as np
import pytest

from edgedoc import model as M


@pytest.fixture(scope="session")
def tiny_cfg():
    """Narrow 64x64 network for gradient checks and quick training runs."""
    return M.REDUCED


@pytest.fixture(scope="session")
def tiny_params(tiny_cfg):
    return M.build_model(tiny_cfg, 3)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def reduced_at(size):
    return dataclasses.replace(M.REDUCED, input_size=(size, size))
