import numpy as np
import pytest

from attbench.numeric import RngStream


@pytest.fixture
def rng():
    """Fresh deterministic stream per test."""
    return RngStream(12345)


@pytest.fixture
def np_rng():
    """Plain numpy generator for building test data and oracles."""
    return np.random.default_rng(987654321)
