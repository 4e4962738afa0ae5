import numpy as np
import pytest

from taskpyramid.tensor import ParamStore


@pytest.fixture
def rng():
    return np.random.Generator(np.random.Philox(key=np.array([1234, 0], dtype=np.uint64)))


@pytest.fixture
def store():
    return ParamStore(rng_seed=7)
