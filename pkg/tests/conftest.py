import numpy as np
import pytest

from leafnet import backend


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(params=["numba", "numpy"])
def each_backend(request):
    """Run a test under both kernel backends."""
    prev = backend.active_backend()
    backend.set_backend(request.param)
    yield request.param
    backend.set_backend(prev)
