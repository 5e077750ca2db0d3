import numpy as np
import pytest

from defectscan import backend


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def numpy_backend():
    """Run a test on the pure-numpy kernel path, restoring the default after."""
    previous = backend.active_backend()
    backend.set_backend("numpy")
    yield
    backend.set_backend(previous)
