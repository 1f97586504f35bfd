import numpy as np
import pytest

from fusedet import dtypes


@pytest.fixture
def fp64():
    """Run a test in 64-bit mode (gradient checks need the headroom)."""
    old = dtypes.is_float64()
    dtypes.set_float64(True)
    yield
    dtypes.set_float64(old)


@pytest.fixture
def rng():
    return np.random.default_rng(0)
