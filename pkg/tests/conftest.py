import numpy as np
import pytest

from taft import autodiff as ad


@pytest.fixture
def f64():
    """Run the test body in 64-bit mode."""
    with ad.precision(64):
        yield


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
