import numpy as np
import pytest

from avalign import autodiff as ad


@pytest.fixture(autouse=True)
def float64_mode():
    ad.set_default_dtype(np.float64)
    yield
    ad.set_default_dtype(np.float64)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
