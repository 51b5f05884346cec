import numpy as np
import pytest

from nplab import autodiff as ad


@pytest.fixture(autouse=True)
def finite_checks():
    """Every op output is asserted finite while tests run."""
    ad.set_finite_checks(True)
    yield
    ad.set_finite_checks(False)


@pytest.fixture
def rng():
    return np.random.default_rng(2024)
