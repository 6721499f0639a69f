import numpy as np
import pytest

from rsfr import phantom


@pytest.fixture(scope="session")
def default_spec():
    return phantom.PhantomSpec()


@pytest.fixture(scope="session")
def default_field(default_spec):
    return phantom.generate_tensor_field(default_spec)


@pytest.fixture(scope="session")
def noiseless_slices(default_field, default_spec):
    return phantom.simulate_dwis(default_field, default_spec)


@pytest.fixture()
def rng():
    return np.random.default_rng(1234)
