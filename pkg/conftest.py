import numpy as np
import pytest

from data import SampleLayout, gen_synthetic
from tensor import set_default_dtype, set_num_threads


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run desk-scale training tests")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip)


@pytest.fixture(autouse=True)
def _reset_globals():
    yield
    set_default_dtype("f32")
    set_num_threads(1)


@pytest.fixture
def f64():
    """64-bit mode for finite-difference checks."""
    set_default_dtype("f64")
    yield np.float64
    set_default_dtype("f32")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_layout():
    return SampleLayout(t_in=2, t_out=3)


@pytest.fixture
def tiny_dataset():
    return gen_synthetic(seed=7, T=24, H=16, W=16, n_blobs=2, velocity_range=1.0)
