import numpy as np
import pytest

from qkica.preprocess import whiten
from qkica.sources import SourceSpec, sample_sources


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: full-size runs taking a minute or more (deselect with -m 'not slow')")


@pytest.fixture
def sources():
    """Uniform and Laplace sources, 300 samples each."""
    return sample_sources(SourceSpec(("uniform", "laplace"), 300, 7))


@pytest.fixture
def whitened(sources):
    return whiten(sources)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
