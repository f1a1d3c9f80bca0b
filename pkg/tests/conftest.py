import numpy as np
import pytest

from smediff.states import random_state


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture
def states(rng):
    return np.stack([random_state(rng, 2) for _ in range(100)])


def random_matrix(rng, n=2, scale=1.0):
    return scale * (rng.standard_normal((n, n)) + 1j * rng.standard_normal((n, n)))
