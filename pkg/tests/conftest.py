import numpy as np
import pytest


def random_spd(rng, d, jitter=0.5):
    a = rng.standard_normal((d, d))
    return a @ a.T + jitter * np.eye(d)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)
