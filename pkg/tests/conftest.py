import numpy as np
import pytest

from leukonet.tensor import Rng


@pytest.fixture
def rng():
    return Rng(1234)


def f64(a):
    return np.asarray(a, dtype=np.float64)
