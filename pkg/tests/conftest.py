import numpy as np
import pytest

from kvseg import tensor as T
from kvseg.data import Sample, make_synthetic


@pytest.fixture
def double():
    with T.precision("double"):
        yield


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def synthetic_samples(n, size, seed=0, classes=3):
    return [Sample(i, img / 255.0, mask) for i, img, mask in make_synthetic(n, size, seed, classes)]


def tensor(a, grad=False):
    return T.Tensor(np.asarray(a, dtype=np.float64), requires_grad=grad, dtype=np.float64)
