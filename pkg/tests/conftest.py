import numpy as np
import pytest

from spaformer.tensor import Parameter, Tensor


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def make_param(rng):
    def make(shape, lo=-1.0, hi=1.0, name="p"):
        return Parameter(rng.uniform(lo, hi, size=shape), name)

    return make


@pytest.fixture
def make_tensor(rng):
    def make(shape, lo=-1.0, hi=1.0):
        return Tensor(rng.uniform(lo, hi, size=shape))

    return make
