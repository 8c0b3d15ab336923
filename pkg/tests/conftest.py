import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def rand_tensor(rng, shape, requires_grad=True, shift=0.0):
    from ssgrn.tensor import Tensor

    return Tensor(rng.normal(size=shape) + shift, dtype=np.float64, requires_grad=requires_grad)
