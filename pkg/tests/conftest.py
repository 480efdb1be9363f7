import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def numeric_grad(loss_fn, arr, step=1e-5):
    """Central-difference gradient of a scalar loss over a raw numpy array.

    Independent of the package's own gradcheck module on purpose: tests use
    this as the oracle for backward rules.
    """
    g = np.zeros_like(arr, dtype=np.float64)
    flat = arr.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        lp = loss_fn()
        flat[i] = orig - step
        lm = loss_fn()
        flat[i] = orig
        g.reshape(-1)[i] = (lp - lm) / (2 * step)
    return g
