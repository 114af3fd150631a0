import math

import numpy as np
import pytest

from nnh_adapt.model import init_model
from nnh_adapt.numeric import make_rng


@pytest.fixture
def rng():
    return make_rng(12345)


@pytest.fixture
def tiny_model():
    return init_model(3, 4, 3, 3, make_rng(7))


def finite_difference(f, arr, step=1e-5):
    """Central differences of scalar ``f()`` w.r.t. every entry of ``arr`` (mutated in place)."""
    grad = np.zeros_like(arr)
    it = np.nditer(arr, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        orig = arr[i]
        arr[i] = orig + step
        up = f()
        arr[i] = orig - step
        down = f()
        arr[i] = orig
        grad[i] = (up - down) / (2 * step)
    return grad


def rel_error(a, b, floor=1e-5):
    """Norm-wise relative error; ``floor`` absorbs tensors whose true gradient is ~0
    (e.g. the bias feeding batch norm)."""
    denom = max(np.linalg.norm(a), np.linalg.norm(b), floor)
    return float(np.linalg.norm(a - b) / denom)


def brute_nearest(query, pool, exclude=()):
    """Loop over every row, computing cosine distance from scratch."""
    best, best_d = None, math.inf
    qn = math.sqrt(sum(q * q for q in query))
    for j, row in enumerate(pool):
        if j in exclude:
            continue
        rn = math.sqrt(sum(r * r for r in row))
        if rn == 0:
            continue
        d = 1 - sum(q * r for q, r in zip(query, row)) / (qn * rn)
        if d < best_d:
            best, best_d = j, d
    return best
