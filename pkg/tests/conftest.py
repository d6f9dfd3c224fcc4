import numpy as np
import pytest

from hivit.tensor import Tensor, backward, no_grad


def numeric_grad(f, arrays, h=1e-6):
    """Central differences of scalar ``f(*arrays)`` w.r.t. every entry of every array."""
    out = []
    for a in arrays:
        g = np.zeros_like(a)
        it = np.nditer(a, flags=["multi_index"])
        for _ in it:
            i = it.multi_index
            old = a[i]
            a[i] = old + h
            up = f(*arrays)
            a[i] = old - h
            dn = f(*arrays)
            a[i] = old
            g[i] = (up - dn) / (2 * h)
        out.append(g)
    return out


def grad_error(op, *arrays, seed=0, h=1e-6):
    """Worst normwise relative error between autodiff and central differences.

    The op output is contracted with fixed random weights so every output
    entry contributes to the scalar being differentiated.
    """
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    ts = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    out = op(*ts)
    w = np.random.default_rng(seed).standard_normal(out.shape)
    backward((out * Tensor(w)).sum())

    def scalar(*arrs):
        with no_grad():
            return float((op(*[Tensor(a) for a in arrs]).data * w).sum())

    num = numeric_grad(scalar, arrays, h)
    errs = []
    for t, n in zip(ts, num):
        scale = max(np.linalg.norm(n), 1e-12)
        errs.append(np.linalg.norm(t.grad - n) / scale)
    return max(errs)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
