import numpy as np
import pytest

from srvcc.nn import assign_flat, finite_diff_gradient, flatten


def rel_error(analytic, numeric):
    a, f = np.ravel(analytic), np.ravel(numeric)
    return float(np.linalg.norm(a - f) / max(np.linalg.norm(f), 1e-8))


def fd_rel_error(loss, params, grads, keys=None, step=1e-5):
    """Relative error between ``grads`` and central differences of ``loss()``
    over the live arrays in ``params`` (restricted to ``keys``)."""
    keys = sorted(grads) if keys is None else keys
    theta = flatten(params, keys)

    def f(t):
        assign_flat(params, t, keys)
        return loss()

    numeric = finite_diff_gradient(f, theta, step)
    assign_flat(params, theta, keys)
    return rel_error(flatten(grads, keys), numeric)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
