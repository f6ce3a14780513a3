import numpy as np
import pytest

from pstest.model import Dataset, compute_scores, fit_null


def dense_information(ds, fit):
    """Effective information G'WG - G'WX (X'WX)^-1 X'WG, over n, formed densely."""
    w = np.diag(fit.information_weights)
    g, x = ds.g, ds.x
    om = g.T @ w @ g
    if ds.m:
        om = om - g.T @ w @ x @ np.linalg.inv(x.T @ w @ x) @ x.T @ w @ g
    return om / ds.n


def dense_pst(ds, fit, q):
    """n (Q'S)' (Q' omega Q)^-1 (Q'S) from explicitly materialised matrices."""
    s = ds.g.T @ (ds.y - fit.fitted) / ds.n
    om = dense_information(ds, fit)
    sq = q.T @ s
    return ds.n * sq @ np.linalg.inv(q.T @ om @ q) @ sq


def make_dataset(seed, n=40, p=12, m=2, family="gaussian", signal=0.0):
    rng = np.random.default_rng(seed)
    x = np.column_stack([np.ones(n), rng.standard_normal((n, m - 1))]) if m else None
    g = rng.standard_normal((n, p))
    eta = signal * g[:, 0]
    if x is not None and m > 1:
        eta = eta + 0.3 * x[:, 1]
    if family == "gaussian":
        y = eta + rng.standard_normal(n)
    else:
        y = (rng.random(n) < 1 / (1 + np.exp(-eta))).astype(float)
    return Dataset(y, x, g, family)


@pytest.fixture
def gaussian_ds():
    return make_dataset(0)


@pytest.fixture
def binomial_ds():
    return make_dataset(1, n=80, p=15, family="binomial")


@pytest.fixture
def gaussian_sm(gaussian_ds):
    return compute_scores(gaussian_ds, fit_null(gaussian_ds))


@pytest.fixture
def binomial_sm(binomial_ds):
    return compute_scores(binomial_ds, fit_null(binomial_ds))
