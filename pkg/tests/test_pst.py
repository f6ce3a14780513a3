import numpy as np
import pytest
import scipy.linalg
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from conftest import dense_information, dense_pst, make_dataset
from pstest.baselines import rao_score_test, sum_test
from pstest.basis import Basis, pca_basis, weighted_pca_basis
from pstest.errors import SingularInformationError, ValidationError
from pstest.model import Dataset, compute_scores, fit_null, residual_rotation
from pstest.pst import (
    adaptive_pca_test,
    alpha_star,
    chunk_schedule,
    exact_normal_cdf,
    exact_normal_sf,
    pst_exact_normal,
    pst_statistic,
)


def rayleigh_oracle(ds, fit, q):
    """Largest generalised eigenvalue of (n Q'SS'Q, Q' omega Q)."""
    s = ds.g.T @ (ds.y - fit.fitted) / ds.n
    a = ds.n * np.outer(q.T @ s, q.T @ s)
    b = q.T @ dense_information(ds, fit) @ q
    return scipy.linalg.eigh(a, b, eigvals_only=True)[-1]


@pytest.mark.parametrize("family", ["gaussian", "binomial"])
def test_statistic_matches_dense_oracle(family):
    ds = make_dataset(11, n=60, p=20, m=2, family=family)
    fit = fit_null(ds)
    q = pca_basis(ds, 5).q
    res = pst_statistic(compute_scores(ds, fit), Basis(q))
    assert res.statistic == pytest.approx(dense_pst(ds, fit, q), rel=1e-10)
    assert res.statistic == pytest.approx(rayleigh_oracle(ds, fit, q), rel=1e-8)
    assert res.df == 5
    assert res.p_value == pytest.approx(stats.chi2.sf(res.statistic, 5))


def test_statistic_bounds_random_contrasts(gaussian_ds, gaussian_sm):
    q = pca_basis(gaussian_ds, 4).q
    stat = pst_statistic(gaussian_sm, Basis(q)).statistic
    z = q @ np.random.default_rng(0).standard_normal((4, 2000))
    om = gaussian_sm.information()
    ratio = gaussian_sm.n * (gaussian_sm.s @ z) ** 2 / np.einsum("ij,ij->j", z, om @ z)
    assert ratio.max() <= stat * (1 + 1e-12)
    assert ratio.max() > 0.9 * stat


def test_single_direction_is_sum_test(binomial_sm):
    for j in (0, 3):
        e = np.eye(binomial_sm.p)[:, j]
        assert pst_statistic(binomial_sm, Basis(e)).statistic == pytest.approx(
            sum_test(binomial_sm, e).statistic, rel=1e-12)


def test_full_space_is_rao_test():
    ds = make_dataset(12, n=40, p=6, m=2)
    sm = compute_scores(ds, fit_null(ds))
    res = pst_statistic(sm, Basis(np.eye(6)))
    om = dense_information(ds, fit_null(ds))
    assert res.statistic == pytest.approx(ds.n * sm.s @ np.linalg.solve(om, sm.s), rel=1e-10)
    assert res.statistic == pytest.approx(rao_score_test(sm).statistic, rel=1e-10)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000), r=st.integers(1, 5))
def test_rotation_invariance(seed, r):
    ds = make_dataset(seed, n=35, p=15, m=2, family="binomial" if seed % 2 else "gaussian")
    sm = compute_scores(ds, fit_null(ds))
    q = pca_basis(ds, r).q
    m, _ = np.linalg.qr(np.random.default_rng(seed).standard_normal((r, r)))
    a = pst_statistic(sm, Basis(q)).statistic
    b = pst_statistic(sm, Basis(q @ m)).statistic
    assert b == pytest.approx(a, rel=1e-8)


def test_dimension_and_orthonormality_checks():
    ds = make_dataset(18, n=10, p=12, m=1)
    sm = compute_scores(ds, fit_null(ds))
    with pytest.raises(ValidationError, match="n - m"):
        pst_statistic(sm, Basis(np.eye(12)[:, :9]))
    with pytest.raises(ValidationError, match="orthonormal"):
        pst_statistic(sm, Basis(2 * np.eye(12)[:, :2]))


def test_singular_projected_information():
    ds = make_dataset(13, n=10, p=20, m=1)
    sm = compute_scores(ds, fit_null(ds))
    _, u = np.linalg.eigh(sm.information())
    with pytest.raises(SingularInformationError, match="singular"):
        pst_statistic(sm, Basis(u[:, :2]))


def test_exact_statistic_oracle():
    ds = make_dataset(14, n=30, p=10, m=2)
    q = pca_basis(ds, 3).q
    y_rot, g_rot = residual_rotation(ds)
    m = g_rot @ q
    w = m @ np.linalg.solve(m.T @ m, m.T)
    d = ds.n - ds.m
    oracle = d * (y_rot @ w @ y_rot) / (y_rot @ y_rot)
    res = pst_exact_normal(ds, Basis(q))
    assert res.statistic == pytest.approx(oracle, rel=1e-10)
    assert res.p_value == pytest.approx(stats.f.cdf(3 * (d - oracle) / ((d - 3) * oracle), d - 3, 3))
    # the chi-squared statistic differs only by the factor n / (n - m)
    chi = pst_statistic(compute_scores(ds, fit_null(ds)), Basis(q)).statistic
    assert chi == pytest.approx(res.statistic * ds.n / d, rel=1e-10)


def test_exact_boundaries():
    assert exact_normal_sf(0.0, 20, 3) == 1.0
    assert exact_normal_sf(20.0, 20, 3) == 0.0
    with pytest.raises(ValidationError):
        exact_normal_sf(1.0, 20, 20)
    # y orthogonal to the columns of x and G: statistic 0, p-value 1
    rng = np.random.default_rng(0)
    x = np.ones((12, 1))
    g = rng.standard_normal((12, 3))
    span = np.column_stack([x, g])
    y = rng.standard_normal(12)
    y -= span @ np.linalg.lstsq(span, y, rcond=None)[0]
    res = pst_exact_normal(Dataset(y, x, g), Basis(np.eye(3)))
    assert res.statistic == pytest.approx(0.0, abs=1e-12)
    assert res.p_value == pytest.approx(1.0)


def test_exact_rejects_full_dimension():
    ds = make_dataset(15, n=8, p=10, m=1)
    with pytest.raises(ValidationError, match="n - m"):
        pst_exact_normal(ds, Basis(np.eye(10)[:, :7]))


def test_exact_requires_gaussian(binomial_ds):
    with pytest.raises(ValidationError):
        pst_exact_normal(binomial_ds, Basis(np.eye(15)[:, :2]))


def test_exact_cdf_is_a_distribution():
    t = np.linspace(-1, 31, 400)
    c = exact_normal_cdf(t, 30, 5)
    assert np.all(np.diff(c) >= 0) and c[0] == 0 and c[-1] == 1
    assert exact_normal_cdf(np.array([7.0]), 30, 5)[0] == pytest.approx(1 - exact_normal_sf(7.0, 30, 5))


def test_exact_law_small_monte_carlo():
    rng = np.random.default_rng(5)
    d, r = 20, 3
    w_cols = np.eye(d)[:, :r]
    y = rng.standard_normal((4000, d))
    stat = d * np.sum((y @ w_cols) ** 2, axis=1) / np.sum(y**2, axis=1)
    assert stats.kstest(stat, lambda t: exact_normal_cdf(t, d, r)).statistic < 0.03


def test_alpha_star():
    assert alpha_star(0.05) == 1 / 21
    with pytest.raises(ValidationError):
        alpha_star(1.0)


def test_chunk_schedule():
    assert chunk_schedule((5,), 8) == [(0, 5), (5, 6), (6, 7), (7, 8)]
    assert chunk_schedule((2, 3), 5) == [(0, 2), (2, 5)]
    with pytest.raises(ValidationError):
        chunk_schedule((6,), 5)


def test_adaptive_stops_at_first_non_rejection():
    ds = make_dataset(16, n=200, p=30, m=1, signal=0.0)
    fit = fit_null(ds)
    res = adaptive_pca_test(ds, fit)
    first = res.steps[0]
    assert (first.start, first.stop) == (0, 5)
    assert all(s.rejected for s in res.steps[:-1])
    if len(res.steps) < len(chunk_schedule((5,), ds.n - ds.m - 1)):
        assert not res.steps[-1].rejected
    assert res.selected_r == (res.steps[-1].start if not res.steps[-1].rejected else res.steps[-1].stop)
    assert res.overall_reject == first.rejected
    # every step is the chi-squared test on the newly added components
    wb = weighted_pca_basis(ds, fit, 6)
    sm = compute_scores(ds, fit)
    want = pst_statistic(sm, wb.columns(5)).statistic
    assert first.statistic == pytest.approx(want, rel=1e-10)


def test_adaptive_selects_signal_components():
    rng = np.random.default_rng(17)
    n, p = 300, 40
    g = rng.standard_normal((n, p)) * np.linspace(3, 0.5, p)
    y = 0.4 * g[:, 0] + rng.standard_normal(n)
    ds = Dataset(y, np.ones((n, 1)), g)
    res = adaptive_pca_test(ds, fit_null(ds))
    assert res.overall_reject and res.selected_r >= 5
    assert res.selected_basis().r == res.selected_r
