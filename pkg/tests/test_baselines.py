import math

import numpy as np
import pytest

from conftest import make_dataset
from pstest.baselines import (
    INF,
    PermutationScheme,
    aspu_test,
    rao_score_test,
    spu_statistic,
    spu_test,
    sum_test,
)
from pstest.basis import Basis
from pstest.errors import SingularInformationError, ValidationError
from pstest.model import Dataset, compute_scores, fit_null, residual_rotation
from pstest.pst import pst_statistic


def test_sum_test_marginal_and_scale_invariance(binomial_sm):
    sm = binomial_sm
    e = np.eye(sm.p)[:, 2]
    r = sum_test(sm, e)
    om = sm.information()
    assert r.statistic == pytest.approx(sm.n * sm.s[2] ** 2 / om[2, 2])
    z = np.random.default_rng(0).standard_normal(sm.p)
    assert sum_test(sm, z).statistic == pytest.approx(sum_test(sm, 2 * z).statistic, rel=1e-12)


def test_sum_test_gaussian_closed_form():
    ds = make_dataset(31, n=20, p=8, m=2)
    sm = compute_scores(ds, fit_null(ds))
    y_rot, g_rot = residual_rotation(ds)
    zeta = np.random.default_rng(1).standard_normal(8)
    sigma2 = y_rot @ y_rot / ds.n
    closed = (y_rot @ g_rot @ zeta) ** 2 / (sigma2 * zeta @ g_rot.T @ g_rot @ zeta)
    assert sum_test(sm, zeta).statistic == pytest.approx(closed, rel=1e-10)


def test_sum_test_zero_variance_contrast(gaussian_sm):
    with pytest.raises(SingularInformationError):
        sum_test(gaussian_sm, np.zeros(gaussian_sm.p))
    with pytest.raises(ValidationError):
        sum_test(gaussian_sm, np.ones(3))


def test_rao_one_predictor_is_sum_test():
    ds = make_dataset(32, n=30, p=1, m=1)
    sm = compute_scores(ds, fit_null(ds))
    assert rao_score_test(sm).statistic == pytest.approx(sum_test(sm, [1.0]).statistic, rel=1e-12)


def test_rao_equals_full_space_pst():
    ds = make_dataset(33, n=40, p=6, m=2, family="binomial")
    sm = compute_scores(ds, fit_null(ds))
    assert rao_score_test(sm).statistic == pytest.approx(pst_statistic(sm, Basis(np.eye(6))).statistic,
                                                         rel=1e-10)


def test_rao_needs_p_below_residual_df():
    ds = make_dataset(34, n=10, p=9, m=1)
    with pytest.raises(ValidationError, match="p < n - m"):
        rao_score_test(compute_scores(ds, fit_null(ds)))


def test_spu_statistic_values():
    s = np.array([0.1, -0.9, 0.3])
    assert spu_statistic(s, INF) == pytest.approx(0.9)
    assert spu_statistic(s, 2) == pytest.approx(s @ s)
    assert spu_statistic(s, 3) == pytest.approx(np.sum(s**3))
    with pytest.raises(ValidationError):
        spu_statistic(s, 1.5)


def test_permutations_are_permutations_and_thread_free():
    sch = PermutationScheme(count=2100, seed=3, n_jobs=1)
    perms = sch.permutations(17)
    assert perms.shape == (2100, 17)
    np.testing.assert_array_equal(np.sort(perms, axis=1), np.tile(np.arange(17), (2100, 1)))
    np.testing.assert_array_equal(perms, PermutationScheme(2100, 3, 4).permutations(17))


def test_gaussian_rescoring_is_freedman_lane():
    ds = make_dataset(35, n=25, p=4, m=2)
    fit = fit_null(ds)
    sm = compute_scores(ds, fit)
    sch = PermutationScheme(count=20, seed=1)
    ours = sch.permuted_scores(sm)
    e = ds.y - fit.fitted
    for b, pi in enumerate(sch.permutations(ds.n)):
        yb = fit.fitted + e[pi]
        dsb = Dataset(yb, ds.x, ds.g)
        np.testing.assert_allclose(ours[b], compute_scores(dsb, fit_null(dsb)).s, atol=1e-12)


def test_intercept_only_binomial_is_label_permutation():
    ds = make_dataset(36, n=30, p=5, m=1, family="binomial")
    sm = compute_scores(ds, fit_null(ds))
    sch = PermutationScheme(count=10, seed=2)
    ours = sch.permuted_scores(sm)
    for b, pi in enumerate(sch.permutations(ds.n)):
        dsb = Dataset(ds.y[pi], ds.x, ds.g, "binomial")
        np.testing.assert_allclose(ours[b], compute_scores(dsb, fit_null(dsb)).s, atol=1e-12)


def test_identity_permutation_recovers_observed_scores(binomial_sm):
    e, g = PermutationScheme(5).adjusted_predictors(binomial_sm)
    np.testing.assert_allclose(g.T @ e / binomial_sm.n, binomial_sm.s, atol=1e-12)


def test_spu_pvalue_bounds(binomial_sm):
    for gamma in (1, 2, INF):
        r = spu_test(binomial_sm, gamma, PermutationScheme(199, seed=4))
        assert 1 / 200 <= r.p_value <= 1.0
        assert r.method == f"spu_{'inf' if gamma == INF else gamma}"


def test_aspu_single_gamma_matches_spu(binomial_sm):
    sch = PermutationScheme(299, seed=5)
    a = aspu_test(binomial_sm, (2,), sch)
    s = spu_test(binomial_sm, 2, sch)
    assert a.spu_p_values[0] == pytest.approx(s.p_value)
    # with one gamma the min-p recalibration returns the same p-value
    assert a.p_value == pytest.approx(s.p_value)


def test_aspu_is_deterministic_and_bounded(binomial_sm):
    a = aspu_test(binomial_sm, scheme=PermutationScheme(500, seed=6, n_jobs=1))
    b = aspu_test(binomial_sm, scheme=PermutationScheme(500, seed=6, n_jobs=2))
    assert a.p_value == b.p_value and a.spu_p_values == b.spu_p_values
    assert 1 / 501 <= a.p_value <= 1.0
    assert a.statistic == min(a.spu_p_values)
    assert len(a.gammas) == 7 and math.isinf(a.gammas[-1])


def test_constant_outcome_rejected():
    ds = Dataset(np.ones(10), None, np.random.default_rng(0).standard_normal((10, 3)))
    sm = compute_scores(ds, fit_null(ds))
    with pytest.raises(ValidationError, match="constant"):
        spu_test(sm, 2)
