"""The projected score test and its null distributions.

For a basis ``Q`` of the subspace ``L`` the statistic is

    R = n (Q'S)' V^-1 (Q'S),    V = Q' omega Q,

which is the Sum-test ratio ``n (z'S)^2 / z' omega z`` maximised over
weight vectors ``z`` in ``L``.  It is asymptotically chi-squared on
``r = dim L`` degrees of freedom.  For gaussian models the statistic
computed in the rotated residual space has an exact null law.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import scipy.linalg
from scipy import stats

from .basis import INVERTIBLE_TOL, Basis, model_information_factor, right_singular, sign_normalize, validate_basis
from .errors import SingularInformationError, ValidationError
from .model import Dataset, NullFit, ScoreModel, _rank_tol, compute_scores, fit_null, residual_rotation

DEFAULT_CHUNKS = (5,)


@dataclass(frozen=True, eq=False)
class PstResult:
    statistic: float
    df: int
    p_value: float
    method: str
    rotated_scores: np.ndarray
    v_hat: np.ndarray
    basis: dict = field(default_factory=dict)
    pseudo_inverse: bool = False

    def as_dict(self) -> dict:
        return {
            "statistic": self.statistic,
            "df": self.df,
            "p_value": self.p_value,
            "method": self.method,
            "basis": self.basis,
            "pseudo_inverse": self.pseudo_inverse,
        }


def check_basis(score_model: ScoreModel, basis: Basis, tol: float):
    diag = validate_basis(basis, score_model, tol=tol)
    if not diag.within_dimension:
        raise ValidationError(f"basis dimension r = {basis.r} must be smaller than "
                              f"n - m = {score_model.n - score_model.m}")
    if not diag.orthonormal:
        raise ValidationError("basis columns are not orthonormal "
                              f"(max |Q'Q - I| = {diag.orthonormality_error:.3g}); use custom_basis()")
    if not diag.invertible:
        raise SingularInformationError(
            f"V-hat = Q' omega Q is singular (rank {diag.v_rank} < r = {basis.r}, "
            f"condition {diag.condition_number:.3g}); repair the basis so it lies in the "
            "column space of the information estimate")
    return diag


def quadratic_statistic(n: int, sq: np.ndarray, v: np.ndarray) -> tuple[float, bool]:
    """``n sq' v^-1 sq`` by Cholesky, falling back to an eigen pseudo-inverse."""
    try:
        c = scipy.linalg.cho_factor(v, lower=True)
        return float(n * sq @ scipy.linalg.cho_solve(c, sq)), False
    except np.linalg.LinAlgError:
        lam, u = np.linalg.eigh(v)
        keep = lam > INVERTIBLE_TOL * lam[-1]
        warnings.warn("V-hat is not numerically positive definite; using a pseudo-inverse",
                      RuntimeWarning, stacklevel=3)
        z = u[:, keep].T @ sq
        return float(n * np.sum(z**2 / lam[keep])), True


def pst_statistic(score_model: ScoreModel, basis: Basis, *, tol: float = INVERTIBLE_TOL) -> PstResult:
    """Projected score test with its asymptotic chi-squared p-value."""
    check_basis(score_model, basis, tol)
    q = basis.q
    sq = q.T @ score_model.s
    v = score_model.projected_information(q)
    stat, pinv = quadratic_statistic(score_model.n, sq, v)
    stat = max(stat, 0.0)
    return PstResult(
        statistic=stat,
        df=basis.r,
        p_value=float(stats.chi2.sf(stat, basis.r)),
        method="chi2_asymptotic",
        rotated_scores=np.sqrt(score_model.n) * sq,
        v_hat=v,
        basis=basis.describe(),
        pseudo_inverse=pinv,
    )


def exact_normal_sf(statistic: float, residual_df: int, r: int) -> float:
    """``P(R >= statistic)`` under the exact gaussian null law.

    ``R = r d / (r + (d - r) F)`` with ``d = n - m`` and
    ``F ~ F(d - r, r)``; the map is decreasing in ``F``.
    """
    d = residual_df
    if not 1 <= r < d:
        raise ValidationError(f"need 1 <= r < n - m, got r = {r}, n - m = {d}")
    if statistic <= 0.0:
        return 1.0
    if statistic >= d:
        return 0.0
    f = r * (d - statistic) / ((d - r) * statistic)
    return float(stats.f.cdf(f, d - r, r))


def exact_normal_cdf(statistic, residual_df: int, r: int):
    """Vectorised ``P(R <= t)``; used for calibration checks."""
    t = np.asarray(statistic, dtype=float)
    d = residual_df
    out = np.empty_like(t)
    lo, hi = t <= 0.0, t >= d
    mid = ~(lo | hi)
    out[lo], out[hi] = 0.0, 1.0
    f = r * (d - t[mid]) / ((d - r) * t[mid])
    out[mid] = stats.f.sf(f, d - r, r)
    return out


def pst_exact_normal(dataset: Dataset, basis: Basis) -> PstResult:
    """Exact finite-sample test for the normal linear model.

    The statistic is ``(n - m) Y'WY / Y'Y`` in the rotated residual space,
    with ``W`` the projection onto the columns of ``A'G Q``.
    """
    if dataset.family != "gaussian":
        raise ValidationError("the exact test requires the gaussian family")
    d = dataset.n - dataset.m
    r = basis.r
    if r >= d:
        raise ValidationError(f"basis dimension r = {r} must be smaller than n - m = {d}")
    if basis.p != dataset.p:
        raise ValidationError(f"basis has p = {basis.p} rows, data has p = {dataset.p}")
    y_rot, g_rot = residual_rotation(dataset)
    m = g_rot @ basis.q
    u, s, _ = np.linalg.svd(m, full_matrices=False)
    rank = int(np.sum(s > _rank_tol(s, m.shape)))
    if rank < r:
        raise SingularInformationError(
            f"rotated design G_rot Q has rank {rank} < r = {r}; the projection W would be "
            f"built on {rank} directions")
    yy = float(y_rot @ y_rot)
    if yy == 0.0:
        raise SingularInformationError("rotated outcome is identically zero")
    z = u[:, :rank].T @ y_rot
    stat = d * float(z @ z) / yy
    sm = compute_scores(dataset, fit_null(dataset))
    return PstResult(
        statistic=stat,
        df=r,
        p_value=exact_normal_sf(stat, d, r),
        method="exact_normal",
        rotated_scores=np.sqrt(dataset.n) * (basis.q.T @ sm.s),
        v_hat=sm.projected_information(basis.q),
        basis=basis.describe(),
    )


@dataclass(frozen=True)
class AdaptiveStep:
    start: int
    stop: int
    statistic: float
    df: int
    p_value: float
    rejected: bool

    def as_dict(self) -> dict:
        return {"r": self.stop, "start": self.start, "stop": self.stop, "statistic": self.statistic,
                "df": self.df, "p_value": self.p_value, "rejected": self.rejected}


@dataclass(frozen=True, eq=False)
class AdaptiveResult:
    selected_r: int
    steps: tuple[AdaptiveStep, ...]
    overall_reject: bool
    alpha: float
    alpha_star: float
    basis: Basis = field(repr=False)

    @property
    def per_step(self) -> list[tuple[int, float, float, bool]]:
        return [(s.stop, s.statistic, s.p_value, s.rejected) for s in self.steps]

    def selected_basis(self) -> Basis | None:
        if self.selected_r == 0:
            return None
        return self.basis.columns(self.selected_r)

    def as_dict(self) -> dict:
        return {
            "selected_r": self.selected_r,
            "overall_reject": self.overall_reject,
            "alpha": self.alpha,
            "alpha_star": self.alpha_star,
            "steps": [s.as_dict() for s in self.steps],
        }


def alpha_star(alpha: float) -> float:
    """Per-step level keeping the sequential procedure at level ``alpha``."""
    if not 0.0 < alpha < 1.0:
        raise ValidationError(f"alpha must lie in (0, 1), got {alpha}")
    return alpha / (1.0 + alpha)


def chunk_schedule(chunk_sizes: Sequence[int], limit: int) -> list[tuple[int, int]]:
    """Expand chunk sizes into ``(start, stop)`` column ranges up to ``limit``.

    After the listed chunks, components are added one at a time.
    """
    sizes = [int(c) for c in chunk_sizes]
    if any(c < 1 for c in sizes):
        raise ValidationError(f"chunk sizes must be positive, got {sizes}")
    if sum(sizes) > limit:
        raise ValidationError(f"chunk sizes {sizes} add up to more than n - m - 1 = {limit}")
    out, lo = [], 0
    for c in sizes:
        out.append((lo, lo + c))
        lo += c
    out.extend((j, j + 1) for j in range(lo, limit))
    return out


def adaptive_pca_test(
    dataset: Dataset,
    null_fit: NullFit,
    alpha: float = 0.05,
    chunk_sizes: Sequence[int] = DEFAULT_CHUNKS,
    *,
    score_model: ScoreModel | None = None,
) -> AdaptiveResult:
    """Sequential chi-squared tests on weighted principal components.

    Chunk ``j`` tests components ``start+1..stop`` jointly at level
    ``alpha* = alpha / (1 + alpha)``; testing stops at the first chunk that
    is not rejected.  ``selected_r`` is the last rejected cumulative
    dimension, 0 when the first chunk already fails.
    """
    a_star = alpha_star(alpha)
    sm = score_model if score_model is not None else compute_scores(dataset, null_fit)
    limit = dataset.n - dataset.m - 1
    schedule = chunk_schedule(chunk_sizes, limit)
    _, v, rank = right_singular(model_information_factor(dataset, null_fit))
    usable = min(limit, rank)
    if schedule[0][1] > usable:
        raise ValidationError(f"first chunk needs {schedule[0][1]} components but the information "
                              f"factor has only {usable} usable directions")
    basis = Basis(sign_normalize(v[:, :usable]), "weighted_pca", {"adaptive": True})
    steps = []
    selected = 0
    for lo, hi in schedule:
        if hi > usable:
            break
        res = pst_statistic(sm, basis.columns(hi, lo))
        rejected = res.p_value < a_star
        steps.append(AdaptiveStep(lo, hi, res.statistic, res.df, res.p_value, rejected))
        if not rejected:
            break
        selected = hi
    return AdaptiveResult(
        selected_r=selected,
        steps=tuple(steps),
        overall_reject=steps[0].rejected,
        alpha=alpha,
        alpha_star=a_star,
        basis=basis,
    )
