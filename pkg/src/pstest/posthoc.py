"""Localising signal with standardized projected scores.

The projected scores ``P S = Q Q' S`` are scaled to unit null variance and
compared against the Monte Carlo distribution of their maximum absolute
value (a single-step maxT procedure), which controls the family-wise
error rate of the projected scores.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from joblib import Parallel, delayed

from . import rng as _rng
from .basis import INVERTIBLE_TOL, Basis
from .errors import NumericalError, ValidationError
from .model import ScoreModel
from .pst import check_basis

DEFAULT_B = 10_000
MIN_B = 1000
# Negative eigenvalues of V-hat down to -PSD_TOL * lambda_max are rounding.
PSD_TOL = 1e-10
# Locations whose projected variance is below this fraction of the largest are undefined.
UNDEFINED_TOL = 1e-14
_CHUNK_ELEMENTS = 1 << 22


@dataclass(frozen=True, eq=False)
class ProjectedScores:
    projected: np.ndarray
    standardized: np.ndarray
    delta: np.ndarray
    variance: np.ndarray
    defined: np.ndarray

    def __iter__(self):
        # unpacks as (projected, standardized, delta)
        return iter((self.projected, self.standardized, self.delta))


def sqrt_psd(v: np.ndarray, tol: float = PSD_TOL) -> np.ndarray:
    """Symmetric square root of a PSD matrix, clipping rounding-level negatives."""
    lam, u = np.linalg.eigh((v + v.T) / 2.0)
    lmax = max(float(lam[-1]), 0.0)
    if lam[0] < -tol * lmax:
        raise NumericalError(f"V-hat is not positive semidefinite (smallest eigenvalue {lam[0]:.3g}, "
                             f"largest {lmax:.3g})")
    lam = np.clip(lam, 0.0, None)
    return (u * np.sqrt(lam)) @ u.T


def _null_loadings(score_model: ScoreModel, basis: Basis):
    """Rows of ``Q V^{1/2}`` and the implied null variances of ``P S``."""
    v = score_model.projected_information(basis.q)
    b = basis.q @ sqrt_psd(v)
    var = np.einsum("ij,ij->i", b, b)
    top = var.max() if var.size else 0.0
    defined = var > UNDEFINED_TOL * top if top > 0 else np.zeros(var.shape, bool)
    return b, var, defined


def project_and_standardize(score_model: ScoreModel, basis: Basis) -> ProjectedScores:
    """Project the scores onto the basis span and scale to unit null variance.

    ``standardized = sqrt(n) * delta * projected`` where ``delta`` holds the
    inverse null standard deviations of ``sqrt(n) P S``.

    Locations with (numerically) zero projected variance get ``nan`` in
    ``standardized`` and ``delta`` and ``defined = False``.
    """
    if basis.p != score_model.p:
        raise ValidationError(f"basis has p = {basis.p} rows but the scores have p = {score_model.p}")
    projected = basis.q @ (basis.q.T @ score_model.s)
    _, var, defined = _null_loadings(score_model, basis)
    delta = np.full(var.shape, np.nan)
    delta[defined] = 1.0 / np.sqrt(var[defined])
    standardized = np.full(var.shape, np.nan)
    # S is an average, so sqrt(n) P S has null covariance P omega P'
    standardized[defined] = np.sqrt(score_model.n) * projected[defined] * delta[defined]
    return ProjectedScores(projected, standardized, delta, var, defined)


def _block_maxima(a: np.ndarray, seed: int, block: int, size: int) -> np.ndarray:
    gen = _rng.block_generator(seed, block, key=(0x6D61,))
    z = gen.standard_normal((size, a.shape[1]))
    out = np.empty(size)
    step = max(1, _CHUNK_ELEMENTS // max(a.shape[0], 1))
    for lo in range(0, size, step):
        out[lo:lo + step] = np.max(np.abs(z[lo:lo + step] @ a.T), axis=1)
    return out


def mc_null_distribution(
    basis: Basis,
    score_model: ScoreModel,
    b: int = DEFAULT_B,
    seed: int = 0,
    *,
    n_jobs: int | None = None,
    min_b: int = MIN_B,
) -> np.ndarray:
    """Sorted Monte Carlo sample of ``max_j |(Delta Q V^{1/2} Z)_j|``.

    The ``b`` draws are produced in fixed blocks with one Philox stream per
    block, so the sample is identical for any ``n_jobs``.
    """
    if b < min_b:
        raise ValidationError(f"need at least {min_b} Monte Carlo draws, got b = {b}")
    loadings, var, defined = _null_loadings(score_model, basis)
    if not defined.any():
        raise NumericalError("every projected score has zero variance")
    a = loadings[defined] / np.sqrt(var[defined])[:, None]
    parts = _rng.blocks(b)
    n_jobs = _rng.default_threads() if n_jobs is None else n_jobs
    if n_jobs == 1 or len(parts) == 1:
        maxima = [_block_maxima(a, seed, k, hi - lo) for k, lo, hi in parts]
    else:
        maxima = Parallel(n_jobs=n_jobs, prefer="threads")(
            delayed(_block_maxima)(a, seed, k, hi - lo) for k, lo, hi in parts)
    return np.sort(np.concatenate(maxima))


def empirical_quantile(sorted_sample: np.ndarray, level: float) -> float:
    """Smallest sample value ``x`` with ``F_B(x) >= level``."""
    b = sorted_sample.shape[0]
    k = max(1, math.ceil(level * b - 1e-9))
    return float(sorted_sample[k - 1])


def exceedance_pvalues(sorted_sample: np.ndarray, t: np.ndarray) -> np.ndarray:
    """``(1 + #{draws >= t}) / (B + 1)`` for each entry of ``t``."""
    b = sorted_sample.shape[0]
    count = b - np.searchsorted(sorted_sample, t, side="left")
    return (1.0 + count) / (b + 1.0)


@dataclass(frozen=True, eq=False)
class PosthocResult:
    projected: np.ndarray
    standardized: np.ndarray
    p_values: np.ndarray
    threshold_c: float
    alpha: float
    b: int
    seed: int
    max_null_samples: np.ndarray
    defined: np.ndarray

    @property
    def rejected(self) -> np.ndarray:
        with np.errstate(invalid="ignore"):
            return self.defined & (np.abs(np.nan_to_num(self.standardized)) > self.threshold_c)

    def summary(self) -> dict:
        return {
            "threshold_c": self.threshold_c,
            "alpha": self.alpha,
            "b": self.b,
            "seed": self.seed,
            "n_rejected": int(self.rejected.sum()),
            "n_undefined": int((~self.defined).sum()),
            "min_p_value": float(np.nanmin(self.p_values)) if self.defined.any() else None,
        }

    def rows(self):
        rej = self.rejected
        for j in range(self.projected.shape[0]):
            yield (j, float(self.projected[j]), float(self.standardized[j]),
                   float(self.p_values[j]), bool(rej[j]))


def posthoc_inference(
    score_model: ScoreModel,
    basis: Basis,
    alpha: float = 0.05,
    b: int = DEFAULT_B,
    seed: int = 0,
    *,
    n_jobs: int | None = None,
    min_b: int = MIN_B,
) -> PosthocResult:
    """maxT-adjusted two-sided inference on the standardized projected scores.

    Location ``j`` is rejected when ``|t_j| > c`` with ``c`` the empirical
    ``1 - alpha`` quantile of the simulated maxima; adjusted p-values are
    ``(1 + #{maxima >= |t_j|}) / (b + 1)``.
    """
    if not 0.0 < alpha < 1.0:
        raise ValidationError(f"alpha must lie in (0, 1), got {alpha}")
    check_basis(score_model, basis, INVERTIBLE_TOL)
    proj = project_and_standardize(score_model, basis)
    null = mc_null_distribution(basis, score_model, b, seed, n_jobs=n_jobs, min_b=min_b)
    pvals = np.full(proj.projected.shape, np.nan)
    pvals[proj.defined] = exceedance_pvalues(null, np.abs(proj.standardized[proj.defined]))
    return PosthocResult(
        projected=proj.projected,
        standardized=proj.standardized,
        p_values=pvals,
        threshold_c=empirical_quantile(null, 1.0 - alpha),
        alpha=alpha,
        b=b,
        seed=seed,
        max_null_samples=null,
        defined=proj.defined,
    )
