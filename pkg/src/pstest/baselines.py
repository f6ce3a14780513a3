"""Reference association tests used for power comparisons.

``sum_test`` and ``rao_score_test`` are chi-squared score tests.  The
sum-of-powered-score tests (SPU, aSPU) are calibrated by permuting the
null-model residuals; see :class:`PermutationScheme`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from joblib import Parallel, delayed
from scipy import stats

from . import rng as _rng
from .errors import SingularInformationError, ValidationError
from .model import ScoreModel, numerical_rank

INF = math.inf
DEFAULT_GAMMAS = (1, 2, 3, 4, 5, 6, INF)
DEFAULT_B_PERM = 1000


@dataclass(frozen=True)
class ScoreTestResult:
    statistic: float
    p_value: float
    df: int | None = None
    method: str = ""

    def as_dict(self) -> dict:
        return {"statistic": self.statistic, "df": self.df, "p_value": self.p_value,
                "method": self.method}


def sum_test(score_model: ScoreModel, zeta) -> ScoreTestResult:
    """One-degree-of-freedom score test of the fixed contrast ``zeta``."""
    zeta = np.asarray(zeta, dtype=float)
    if zeta.shape != (score_model.p,):
        raise ValidationError(f"zeta must have length p = {score_model.p}, got shape {zeta.shape}")
    denom = float(score_model.quadratic_form(zeta))
    trace = float(np.sum(score_model.info_factor**2)) / score_model.n
    if denom <= 1e-14 * float(zeta @ zeta) * trace:
        raise SingularInformationError("zeta' omega zeta is zero; the contrast has no null variance")
    stat = score_model.n * float(score_model.s @ zeta) ** 2 / denom
    return ScoreTestResult(stat, float(stats.chi2.sf(stat, 1)), 1, "sum")


def rao_score_test(score_model: ScoreModel) -> ScoreTestResult:
    """Classical score test ``n S' omega^-1 S`` on p degrees of freedom."""
    n, m, p = score_model.n, score_model.m, score_model.p
    if p >= n - m:
        raise ValidationError(f"the full score test needs p < n - m (p = {p}, n - m = {n - m}); "
                              "the information estimate is not invertible")
    f = score_model.info_factor
    if numerical_rank(f) < p:
        raise SingularInformationError("the information estimate is singular")
    # n S' (F'F / n)^-1 S = n^2 ||F (F'F)^-1 S||^2 ; solve through a QR of F
    _, rr = np.linalg.qr(f)
    w = np.linalg.solve(rr.T, score_model.s)
    stat = float(n * n * (w @ w))
    return ScoreTestResult(stat, float(stats.chi2.sf(stat, p)), p, "rao")


@dataclass(frozen=True)
class PermutationScheme:
    """Residual permutation under the null fit.

    Residuals ``e = y - yhat`` are permuted and projected back onto the
    orthogonal complement of ``x`` in the GLM working-weight metric, which
    is the one-step rescoring of the permuted data.  For gaussian models
    that is Freedman-Lane permutation; for a binomial model with only an
    intercept it coincides with permuting the outcome labels.
    """

    count: int = DEFAULT_B_PERM
    seed: int = 0
    n_jobs: int | None = None

    def __post_init__(self):
        if self.count < 1:
            raise ValidationError(f"permutation count must be positive, got {self.count}")

    def permutations(self, n: int) -> np.ndarray:
        """``count`` x ``n`` array; row ``b`` is a permutation of ``0..n-1``."""
        out = np.empty((self.count, n), dtype=np.intp)
        base = np.tile(np.arange(n), (_rng.BLOCK_SIZE, 1))
        for k, lo, hi in _rng.blocks(self.count):
            gen = _rng.block_generator(self.seed, k, key=(0x7065,))
            out[lo:hi] = gen.permuted(base[: hi - lo], axis=1)
        return out

    def adjusted_predictors(self, score_model: ScoreModel) -> tuple[np.ndarray, np.ndarray]:
        """Null residuals ``e`` and ``G~ = G - X (X'WX)^-1 X'W G``.

        Permuted scores are ``G~' e[pi] / n``; the identity permutation gives
        back the observed scores because ``X' e = 0`` at the null fit.
        """
        ds, fit = score_model.dataset, score_model.null_fit
        if ds is None or fit is None:
            raise ValidationError("permutation needs a ScoreModel built by compute_scores()")
        e = np.asarray(ds.y - fit.fitted)
        if np.ptp(ds.y) == 0 or not np.any(e):
            raise ValidationError("permutation scheme is degenerate: the outcome is constant")
        g = ds.g
        if ds.m:
            sw = np.sqrt(fit.variance_weights)
            coef, *_ = np.linalg.lstsq(ds.x * sw[:, None], g * sw[:, None], rcond=None)
            g = g - ds.x @ coef
        return e, g

    def permuted_scores(self, score_model: ScoreModel) -> np.ndarray:
        """``count`` x ``p`` matrix of scores recomputed on permuted residuals."""
        e, g = self.adjusted_predictors(score_model)
        return e[self.permutations(e.shape[0])] @ g / e.shape[0]


def _check_gamma(gamma):
    if gamma != INF and (gamma != int(gamma) or gamma < 1):
        raise ValidationError(f"gamma must be a positive integer or infinity, got {gamma!r}")


def _powered_sums(s: np.ndarray, gammas: Sequence) -> list[np.ndarray]:
    # integer powers by repeated multiplication; float pow is much slower
    finite = sorted({int(g) for g in gammas if g != INF})
    sums = {}
    if finite:
        pw = np.array(s, dtype=float, copy=True)
        for k in range(1, finite[-1] + 1):
            if k > 1:
                pw *= s
            if k in finite:
                sums[k] = np.sum(pw, axis=-1)
    return [np.max(np.abs(s), axis=-1) if g == INF else sums[int(g)] for g in gammas]


def spu_statistic(s: np.ndarray, gamma) -> np.ndarray:
    """``sum_j s_j^gamma`` (or ``max_j |s_j|`` for infinite gamma) along the last axis."""
    _check_gamma(gamma)
    return _powered_sums(np.asarray(s, dtype=float), [gamma])[0]


def _block_stats(e, g, perms, gammas):
    sp = e[perms] @ g / e.shape[0]
    return np.abs(np.column_stack(_powered_sums(sp, gammas)))


def _permutation_ensemble(score_model: ScoreModel, gammas: Sequence, scheme: PermutationScheme):
    """``(1 + count)`` x ``len(gammas)`` array of |SPU|; row 0 is the observed data."""
    if not gammas:
        raise ValidationError("at least one gamma is required")
    for gm in gammas:
        _check_gamma(gm)
    e, g = scheme.adjusted_predictors(score_model)
    perms = scheme.permutations(e.shape[0])
    obs = np.abs(np.array(_powered_sums(score_model.s, gammas), dtype=float))
    parts = _rng.blocks(scheme.count)
    n_jobs = _rng.default_threads() if scheme.n_jobs is None else scheme.n_jobs
    if n_jobs == 1 or len(parts) == 1:
        blocks = [_block_stats(e, g, perms[lo:hi], gammas) for _, lo, hi in parts]
    else:
        blocks = Parallel(n_jobs=n_jobs, prefer="threads")(
            delayed(_block_stats)(e, g, perms[lo:hi], gammas) for _, lo, hi in parts)
    return np.vstack([obs[None, :], *blocks])


def _tail_fraction(col: np.ndarray) -> np.ndarray:
    """For each entry, the fraction of the column that is >= it."""
    srt = np.sort(col)
    return (col.shape[0] - np.searchsorted(srt, col, side="left")) / col.shape[0]


def spu_test(score_model: ScoreModel, gamma, scheme: PermutationScheme | None = None) -> ScoreTestResult:
    """Sum-of-powered-score test with a permutation p-value.

    The p-value is ``(1 + #{|T*| >= |T|}) / (count + 1)``.
    """
    scheme = scheme or PermutationScheme()
    ens = _permutation_ensemble(score_model, [gamma], scheme)[:, 0]
    p = (1.0 + np.sum(ens[1:] >= ens[0])) / (scheme.count + 1.0)
    stat = float(spu_statistic(score_model.s, gamma))
    return ScoreTestResult(stat, float(p), None, f"spu_{_gamma_label(gamma)}")


@dataclass(frozen=True)
class AspuResult:
    statistic: float
    p_value: float
    gammas: tuple
    spu_p_values: tuple[float, ...]

    def as_dict(self) -> dict:
        return {"statistic": self.statistic, "p_value": self.p_value, "method": "aspu",
                "gammas": [_gamma_label(g) for g in self.gammas],
                "spu_p_values": list(self.spu_p_values)}


def aspu_test(score_model: ScoreModel, gammas: Sequence = DEFAULT_GAMMAS,
              scheme: PermutationScheme | None = None) -> AspuResult:
    """Adaptive SPU: the minimum SPU p-value, recalibrated on the same permutations.

    Observed data and permutations form one exchangeable ensemble of size
    ``count + 1``; every member gets per-gamma p-values against the whole
    ensemble, and the overall p-value is the fraction of members whose
    minimum p-value is at most the observed one.
    """
    scheme = scheme or PermutationScheme()
    gammas = tuple(gammas)
    ens = _permutation_ensemble(score_model, gammas, scheme)
    pv = np.column_stack([_tail_fraction(ens[:, k]) for k in range(len(gammas))])
    minp = pv.min(axis=1)
    p = float(np.mean(minp <= minp[0]))
    return AspuResult(float(minp[0]), p, gammas, tuple(float(x) for x in pv[0]))


def _gamma_label(gamma) -> str:
    return "inf" if gamma == INF else str(int(gamma))
