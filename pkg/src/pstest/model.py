"""Null-model fitting and score computation for canonical-link GLMs.

The hypothesis tested throughout the package is that the predictor block
``g`` carries no information about ``y`` beyond the nuisance design ``x``.
Everything downstream works from two objects produced here:

* the score vector ``s = g.T @ (y - yhat) / n`` evaluated at the null fit;
* a factor ``F`` (n x p) of the effective (nuisance-profiled) information,
  ``omega = F.T @ F / n``.  The p x p matrix is never formed unless a
  caller explicitly asks for it.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import (
    ConvergenceError,
    PerfectSeparationError,
    SingularInformationError,
    ValidationError,
)

FAMILIES = ("gaussian", "binomial")

IRLS_TOL = 1e-8
IRLS_MAX_ITER = 50
# |linear predictor| beyond which fitted probabilities are saturated.
_SEPARATION_ETA = 15.0


def _frozen(a) -> np.ndarray:
    a = np.array(a, dtype=float, copy=True)
    a.setflags(write=False)
    return a


def _rank_tol(s: np.ndarray, shape: tuple[int, ...]) -> float:
    if s.size == 0:
        return 0.0
    return max(shape) * np.finfo(float).eps * s[0]


def numerical_rank(a: np.ndarray) -> int:
    """Rank with the cutoff ``max(shape) * eps * sigma_max``."""
    if a.size == 0:
        return 0
    s = np.linalg.svd(a, compute_uv=False)
    return int(np.sum(s > _rank_tol(s, a.shape)))


@dataclass(frozen=True, eq=False)
class Dataset:
    """Outcome, nuisance design and predictor block for one analysis.

    ``x`` may be ``None`` (no nuisance parameters, ``m = 0``).  An intercept
    is *not* added automatically.
    """

    y: np.ndarray
    x: np.ndarray | None
    g: np.ndarray
    family: str = "gaussian"

    def __post_init__(self):
        y = np.asarray(self.y, dtype=float)
        if y.ndim == 2 and y.shape[1] == 1:
            y = y[:, 0]
        if y.ndim != 1:
            raise ValidationError(f"y must be a vector, got shape {y.shape}")
        n = y.shape[0]
        g = np.asarray(self.g, dtype=float)
        if g.ndim == 1:
            g = g[:, None]
        if g.ndim != 2 or g.shape[0] != n:
            raise ValidationError(f"g must be an n x p matrix with n = {n}, got shape {g.shape}")
        x = np.empty((n, 0)) if self.x is None else np.asarray(self.x, dtype=float)
        if x.ndim == 1:
            x = x[:, None]
        if x.ndim != 2 or x.shape[0] != n:
            raise ValidationError(f"x must be an n x m matrix with n = {n}, got shape {x.shape}")
        if self.family not in FAMILIES:
            raise ValidationError(f"family must be one of {FAMILIES}, got {self.family!r}")
        for name, a in (("y", y), ("x", x), ("g", g)):
            if not np.all(np.isfinite(a)):
                raise ValidationError(f"{name} contains missing or non-finite values")
        m = x.shape[1]
        if n <= m:
            raise ValidationError(f"need n > m, got n = {n}, m = {m}")
        if m and numerical_rank(x) < m:
            raise ValidationError(f"x is rank deficient: rank {numerical_rank(x)} < m = {m}")
        if self.family == "binomial" and not np.all((y == 0) | (y == 1)):
            raise ValidationError("binomial outcomes must be coded 0/1")
        object.__setattr__(self, "y", _frozen(y))
        object.__setattr__(self, "x", _frozen(x))
        object.__setattr__(self, "g", _frozen(g))

    @property
    def n(self) -> int:
        return self.y.shape[0]

    @property
    def m(self) -> int:
        return self.x.shape[1]

    @property
    def p(self) -> int:
        return self.g.shape[1]

    def centered(self) -> "Dataset":
        """Copy with every predictor column centred to mean zero."""
        return Dataset(self.y, self.x, self.g - self.g.mean(axis=0), self.family)


@dataclass(frozen=True, eq=False)
class NullFit:
    """Maximum likelihood fit of the covariates-only model."""

    family: str
    alpha_hat: np.ndarray
    fitted: np.ndarray
    gamma: np.ndarray
    sigma2_hat: float | None
    iterations: int
    converged: bool
    residuals: np.ndarray = field(repr=False, default=None)

    @property
    def information_weights(self) -> np.ndarray:
        """Diagonal of the weight matrix entering the information estimate.

        Gaussian models use the model-based variance ``sigma2_hat`` for every
        observation; binomial models use the squared residuals.
        """
        if self.family == "gaussian":
            return np.full(self.fitted.shape, self.sigma2_hat)
        return self.gamma

    @property
    def variance_weights(self) -> np.ndarray:
        """GLM working weights ``Var(y_i) / phi`` at the null fit."""
        if self.family == "gaussian":
            return np.ones_like(self.fitted)
        return self.fitted * (1.0 - self.fitted)


def _gaussian_fit(ds: Dataset) -> NullFit:
    if ds.m:
        alpha, *_ = np.linalg.lstsq(ds.x, ds.y, rcond=None)
        fitted = ds.x @ alpha
    else:
        alpha = np.empty(0)
        fitted = np.zeros(ds.n)
    resid = ds.y - fitted
    sigma2 = float(resid @ resid) / ds.n
    return NullFit(
        family="gaussian",
        alpha_hat=_frozen(alpha),
        fitted=_frozen(fitted),
        gamma=_frozen(resid**2),
        sigma2_hat=sigma2,
        iterations=1,
        converged=True,
        residuals=_frozen(resid),
    )


def _expit(eta):
    return 0.5 * (1.0 + np.tanh(0.5 * eta))


def _binomial_fit(ds: Dataset, tol: float, max_iter: int) -> NullFit:
    y, x = ds.y, ds.x
    if not ds.m:
        fitted = np.full(ds.n, 0.5)
        return NullFit("binomial", _frozen(np.empty(0)), _frozen(fitted),
                       _frozen((y - fitted) ** 2), None, 0, True, _frozen(y - fitted))
    mu = (y + 0.5) / 2.0
    eta = np.log(mu / (1.0 - mu))
    alpha = None
    for it in range(1, max_iter + 1):
        w = mu * (1.0 - mu)
        z = eta + (y - mu) / w
        sw = np.sqrt(w)
        new, *_ = np.linalg.lstsq(x * sw[:, None], z * sw, rcond=None)
        if not np.all(np.isfinite(new)):
            raise PerfectSeparationError("IRLS produced non-finite coefficients", it)
        change = np.inf if alpha is None else np.max(np.abs(new - alpha))
        alpha = new
        eta = x @ alpha
        mu = np.clip(_expit(eta), 1e-15, 1.0 - 1e-15)
        if change < tol:
            break
    else:
        if np.max(np.abs(eta)) > _SEPARATION_ETA:
            raise PerfectSeparationError(
                f"logistic null fit diverged after {max_iter} iterations "
                f"(max |linear predictor| = {np.max(np.abs(eta)):.1f}); "
                "the outcome appears perfectly separated by x", max_iter)
        raise ConvergenceError(f"IRLS did not converge in {max_iter} iterations", max_iter)
    fitted = _expit(eta)
    resid = y - fitted
    return NullFit("binomial", _frozen(alpha), _frozen(fitted), _frozen(resid**2),
                   None, it, True, _frozen(resid))


def fit_null(dataset: Dataset, *, tol: float = IRLS_TOL, max_iter: int = IRLS_MAX_ITER) -> NullFit:
    """Fit the covariates-only model.

    Gaussian: ordinary least squares with ``sigma2_hat = RSS / n``.
    Binomial: IRLS with the logit link, stopping once the largest absolute
    coefficient change drops below ``tol``.

    Raises
    ------
    ConvergenceError
        IRLS used ``max_iter`` iterations without meeting ``tol``.
    PerfectSeparationError
        The coefficients diverge (fitted probabilities saturate).
    """
    if dataset.family == "gaussian":
        return _gaussian_fit(dataset)
    return _binomial_fit(dataset, tol, max_iter)


def information_factor(x: np.ndarray, g: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Return ``F`` with ``F.T @ F = G'WG - G'WX (X'WX)^-1 X'WG``."""
    sw = np.sqrt(w)
    gw = g * sw[:, None]
    if x.shape[1] == 0:
        return gw
    xw = x * sw[:, None]
    u, d, vt = np.linalg.svd(xw, full_matrices=False)
    if d[0] == 0.0 or d[-1] <= _rank_tol(d, xw.shape):
        direction = np.array2string(vt[-1], precision=4)
        raise SingularInformationError(
            "X'(Gamma)X is singular; degenerate nuisance direction "
            f"{direction} (are all residuals zero?)")
    return gw - u @ (u.T @ gw)


@dataclass(frozen=True, eq=False)
class ScoreModel:
    """Score vector and factored effective information at the null fit."""

    s: np.ndarray
    info_factor: np.ndarray
    n: int
    m: int
    dataset: Dataset | None = field(default=None, repr=False)
    null_fit: NullFit | None = field(default=None, repr=False)

    @property
    def p(self) -> int:
        return self.s.shape[0]

    def information(self) -> np.ndarray:
        """Dense p x p information estimate.  Only for small problems."""
        return self.info_factor.T @ self.info_factor / self.n

    def quadratic_form(self, v: np.ndarray) -> np.ndarray:
        """``v' omega v`` for a vector, or ``V' omega V`` for a matrix."""
        fv = self.info_factor @ v
        return fv.T @ fv / self.n

    def projected_information(self, q: np.ndarray) -> np.ndarray:
        """``Q' omega Q`` computed through the factor (r x r)."""
        fq = self.info_factor @ q
        v = fq.T @ fq / self.n
        return (v + v.T) / 2.0


def compute_scores(dataset: Dataset, null_fit: NullFit) -> ScoreModel:
    resid = dataset.y - null_fit.fitted
    s = dataset.g.T @ resid / dataset.n
    f = information_factor(dataset.x, dataset.g, null_fit.information_weights)
    return ScoreModel(_frozen(s), _frozen(f), dataset.n, dataset.m, dataset, null_fit)


def residual_projector(x: np.ndarray) -> np.ndarray:
    """Orthonormal ``A`` (n x (n - m)) with ``A @ A.T = I - H``."""
    n, m = x.shape
    if m == 0:
        return np.eye(n)
    if numerical_rank(x) != m:
        raise ValidationError(f"x is rank deficient; I - H does not have rank n - m = {n - m}")
    qfull, _ = np.linalg.qr(x, mode="complete")
    return qfull[:, m:]


def residual_rotation(dataset: Dataset) -> tuple[np.ndarray, np.ndarray]:
    """Rotate a gaussian problem onto the residual space of ``x``.

    Returns ``(A'y, A'g)``; under the null the rotated outcome has iid
    ``N(0, sigma^2)`` entries.
    """
    if dataset.family != "gaussian":
        raise ValidationError("residual_rotation is defined for the gaussian family only")
    a = residual_projector(dataset.x)
    return a.T @ dataset.y, a.T @ dataset.g
