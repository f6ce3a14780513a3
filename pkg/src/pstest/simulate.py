"""Simulation harness: power and error-rate studies, grid refinement.

The study design follows a logistic outcome driven by two groups of
predictor regions, one associated negatively and one positively:

    logit P(Y_i = 1) = alpha0 - beta * w_-' G_{i,-} + 2 beta * w_+' G_{i,+}

with ``w`` a vector of ones ("constant" coefficients) or of independent
Unif(0.5, 1.5) draws ("uniform").  Each region is an independent
multivariate normal block.

Every replicate draws its design and a vector of uniforms once, and the
outcome at each beta is ``Y_i = 1{U_i < expit(eta_i)}``.  Outcomes are
therefore coupled across the beta grid, which keeps the Monte Carlo noise
in power curves small without changing any marginal rate.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Sequence

import numpy as np
from joblib import Parallel, delayed

from . import rng as _rng
from .baselines import INF, PermutationScheme, aspu_test, rao_score_test, spu_test, sum_test
from .basis import Basis, Partition, partition_basis, pca_basis, weighted_pca_from_scores
from .errors import PSTError, ValidationError
from .model import Dataset, compute_scores, fit_null, information_factor
from .posthoc import empirical_quantile, mc_null_distribution, project_and_standardize
from .pst import adaptive_pca_test, pst_statistic

COVARIANCE_KINDS = ("identity", "ar1", "exchangeable", "matrix")
ROLES = ("negative", "positive", "null")
COEFFICIENT_MODES = ("constant", "uniform")
DEFAULT_ALPHA0 = math.log(399 / 229)
DEFAULT_METHODS = ("apca", "pca:10", "spu:inf", "aspu")
POSTHOC_KINDS = ("apca", "pca", "wpca", "partition")

_DESIGN_KEY = 0x6465
_OUTCOME_KEY = 0x6F75
_WEIGHT_KEY = 0x7767
_MC_KEY = 0x6D63
_PERM_KEY = 0x7065


def _stream(seed: int, *key: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(seed, spawn_key=key)))


@dataclass(frozen=True)
class Covariance:
    kind: str = "identity"
    rho: float = 0.0
    variance: float = 1.0
    matrix: tuple | None = None

    def build(self, size: int, name: str = "region") -> np.ndarray:
        if self.kind not in COVARIANCE_KINDS:
            raise ValidationError(f"{name}: covariance kind must be one of {COVARIANCE_KINDS}, "
                                  f"got {self.kind!r}")
        if self.kind == "matrix":
            if self.matrix is None:
                raise ValidationError(f"{name}: covariance kind 'matrix' needs a matrix")
            c = np.asarray(self.matrix, dtype=float)
            if c.shape != (size, size):
                raise ValidationError(f"{name}: covariance matrix has shape {c.shape}, "
                                      f"region has {size} indices")
            if not np.allclose(c, c.T, atol=1e-12 * max(1.0, float(np.abs(c).max()))):
                raise ValidationError(f"{name}: covariance matrix is not symmetric")
        else:
            if not (self.variance > 0 and math.isfinite(self.variance)):
                raise ValidationError(f"{name}: variance must be positive, got {self.variance}")
            if self.kind == "identity":
                c = np.eye(size)
            elif self.kind == "ar1":
                if not -1.0 < self.rho < 1.0:
                    raise ValidationError(f"{name}: AR(1) rho must lie in (-1, 1), got {self.rho}")
                lag = np.abs(np.subtract.outer(np.arange(size), np.arange(size)))
                c = self.rho ** lag
            else:
                lo = -1.0 / (size - 1) if size > 1 else -math.inf
                if not lo < self.rho < 1.0:
                    raise ValidationError(f"{name}: exchangeable rho must lie in ({lo:.4g}, 1), "
                                          f"got {self.rho}")
                c = np.full((size, size), self.rho)
                np.fill_diagonal(c, 1.0)
            c = self.variance * c
        if np.any(np.diag(c) <= 0):
            raise ValidationError(f"{name}: covariance has zero or negative variances on the diagonal")
        lam_min = float(np.linalg.eigvalsh(c)[0])
        if lam_min < -1e-10 * float(np.abs(c).max()):
            raise ValidationError(f"{name}: covariance is not positive semidefinite "
                                  f"(smallest eigenvalue {lam_min:.3g})")
        return c

    def to_dict(self) -> dict:
        d = {"kind": self.kind}
        if self.kind in ("ar1", "exchangeable"):
            d["rho"] = self.rho
        if self.kind != "matrix":
            d["variance"] = self.variance
        else:
            d["matrix"] = [list(row) for row in self.matrix]
        return d

    @classmethod
    def from_dict(cls, d: dict, name: str = "region") -> "Covariance":
        _check_keys(d, {"kind", "rho", "variance", "matrix"}, f"{name}.covariance")
        m = d.get("matrix")
        return cls(kind=d.get("kind", "identity"), rho=float(d.get("rho", 0.0)),
                   variance=float(d.get("variance", 1.0)),
                   matrix=None if m is None else tuple(tuple(float(v) for v in row) for row in m))


@dataclass(frozen=True)
class Region:
    name: str
    role: str
    indices: tuple[int, ...]
    covariance: Covariance = field(default_factory=Covariance)

    def __post_init__(self):
        if self.role not in ROLES:
            raise ValidationError(f"region {self.name!r}: role must be one of {ROLES}, got {self.role!r}")
        idx = tuple(int(i) for i in self.indices)
        if not idx:
            raise ValidationError(f"region {self.name!r} has no indices")
        if len(set(idx)) != len(idx):
            raise ValidationError(f"region {self.name!r} lists an index twice")
        object.__setattr__(self, "indices", idx)

    def to_dict(self) -> dict:
        return {"name": self.name, "role": self.role, "indices": _compress(self.indices),
                "covariance": self.covariance.to_dict()}

    @classmethod
    def from_dict(cls, d: dict) -> "Region":
        name = str(d.get("name", "region"))
        _check_keys(d, {"name", "role", "indices", "covariance"}, f"region {name!r}")
        if "indices" not in d or "role" not in d:
            raise ValidationError(f"region {name!r} needs 'role' and 'indices'")
        return cls(name, d["role"], _expand(d["indices"], name),
                   Covariance.from_dict(d.get("covariance", {}), name))


def _compress(idx: tuple[int, ...]):
    if idx == tuple(range(idx[0], idx[0] + len(idx))):
        return {"start": idx[0], "stop": idx[0] + len(idx)}
    return list(idx)


def _expand(spec, name: str) -> tuple[int, ...]:
    if isinstance(spec, dict):
        _check_keys(spec, {"start", "stop"}, f"region {name!r} indices")
        return tuple(range(int(spec["start"]), int(spec["stop"])))
    return tuple(int(i) for i in spec)


def _check_keys(d: dict, valid: set, where: str):
    unknown = sorted(set(d) - valid)
    if unknown:
        raise ValidationError(f"unknown key(s) {unknown} in {where}; valid keys: {sorted(valid)}")


def parse_method(spec: str) -> tuple[str, float | int | None]:
    """``"pca:10"`` -> ``("pca", 10)``; ``"spu:inf"`` -> ``("spu", inf)``."""
    kind, _, arg = spec.partition(":")
    if kind in ("apca", "aspu", "sum", "rao"):
        if arg:
            raise ValidationError(f"method {spec!r} takes no argument")
        return kind, None
    if kind in ("pca", "wpca", "partition"):
        try:
            r = int(arg)
        except ValueError:
            raise ValidationError(f"method {spec!r} needs an integer dimension, e.g. {kind}:10") from None
        if r < 1:
            raise ValidationError(f"method {spec!r}: dimension must be positive")
        return kind, r
    if kind == "spu":
        if arg == "inf":
            return kind, INF
        try:
            gamma = int(arg)
        except ValueError:
            raise ValidationError(f"method {spec!r} needs an integer power or 'inf'") from None
        if gamma < 1:
            raise ValidationError(f"method {spec!r}: power must be positive")
        return kind, gamma
    raise ValidationError(f"unknown method {spec!r}; use apca, pca:R, wpca:R, partition:R, "
                          "spu:G, spu:inf, aspu, sum or rao")


@dataclass(frozen=True)
class Scenario:
    n: int = 200
    p: int = 200
    regions: tuple[Region, ...] = ()
    betas: tuple[float, ...] = (0.0,)
    coefficients: str = "constant"
    uniform_range: tuple[float, float] = (0.5, 1.5)
    positive_multiplier: float = 2.0
    alpha0: float = DEFAULT_ALPHA0
    replicates: int = 1000
    seed: int = 2017
    center: bool = True
    alpha: float = 0.05
    b: int = 10_000
    b_perm: int = 1000
    chunk_sizes: tuple[int, ...] = (5,)
    truth_quantile: float = 0.2
    methods: tuple[str, ...] = DEFAULT_METHODS

    def __post_init__(self):
        object.__setattr__(self, "regions", tuple(self.regions))
        object.__setattr__(self, "betas", tuple(float(b) for b in self.betas))
        object.__setattr__(self, "methods", tuple(self.methods))
        object.__setattr__(self, "chunk_sizes", tuple(int(c) for c in self.chunk_sizes))
        object.__setattr__(self, "uniform_range", tuple(float(u) for u in self.uniform_range))
        self.validate()

    def validate(self):
        if self.n < 3 or self.p < 1:
            raise ValidationError(f"need n >= 3 and p >= 1, got n = {self.n}, p = {self.p}")
        if not self.regions:
            raise ValidationError("scenario has no regions")
        owner: dict[int, str] = {}
        for reg in self.regions:
            for i in reg.indices:
                if not 0 <= i < self.p:
                    raise ValidationError(f"region {reg.name!r} has index {i} outside 0..{self.p - 1}")
                if i in owner:
                    raise ValidationError(f"regions {owner[i]!r} and {reg.name!r} overlap at index {i}")
                owner[i] = reg.name
            reg.covariance.build(len(reg.indices), f"region {reg.name!r}")
        if len(owner) != self.p:
            missing = sorted(set(range(self.p)) - set(owner))
            raise ValidationError(f"regions do not cover every predictor; missing {missing[:10]}"
                                  + (" ..." if len(missing) > 10 else ""))
        if not self.betas or any(not (b >= 0 and math.isfinite(b)) for b in self.betas):
            raise ValidationError(f"betas must be finite and >= 0, got {self.betas}")
        if self.coefficients not in COEFFICIENT_MODES:
            raise ValidationError(f"coefficients must be one of {COEFFICIENT_MODES}")
        lo, hi = self.uniform_range
        if not lo <= hi:
            raise ValidationError(f"uniform_range must satisfy low <= high, got {self.uniform_range}")
        if self.replicates < 1:
            raise ValidationError("replicates must be positive")
        if not 0.0 < self.alpha < 1.0:
            raise ValidationError(f"alpha must lie in (0, 1), got {self.alpha}")
        if not 0.0 < self.truth_quantile < 1.0:
            raise ValidationError("truth_quantile must lie in (0, 1)")
        if not math.isfinite(self.alpha0):
            raise ValidationError("alpha0 must be finite")
        if not self.methods:
            raise ValidationError("at least one method is required")
        for mth in self.methods:
            kind, r = parse_method(mth)
            if kind in ("pca", "wpca") and r >= self.n - 1:
                raise ValidationError(f"method {mth!r}: r must be smaller than n - m = {self.n - 1}")
            if kind == "partition" and r > self.p:
                raise ValidationError(f"method {mth!r}: more groups than predictors")

    def region_slices(self, role: str) -> list[Region]:
        return [reg for reg in self.regions if reg.role == role]

    def signal_indices(self) -> np.ndarray:
        idx = [i for reg in self.regions if reg.role != "null" for i in reg.indices]
        return np.array(sorted(idx), dtype=np.intp)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["regions"] = [reg.to_dict() for reg in self.regions]
        for k in ("betas", "uniform_range", "chunk_sizes", "methods"):
            d[k] = list(d[k])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "Scenario":
        valid = {f for f in cls.__dataclass_fields__}
        _check_keys(d, valid, "scenario")
        d = dict(d)
        if "regions" in d:
            d["regions"] = tuple(Region.from_dict(r) for r in d["regions"])
        return cls(**d)

    @classmethod
    def from_json(cls, path) -> "Scenario":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))

    def with_overrides(self, **kw) -> "Scenario":
        return replace(self, **kw)


def desk_scenario(p: int = 200, n: int = 200, rho: float = 0.9, null_rho: float | None = 0.5,
                  **overrides) -> Scenario:
    """Scaled-down layout: two negative regions, one positive, the rest null.

    Region sizes follow the proportions 669 : 191 : 8501 of a cortical
    hemisphere; every region has an AR(1) covariance along its index, with
    ``null_rho`` for the null region (``None`` reuses ``rho``).
    """
    total = 669 + 191 + 8501
    neg = max(2, round(p * 669 / total))
    pos = max(1, round(p * 191 / total))
    if neg + pos >= p:
        raise ValidationError(f"p = {p} is too small for the desk layout")
    half = neg // 2
    cov = Covariance("ar1", rho)
    regions = (
        Region("negative_a", "negative", tuple(range(0, half)), cov),
        Region("negative_b", "negative", tuple(range(half, neg)), cov),
        Region("positive", "positive", tuple(range(neg, neg + pos)), cov),
        Region("null", "null", tuple(range(neg + pos, p)),
               cov if null_rho is None else Covariance("ar1", null_rho)),
    )
    return Scenario(n=n, p=p, regions=regions, **overrides)


def bundled_scenario(name: str = "desk") -> Scenario:
    from importlib.resources import files

    path = files("pstest") / "scenarios" / f"{name}.json"
    if not path.is_file():
        raise ValidationError(f"no bundled scenario named {name!r}")
    return Scenario.from_dict(json.loads(path.read_text(encoding="utf-8")))


# ---------------------------------------------------------------- design --

@dataclass(frozen=True, eq=False)
class _Prepared:
    """Per-scenario constants shared by all replicates."""

    factors: tuple[tuple[np.ndarray, np.ndarray], ...]
    sigma: np.ndarray
    weights: np.ndarray


def _prepare(sc: Scenario) -> _Prepared:
    factors = []
    sigma = np.zeros((sc.p, sc.p))
    for reg in sc.regions:
        c = reg.covariance.build(len(reg.indices), f"region {reg.name!r}")
        idx = np.asarray(reg.indices, dtype=np.intp)
        sigma[np.ix_(idx, idx)] = c
        try:
            chol = np.linalg.cholesky(c)
        except np.linalg.LinAlgError:
            # singular but PSD: fall back to a symmetric square root
            lam, u = np.linalg.eigh(c)
            if lam[0] < -1e-10 * lam[-1]:
                raise ValidationError(f"region {reg.name!r}: covariance factorization failed") from None
            chol = u * np.sqrt(np.clip(lam, 0.0, None))
        factors.append((idx, chol))
    return _Prepared(tuple(factors), sigma, coefficient_weights(sc))


def coefficient_weights(sc: Scenario) -> np.ndarray:
    """Signed per-predictor weights ``c`` with ``eta = alpha0 + beta * G c``."""
    w = np.zeros(sc.p)
    gen = _stream(sc.seed, _WEIGHT_KEY)
    lo, hi = sc.uniform_range
    for reg in sc.regions:
        if reg.role == "null":
            continue
        idx = np.asarray(reg.indices, dtype=np.intp)
        omega = np.ones(idx.size) if sc.coefficients == "constant" else gen.uniform(lo, hi, idx.size)
        w[idx] = -omega if reg.role == "negative" else sc.positive_multiplier * omega
    return w


def generate_design(sc: Scenario, replicate_seed: int, *, prepared: _Prepared | None = None) -> np.ndarray:
    """n x p predictor matrix for one replicate (column-centred if ``sc.center``)."""
    prep = prepared or _prepare(sc)
    gen = _stream(replicate_seed, _DESIGN_KEY)
    g = np.empty((sc.n, sc.p))
    for idx, chol in prep.factors:
        z = gen.standard_normal((sc.n, chol.shape[1]))
        g[:, idx] = z @ chol.T
    if sc.center:
        g -= g.mean(axis=0)
    return g


def linear_predictor(g: np.ndarray, sc: Scenario, beta: float, weights: np.ndarray | None = None) -> np.ndarray:
    w = coefficient_weights(sc) if weights is None else weights
    return sc.alpha0 + beta * (g @ w)


def _expit(eta):
    return 0.5 * (1.0 + np.tanh(0.5 * eta))


def simulate_outcome(g: np.ndarray, sc: Scenario, beta: float, replicate_seed: int,
                     *, weights: np.ndarray | None = None) -> np.ndarray:
    """Bernoulli outcomes; the uniforms depend on the replicate seed only."""
    if not (beta >= 0 and math.isfinite(beta)):
        raise ValidationError(f"beta must be finite and >= 0, got {beta}")
    g = np.asarray(g, dtype=float)
    if g.shape != (sc.n, sc.p):
        raise ValidationError(f"G must have shape {(sc.n, sc.p)}, got {g.shape}")
    u = _stream(replicate_seed, _OUTCOME_KEY).random(sc.n)
    return (u < _expit(linear_predictor(g, sc, beta, weights))).astype(float)


# ----------------------------------------------------------------- study --

_COUNTERS = ("ok", "failed", "reject",
             "posthoc", "proj_fwer", "proj_fdp", "proj_type1", "proj_power", "proj_power_n",
             "unproj_fwer", "unproj_fdp", "unproj_hr", "unproj_hr_n")


def _posthoc_basis(kind, arg, sm, ds, sc: Scenario, apca=None) -> Basis:
    if kind == "apca":
        sel = apca.selected_basis()
        # fall back to the first chunk when nothing was selected
        return sel if sel is not None else apca.basis.columns(sc.chunk_sizes[0])
    if kind == "pca":
        return pca_basis(ds, arg)
    if kind == "wpca":
        return weighted_pca_from_scores(sm, arg)
    return partition_basis(Partition.contiguous(sc.p, arg), sc.p)


def _error_rates(rejected: np.ndarray, null_mask: np.ndarray) -> tuple[float, float, float, float, int]:
    """Any-false-rejection flag, false discovery proportion, null and non-null rejection fractions."""
    n_rej = int(rejected.sum())
    false = int((rejected & null_mask).sum())
    n_null = int(null_mask.sum())
    n_alt = rejected.size - n_null
    t1 = false / n_null if n_null else 0.0
    pw = (n_rej - false) / n_alt if n_alt else 0.0
    return float(false > 0), false / max(n_rej, 1), t1, pw, int(n_alt > 0)


def _run_method(spec, sc, ds, sm, rep_seed, truth_dir, signal_mask):
    kind, arg = parse_method(spec)
    out = dict.fromkeys(_COUNTERS, 0.0)
    scheme = PermutationScheme(sc.b_perm, _rng.child_seed(rep_seed, _PERM_KEY), 1)
    basis = None
    if kind == "apca":
        apca = adaptive_pca_test(ds, sm.null_fit, sc.alpha, sc.chunk_sizes, score_model=sm)
        out["reject"] = float(apca.overall_reject)
        basis = _posthoc_basis(kind, arg, sm, ds, sc, apca)
    elif kind in ("pca", "wpca", "partition"):
        basis = _posthoc_basis(kind, arg, sm, ds, sc)
        out["reject"] = float(pst_statistic(sm, basis).p_value < sc.alpha)
    elif kind == "spu":
        out["reject"] = float(spu_test(sm, arg, scheme).p_value < sc.alpha)
    elif kind == "aspu":
        out["reject"] = float(aspu_test(sm, scheme=scheme).p_value < sc.alpha)
    elif kind == "sum":
        out["reject"] = float(sum_test(sm, np.ones(sc.p)).p_value < sc.alpha)
    else:
        out["reject"] = float(rao_score_test(sm).p_value < sc.alpha)
    if basis is not None:
        proj = project_and_standardize(sm, basis)
        null = mc_null_distribution(basis, sm, sc.b, _rng.child_seed(rep_seed, _MC_KEY), n_jobs=1)
        c = empirical_quantile(null, 1.0 - sc.alpha)
        rejected = proj.defined & (np.abs(np.nan_to_num(proj.standardized)) > c)
        # truth for the projected scores: Delta P mu, thresholded at a quantile of its magnitude
        t = np.abs(np.nan_to_num(proj.delta) * (basis.q @ (basis.q.T @ truth_dir)))
        proj_null = t <= np.quantile(t, sc.truth_quantile) if np.any(t) else np.ones(sc.p, bool)
        proj_null |= ~proj.defined
        f, fdp, t1, pw, has_alt = _error_rates(rejected, proj_null)
        out.update(posthoc=1.0, proj_fwer=f, proj_fdp=fdp, proj_type1=t1,
                   proj_power=pw, proj_power_n=has_alt)
        f, fdp, _, hr, has_alt = _error_rates(rejected, ~signal_mask)
        out.update(unproj_fwer=f, unproj_fdp=fdp, unproj_hr=hr, unproj_hr_n=has_alt)
    out["ok"] = 1.0
    return out


def _replicate(sc: Scenario, prep: _Prepared, rep: int):
    rep_seed = _rng.child_seed(sc.seed, rep)
    g = generate_design(sc, rep_seed, prepared=prep)
    x = np.ones((sc.n, 1))
    results = []
    for beta in sc.betas:
        y = simulate_outcome(g, sc, beta, rep_seed, weights=prep.weights)
        cdir = prep.sigma @ (beta * prep.weights)
        # Stein's identity: E S is proportional to Sigma c for gaussian designs
        signal_mask = np.abs(cdir) > 0
        try:
            ds = Dataset(y, x, g, "binomial")
            sm = compute_scores(ds, fit_null(ds))
        except PSTError as exc:
            results.append([_failure(type(exc).__name__) for _ in sc.methods])
            continue
        row = []
        for spec in sc.methods:
            try:
                row.append(_run_method(spec, sc, ds, sm, rep_seed, cdir, signal_mask))
            except PSTError as exc:
                row.append(_failure(type(exc).__name__))
        results.append(row)
    return results


def _failure(name: str) -> dict:
    out = dict.fromkeys(_COUNTERS, 0.0)
    out["failed"] = 1.0
    out["error"] = name
    return out


@dataclass(frozen=True, eq=False)
class StudyReport:
    scenario: Scenario
    rows: tuple[dict, ...]
    failures: tuple[dict, ...] = ()

    def get(self, method: str, beta: float) -> dict:
        for row in self.rows:
            if row["method"] == method and row["beta"] == float(beta):
                return row
        raise KeyError((method, beta))

    def curve(self, method: str, metric: str = "power") -> list[float]:
        return [self.get(method, b)[metric] for b in self.scenario.betas]

    def tables(self) -> dict[str, tuple[list[str], list[list]]]:
        power_cols = ["method", "beta", "replicates", "failures", "power", "power_se"]
        proj_cols = ["method", "beta", "replicates", "fwer", "fwer_se", "fdr", "fdr_se",
                     "type1_location", "type1_location_se", "power_location", "power_location_se"]
        unproj_cols = ["method", "beta", "replicates", "hit_rate", "hit_rate_se", "fdr", "fdr_se",
                       "fwer", "fwer_se"]
        power = [[r[c] for c in power_cols] for r in self.rows]
        proj, unproj = [], []
        for r in self.rows:
            if r.get("posthoc"):
                proj.append([r["method"], r["beta"], r["replicates"]]
                            + [r["proj_" + c] for c in proj_cols[3:]])
                unproj.append([r["method"], r["beta"], r["replicates"]]
                              + [r["unproj_" + c] for c in unproj_cols[3:]])
        fail_cols = ["method", "beta", "error", "count"]
        fails = [[f[c] for c in fail_cols] for f in self.failures]
        return {"power": (power_cols, power), "projected_errors": (proj_cols, proj),
                "unprojected_errors": (unproj_cols, unproj), "failures": (fail_cols, fails)}


def _se(rate: float, count: int) -> float:
    return math.sqrt(max(rate * (1.0 - rate), 0.0) / count) if count else math.nan


def _aggregate(sc: Scenario, per_rep: list) -> StudyReport:
    rows, failures = [], []
    for bi, beta in enumerate(sc.betas):
        for mi, spec in enumerate(sc.methods):
            recs = [rep[bi][mi] for rep in per_rep]
            tot = {k: math.fsum(r[k] for r in recs) for k in _COUNTERS}
            ok = int(tot["ok"])
            errs: dict[str, int] = {}
            for r in recs:
                if "error" in r:
                    errs[r["error"]] = errs.get(r["error"], 0) + 1
            failures.extend({"method": spec, "beta": beta, "error": e, "count": c}
                            for e, c in sorted(errs.items()))

            def rate(key, denom):
                return tot[key] / denom if denom else math.nan

            row = {"method": spec, "beta": beta, "replicates": ok, "failures": int(tot["failed"])}
            row["power"] = rate("reject", ok)
            row["power_se"] = _se(row["power"], ok)
            row["posthoc"] = parse_method(spec)[0] in POSTHOC_KINDS
            if row["posthoc"]:
                n_alt_p, n_alt_u = int(tot["proj_power_n"]), int(tot["unproj_hr_n"])
                for name, key, denom in (
                        ("proj_fwer", "proj_fwer", ok), ("proj_fdr", "proj_fdp", ok),
                        ("proj_type1_location", "proj_type1", ok),
                        ("proj_power_location", "proj_power", n_alt_p),
                        ("unproj_hit_rate", "unproj_hr", n_alt_u), ("unproj_fdr", "unproj_fdp", ok),
                        ("unproj_fwer", "unproj_fwer", ok)):
                    row[name] = rate(key, denom)
                    row[name + "_se"] = _se(row[name], denom)
            rows.append(row)
    return StudyReport(sc, tuple(rows), tuple(failures))


def run_study(sc: Scenario, methods: Sequence[str] | None = None, *, n_jobs: int | None = None,
              replicates: int | None = None) -> StudyReport:
    """Run every replicate and tabulate rejection and error rates.

    Results depend only on the scenario (including its seed); ``n_jobs``
    changes wall time, not output.
    """
    if methods is not None or replicates is not None:
        kw = {}
        if methods is not None:
            kw["methods"] = tuple(methods)
        if replicates is not None:
            kw["replicates"] = int(replicates)
        sc = replace(sc, **kw)
    prep = _prepare(sc)
    n_jobs = _rng.default_threads() if n_jobs is None else n_jobs
    if n_jobs == 1:
        per_rep = [_replicate(sc, prep, rep) for rep in range(sc.replicates)]
    else:
        per_rep = Parallel(n_jobs=n_jobs, batch_size=8)(
            delayed(_replicate)(sc, prep, rep) for rep in range(sc.replicates))
    return _aggregate(sc, per_rep)


# -------------------------------------------------------- grid refinement --

FIELDS = ("smooth", "constant")


@dataclass(frozen=True)
class RefinementScenario:
    """Functional predictors observed on successively finer grids of [0, 1].

    Subjects carry a latent field ``G_i(v) = sum_k a_ik P_k(2v - 1)`` built
    from Legendre polynomials with ``a_ik ~ N(0, 1 / (k + 1))``; the basis
    functions are orthonormal Legendre polynomials of degree ``< r``.  The
    outcome is gaussian, ``y_i = signal * a_i1 + e_i``.  Grid points are
    cell midpoints and ``q_j`` is discretised as ``q_j(v_k) / p``.
    """

    n: int = 100
    grids: tuple[int, ...] = tuple(2**k for k in range(5, 13))
    r: int = 4
    n_field: int = 8
    field: str = "smooth"
    signal: float = 0.0
    replicates: int = 100
    seed: int = 2017

    def __post_init__(self):
        object.__setattr__(self, "grids", tuple(int(g) for g in self.grids))
        if self.field not in FIELDS:
            raise ValidationError(f"field must be one of {FIELDS}")
        if len(self.grids) < 2:
            raise ValidationError("at least two grids are required")
        for a, b in zip(self.grids[:-1], self.grids[1:]):
            if b <= a or b % a:
                raise ValidationError(f"grids must be nested refinements (each size a multiple of "
                                      f"the previous one); {a} -> {b} is not")
        width = 1 if self.field == "constant" else self.r
        if width > self.grids[0]:
            raise ValidationError("basis dimension exceeds the coarsest grid")
        if width >= self.n - 1:
            raise ValidationError(f"r must be smaller than n - m = {self.n - 1}")
        if self.n_field < 1 or self.replicates < 1 or self.r < 1:
            raise ValidationError("n_field, r and replicates must be positive")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["grids"] = list(self.grids)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RefinementScenario":
        _check_keys(d, set(cls.__dataclass_fields__), "refinement scenario")
        return cls(**d)


def _legendre(v: np.ndarray, k: int) -> np.ndarray:
    return np.polynomial.legendre.legval(2.0 * v - 1.0, np.eye(k))  # (k, len(v))


def refinement_statistics(rs: RefinementScenario, replicate: int) -> np.ndarray:
    """PST statistic of one latent draw evaluated on every grid."""
    gen = _stream(_rng.child_seed(rs.seed, replicate), _DESIGN_KEY)
    k = 1 if rs.field == "constant" else rs.n_field
    a = gen.standard_normal((rs.n, k)) / np.sqrt(np.arange(1, k + 1))
    noise = gen.standard_normal(rs.n)
    y = rs.signal * (a[:, 1] if k > 1 else a[:, 0]) + noise
    x = np.ones((rs.n, 1))
    resid = y - y.mean()
    sigma2 = float(resid @ resid) / rs.n
    width = 1 if rs.field == "constant" else rs.r
    stats_ = np.empty(len(rs.grids))
    for gi, p in enumerate(rs.grids):
        v = (np.arange(p) + 0.5) / p
        g = a @ _legendre(v, k)
        q = (np.sqrt(2 * np.arange(width) + 1)[:, None] * _legendre(v, width)).T / p
        s = g.T @ resid / rs.n
        fq = information_factor(x, g, np.full(rs.n, sigma2)) @ q
        vhat = fq.T @ fq / rs.n
        sq = q.T @ s
        stats_[gi] = rs.n * float(sq @ np.linalg.solve(vhat, sq))
    return stats_


@dataclass(frozen=True, eq=False)
class RefinementReport:
    scenario: RefinementScenario
    statistics: np.ndarray  # replicates x grids

    def relative_changes(self) -> np.ndarray:
        s = self.statistics
        return np.abs(np.diff(s, axis=1)) / np.abs(s[:, :-1])

    def table(self) -> tuple[list[str], list[list]]:
        cols = ["p_from", "p_to", "replicates", "median_relative_change",
                "mean_relative_change", "max_relative_change"]
        rel = self.relative_changes()
        g = self.scenario.grids
        rows = [[g[j], g[j + 1], rel.shape[0], float(np.median(rel[:, j])),
                 float(np.mean(rel[:, j])), float(np.max(rel[:, j]))] for j in range(rel.shape[1])]
        return cols, rows

    def statistics_table(self) -> tuple[list[str], list[list]]:
        cols = ["replicate"] + [f"p_{p}" for p in self.scenario.grids]
        return cols, [[i, *map(float, row)] for i, row in enumerate(self.statistics)]


def grid_refinement_study(rs: RefinementScenario, *, n_jobs: int | None = None) -> RefinementReport:
    n_jobs = _rng.default_threads() if n_jobs is None else n_jobs
    if n_jobs == 1:
        rows = [refinement_statistics(rs, i) for i in range(rs.replicates)]
    else:
        rows = Parallel(n_jobs=n_jobs)(delayed(refinement_statistics)(rs, i) for i in range(rs.replicates))
    return RefinementReport(rs, np.vstack(rows))
