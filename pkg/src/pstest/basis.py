"""Orthonormal bases for the projection subspace.

A :class:`Basis` holds a p x r matrix ``q`` whose columns span the
subspace the score vector is projected onto.  Constructors return
sign-normalised columns (largest-magnitude entry positive) so files written
from them are stable across LAPACK builds.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable

import numpy as np
import scipy.linalg

from .errors import ValidationError
from .model import Dataset, NullFit, ScoreModel, _rank_tol, information_factor

KINDS = ("pca", "weighted_pca", "partition", "custom")

ORTHONORMAL_TOL = 1e-8
#: V-hat counts as invertible when lambda_min > tol * lambda_max.
INVERTIBLE_TOL = 1e-10


@dataclass(frozen=True, eq=False)
class Basis:
    q: np.ndarray
    kind: str = "custom"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        q = np.asarray(self.q, dtype=float)
        if q.ndim == 1:
            q = q[:, None]
        if q.ndim != 2 or q.shape[1] < 1:
            raise ValidationError(f"basis must be a p x r matrix with r >= 1, got shape {q.shape}")
        if self.kind not in KINDS:
            raise ValidationError(f"basis kind must be one of {KINDS}, got {self.kind!r}")
        q = q.copy()
        q.setflags(write=False)
        object.__setattr__(self, "q", q)

    @property
    def p(self) -> int:
        return self.q.shape[0]

    @property
    def r(self) -> int:
        return self.q.shape[1]

    def columns(self, stop: int, start: int = 0) -> "Basis":
        """Sub-basis made of columns ``start:stop``."""
        return Basis(self.q[:, start:stop], self.kind, {**self.meta, "columns": [start, stop]})

    def describe(self) -> dict:
        return {"kind": self.kind, "p": self.p, "r": self.r, **self.meta}


def sign_normalize(q: np.ndarray) -> np.ndarray:
    """Flip columns so that each one's largest-magnitude entry is positive."""
    q = np.array(q, dtype=float)
    idx = np.argmax(np.abs(q), axis=0)
    signs = np.sign(q[idx, np.arange(q.shape[1])])
    signs[signs == 0] = 1.0
    return q * signs


def _residualize(x: np.ndarray, g: np.ndarray) -> np.ndarray:
    if x.shape[1] == 0:
        return g
    q1, _ = np.linalg.qr(x)
    return g - q1 @ (q1.T @ g)


def right_singular(a: np.ndarray) -> tuple[np.ndarray, np.ndarray, int]:
    """Singular values, right singular vectors (as columns) and numerical rank."""
    _, d, vt = np.linalg.svd(a, full_matrices=False)
    rank = int(np.sum(d > _rank_tol(d, a.shape)))
    return d, vt.T, rank


def _leading(a: np.ndarray, r: int, kind: str, what: str) -> Basis:
    if r < 1:
        raise ValidationError(f"basis dimension must be >= 1, got r = {r}")
    d, v, rank = right_singular(a)
    if r > rank:
        raise ValidationError(f"r = {r} exceeds the numerical rank {rank} of {what}")
    q = sign_normalize(v[:, :r])
    return Basis(q, kind, {"singular_values": [float(x) for x in d[:r]]})


def pca_basis(dataset: Dataset, r: int, *, residualize: bool = True) -> Basis:
    """Leading ``r`` principal directions of the predictor block.

    With ``residualize`` (the default) and a non-empty nuisance design, the
    PCA is of ``(I - H) G`` where ``H`` projects onto the columns of ``x``.
    """
    g = _residualize(dataset.x, dataset.g) if residualize else dataset.g
    return _leading(g, r, "pca", "the predictor block")


def model_information_factor(dataset: Dataset, null_fit: NullFit) -> np.ndarray:
    """Information factor built from the null-fit variance weights.

    The weights depend on the outcome only through the nuisance estimate,
    so a basis taken from this factor is fixed given the null fit.  The
    squared-residual version would pick the directions in which the score
    variance happens to be overestimated, making the test conservative.
    """
    return information_factor(dataset.x, dataset.g, null_fit.variance_weights)


def weighted_pca_basis(dataset: Dataset, null_fit: NullFit, r: int) -> Basis:
    """Leading right singular vectors of the model-based information factor.

    Projected scores on distinct columns are asymptotically uncorrelated
    under the null.
    """
    return _leading(model_information_factor(dataset, null_fit), r, "weighted_pca",
                    "the information factor")


def weighted_pca_from_scores(score_model: ScoreModel, r: int) -> Basis:
    if score_model.dataset is None or score_model.null_fit is None:
        raise ValidationError("weighted PCA needs a score model built by compute_scores")
    return weighted_pca_basis(score_model.dataset, score_model.null_fit, r)


@dataclass(frozen=True)
class Partition:
    """Disjoint, nonempty groups of predictor indices (0-based)."""

    groups: tuple[tuple[int, ...], ...]
    labels: tuple[str, ...] = ()

    def __post_init__(self):
        groups = tuple(tuple(int(i) for i in grp) for grp in self.groups)
        if not groups:
            raise ValidationError("partition has no groups")
        seen: dict[int, int] = {}
        overlaps = []
        for j, grp in enumerate(groups):
            if not grp:
                raise ValidationError(f"partition group {j} is empty")
            for i in grp:
                if i < 0:
                    raise ValidationError(f"negative predictor index {i} in group {j}")
                if i in seen and seen[i] != j:
                    overlaps.append((i, seen[i], j))
                seen.setdefault(i, j)
        if overlaps:
            desc = ", ".join(f"index {i} in groups {a} and {b}" for i, a, b in overlaps[:10])
            raise ValidationError(f"partition groups overlap: {desc}")
        labels = tuple(str(lab) for lab in self.labels) or tuple(str(j) for j in range(len(groups)))
        if len(labels) != len(groups):
            raise ValidationError("one label per group is required")
        object.__setattr__(self, "groups", tuple(tuple(sorted(set(g))) for g in groups))
        object.__setattr__(self, "labels", labels)

    @classmethod
    def from_pairs(cls, pairs: Iterable[tuple[int, object]]) -> "Partition":
        """Build from ``(index, group label)`` pairs; groups ordered by label."""
        members: dict[object, list[int]] = {}
        where: dict[int, object] = {}
        overlaps = []
        for i, lab in pairs:
            i = int(i)
            if i in where and where[i] != lab:
                overlaps.append((i, where[i], lab))
            where.setdefault(i, lab)
            members.setdefault(lab, []).append(i)
        if overlaps:
            desc = ", ".join(f"index {i} in groups {a!r} and {b!r}" for i, a, b in overlaps[:10])
            raise ValidationError(f"partition groups overlap: {desc}")
        order = sorted(members, key=_label_key)
        return cls(tuple(tuple(members[k]) for k in order), tuple(str(k) for k in order))

    @classmethod
    def contiguous(cls, p: int, r: int) -> "Partition":
        """``r`` groups of consecutive indices covering ``0..p-1``."""
        if not 1 <= r <= p:
            raise ValidationError(f"need 1 <= r <= p, got r = {r}, p = {p}")
        edges = np.linspace(0, p, r + 1).round().astype(int)
        return cls(tuple(tuple(range(a, b)) for a, b in zip(edges[:-1], edges[1:])))


def _label_key(lab):
    try:
        return (0, float(lab), "")
    except (TypeError, ValueError):
        return (1, 0.0, str(lab))


def partition_basis(partition: Partition, p: int) -> Basis:
    """Normalised group indicators; averaging within groups of predictors."""
    top = max(max(grp) for grp in partition.groups)
    if top >= p:
        raise ValidationError(f"partition refers to index {top} but p = {p}")
    q = np.zeros((p, len(partition.groups)))
    for j, grp in enumerate(partition.groups):
        q[list(grp), j] = 1.0 / np.sqrt(len(grp))
    return Basis(q, "partition", {"groups": len(partition.groups), "labels": list(partition.labels)})


def custom_basis(q: np.ndarray) -> Basis:
    """Re-orthonormalise user supplied columns with a pivoted QR.

    Columns that are numerically dependent on earlier ones are dropped; the
    count is recorded in ``meta["dropped"]``.
    """
    q = np.asarray(q, dtype=float)
    if q.ndim == 1:
        q = q[:, None]
    qq, rr, _ = scipy.linalg.qr(q, mode="economic", pivoting=True)
    diag = np.abs(np.diag(rr))
    if diag.size == 0 or diag[0] == 0.0:
        raise ValidationError("custom basis has no nonzero columns")
    rank = int(np.sum(diag > max(q.shape) * np.finfo(float).eps * diag[0]))
    return Basis(sign_normalize(qq[:, :rank]), "custom", {"dropped": int(q.shape[1] - rank)})


@dataclass(frozen=True)
class BasisDiagnostics:
    r: int
    orthonormality_error: float
    orthonormal: bool
    v_rank: int
    condition_number: float
    invertible: bool
    within_dimension: bool
    messages: tuple[str, ...] = ()

    @property
    def ok(self) -> bool:
        return self.orthonormal and self.invertible and self.within_dimension

    def as_dict(self) -> dict:
        return {
            "r": self.r,
            "orthonormality_error": self.orthonormality_error,
            "orthonormal": self.orthonormal,
            "v_rank": self.v_rank,
            "condition_number": self.condition_number,
            "invertible": self.invertible,
            "within_dimension": self.within_dimension,
            "ok": self.ok,
            "messages": list(self.messages),
        }


def validate_basis(basis: Basis, score_model: ScoreModel, *, tol: float = INVERTIBLE_TOL) -> BasisDiagnostics:
    """Check orthonormality of ``q`` and invertibility of ``V = Q' omega Q``.

    Never raises on a bad basis; callers decide what to do with the report.
    """
    if basis.p != score_model.p:
        raise ValidationError(f"basis has p = {basis.p} rows but the scores have p = {score_model.p}")
    q = basis.q
    r = basis.r
    err = float(np.max(np.abs(q.T @ q - np.eye(r))))
    lam = np.linalg.eigvalsh(score_model.projected_information(q))
    lmax = float(lam[-1])
    # eigenvalues at rounding level relative to the whole information are zero
    scale = float(np.sum(score_model.info_factor**2)) / score_model.n
    floor = max(tol * lmax, score_model.p * np.finfo(float).eps * scale)
    if lmax <= floor:
        rank, cond = 0, float("inf")
    else:
        rank = int(np.sum(lam > floor))
        cond = lmax / float(lam[0]) if lam[0] > 0 else float("inf")
    msgs = []
    ortho = err <= ORTHONORMAL_TOL
    if not ortho:
        msgs.append(f"columns are not orthonormal (max |Q'Q - I| = {err:.3g})")
    invertible = rank == r
    if not invertible:
        msgs.append(f"V-hat is singular: rank {rank} < r = {r}; remove directions outside the "
                    "column space of the information estimate")
    dim_ok = r < score_model.n - score_model.m
    if not dim_ok:
        msgs.append(f"r = {r} must be smaller than n - m = {score_model.n - score_model.m}")
    return BasisDiagnostics(r, err, ortho, rank, cond, invertible, dim_ok, tuple(msgs))


def random_rotation(basis: Basis, rng: np.random.Generator) -> Basis:
    """Same subspace, different orthonormal basis (``Q M`` with ``M`` orthogonal)."""
    m, _ = np.linalg.qr(rng.standard_normal((basis.r, basis.r)))
    return Basis(basis.q @ m, basis.kind, dict(basis.meta))
