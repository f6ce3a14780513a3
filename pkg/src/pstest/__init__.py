"""Projected score tests for a high-dimensional predictor block."""

__version__ = "0.1.0"

from .baselines import PermutationScheme, aspu_test, rao_score_test, spu_test, sum_test
from .basis import (
    Basis,
    Partition,
    custom_basis,
    partition_basis,
    pca_basis,
    validate_basis,
    weighted_pca_basis,
)
from .errors import (
    ConvergenceError,
    NumericalError,
    PerfectSeparationError,
    PSTError,
    SingularInformationError,
    ValidationError,
)
from .model import Dataset, NullFit, ScoreModel, compute_scores, fit_null
from .posthoc import PosthocResult, posthoc_inference, project_and_standardize
from .pst import AdaptiveResult, PstResult, adaptive_pca_test, pst_exact_normal, pst_statistic

__all__ = [
    "AdaptiveResult", "Basis", "ConvergenceError", "Dataset", "NullFit", "NumericalError",
    "PSTError", "Partition", "PerfectSeparationError", "PermutationScheme", "PosthocResult",
    "PstResult", "ScoreModel", "SingularInformationError", "ValidationError", "adaptive_pca_test",
    "aspu_test", "compute_scores", "custom_basis", "fit_null", "partition_basis", "pca_basis",
    "posthoc_inference", "project_and_standardize", "pst_exact_normal", "pst_statistic",
    "rao_score_test", "spu_test", "sum_test", "validate_basis", "weighted_pca_basis",
]
