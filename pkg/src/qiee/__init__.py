"""Quantiles of potential outcomes by inverse and debiased estimating equations."""

from .dataset import Dataset, FoldAssignment, load_csv, make_folds, write_csv
from .errors import QieeError
from .estimands import (
    EffectReport,
    EstimateReport,
    QuantileIEE,
    build_longitudinal_problem,
    build_mediation_problem,
    build_problem,
    build_qte_problem,
    build_truncation_problem,
    effect,
    estimate,
    fit_nuisance,
    inverse_cdf_estimate,
)
from .inference import bootstrap_variance, eif_variance, rearrange, wald_ci
from .nuisance import LearnerSpec, RoleBinding, crossfit

__all__ = [
    "Dataset",
    "EffectReport",
    "EstimateReport",
    "FoldAssignment",
    "LearnerSpec",
    "QieeError",
    "QuantileIEE",
    "RoleBinding",
    "bootstrap_variance",
    "build_longitudinal_problem",
    "build_mediation_problem",
    "build_problem",
    "build_qte_problem",
    "build_truncation_problem",
    "crossfit",
    "effect",
    "eif_variance",
    "estimate",
    "fit_nuisance",
    "inverse_cdf_estimate",
    "load_csv",
    "make_folds",
    "rearrange",
    "wald_ci",
    "write_csv",
]
