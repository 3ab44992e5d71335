"""Selection models for meta-analysis with monotone step weight functions.

The package fits a normal random-effects meta-analysis model in which each
study's chance of inclusion is a non-increasing step function of its
two-sided p-value.  Weights are estimated jointly with the mean effect and
the between-study variance by constrained differential evolution, with a
profile-likelihood interval for the mean and a Monte-Carlo test of the
hypothesis that no selection is present.
"""
from .stats_core import (
    RngStream,
    chi2_quantile_1df,
    norm_cdf,
    norm_pdf,
    norm_quantile,
)
from .model import (
    GroupedPvalues,
    MetaDataset,
    ModelParams,
    MONOTONE_NORMALIZATION,
    StepWeights,
    Study,
    UNCONSTRAINED_NORMALIZATION,
    build_groups,
    ties_and_ordering,
    two_sided_pvalue,
    weight_at_p,
)
from .likelihood import (
    CoercivityReport,
    LogLikContext,
    PENALTY_SENTINEL,
    coercivity_probe,
    h_matrix,
    log_likelihood,
    log_likelihood_batch,
    normalizing_constants,
)
from .optimizer import (
    DEConfig,
    FitResult,
    WEIGHT_FLOOR,
    de_maximize,
    fit_monotone,
    fit_random_effects,
    fit_unconstrained,
)
from .inference import (
    ProfileCI,
    PvalDensityParams,
    SelectionTestResult,
    profile_ci_theta,
    profile_loglik,
    pval_cdf,
    pval_density,
    pval_quantile,
    sample_pvalue_and_sign,
    selection_test,
)
from .cli import education_csv_path, load_education, parse_csv

__version__ = "0.1.0"

__all__ = [
    "CoercivityReport",
    "DEConfig",
    "FitResult",
    "GroupedPvalues",
    "LogLikContext",
    "MetaDataset",
    "ModelParams",
    "MONOTONE_NORMALIZATION",
    "PENALTY_SENTINEL",
    "ProfileCI",
    "PvalDensityParams",
    "RngStream",
    "SelectionTestResult",
    "StepWeights",
    "Study",
    "UNCONSTRAINED_NORMALIZATION",
    "WEIGHT_FLOOR",
    "build_groups",
    "chi2_quantile_1df",
    "coercivity_probe",
    "de_maximize",
    "education_csv_path",
    "fit_monotone",
    "fit_random_effects",
    "fit_unconstrained",
    "h_matrix",
    "load_education",
    "log_likelihood",
    "log_likelihood_batch",
    "norm_cdf",
    "norm_pdf",
    "norm_quantile",
    "normalizing_constants",
    "parse_csv",
    "profile_ci_theta",
    "profile_loglik",
    "pval_cdf",
    "pval_density",
    "pval_quantile",
    "sample_pvalue_and_sign",
    "selection_test",
    "ties_and_ordering",
    "two_sided_pvalue",
    "weight_at_p",
    "__version__",
]
