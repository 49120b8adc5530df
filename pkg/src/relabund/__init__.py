"""Relative abundance estimation from a standardized and an opportunistic count dataset."""

__version__ = "0.1.0"

from .estimators import (
    AbundanceEstimate,
    ConvergenceError,
    baseline_area,
    baseline_standardized,
    baseline_totalcount,
    closed_form_mle,
    fixed_point_mle,
)
from .glm import (
    DataInsufficiencyError,
    DesignSpec,
    EstimationError,
    FitOptions,
    FitResult,
    Penalty,
    build_design,
    estimate_dispersion,
    fit,
    kernel_dimension_unconstrained,
    penalized_objective,
)
from .model import (
    CountTable,
    EffortSpec,
    IndexSpace,
    ParameterSet,
    PointYearCounts,
    intensity,
    normalize_parameters,
    relative_abundance,
    standardize_abundance,
)
from .variance import asymptotic_variance, imaginary_comparison, reduction_factor, verify_variance_mc

__all__ = [
    "AbundanceEstimate",
    "ConvergenceError",
    "CountTable",
    "DataInsufficiencyError",
    "DesignSpec",
    "EffortSpec",
    "EstimationError",
    "FitOptions",
    "FitResult",
    "IndexSpace",
    "ParameterSet",
    "Penalty",
    "PointYearCounts",
    "asymptotic_variance",
    "baseline_area",
    "baseline_standardized",
    "baseline_totalcount",
    "build_design",
    "closed_form_mle",
    "estimate_dispersion",
    "fit",
    "fixed_point_mle",
    "imaginary_comparison",
    "intensity",
    "kernel_dimension_unconstrained",
    "normalize_parameters",
    "penalized_objective",
    "reduction_factor",
    "relative_abundance",
    "standardize_abundance",
    "verify_variance_mc",
]
