"""Semi-parametric GEE for crossover designs with repeated measures.

Parametric treatment/period/sequence effects plus B-spline smooths for the
within-period time effect and first-order carry-over effects, fitted by a
cyclic estimating-equation algorithm with robust (sandwich) inference,
residual diagnostics, QIC model comparison, and a Monte Carlo study
driver.
"""

from .correlation import ResidualMomentSystem, WorkingCorrelation, materialize, moment_system, update_alpha
from .data import LongitudinalDataset, Observation, SubjectRecord
from .design import DesignBundle, ModelSpec, SplineConfig, SubjectDesign, build_design
from .diagnostics import (
    DiagnosticsReport,
    QicComponents,
    QQBand,
    ResidualSet,
    diagnostics_report,
    qic,
    qq_band_data,
    quasi_likelihood,
    standardized_residuals,
)
from .errors import (
    BlockSingularityError,
    ConfigError,
    CrossgeeError,
    DataValidationError,
    DegreesOfFreedomError,
    DesignSingularityError,
    DiagnosticsError,
    DivergenceError,
    DomainError,
    EstimationError,
    ExtrapolationError,
    InferenceError,
    KnotPlacementError,
    UnknownCovariateError,
)
from .estimator import (
    FitResult,
    FitState,
    WaldRow,
    block_scores,
    fit,
    initialize,
    sandwich_covariance,
    solve_beta,
    solve_spline_block,
    wald_table,
)
from .families import Family, estimate_dispersion, family_functions
from .simulation import Scenario, StudySummary, model_spec, run_study, simulate_dataset
from .splines import (
    SmoothFunction,
    SplineBasis,
    basis_matrix,
    build_basis,
    evaluate_basis,
    evaluate_smooth,
    greville_abscissae,
)

__version__ = "0.1.0"

__all__ = [
    "BlockSingularityError",
    "ConfigError",
    "CrossgeeError",
    "DataValidationError",
    "DegreesOfFreedomError",
    "DesignBundle",
    "DesignSingularityError",
    "DiagnosticsError",
    "DiagnosticsReport",
    "DivergenceError",
    "DomainError",
    "EstimationError",
    "ExtrapolationError",
    "Family",
    "FitResult",
    "FitState",
    "InferenceError",
    "KnotPlacementError",
    "LongitudinalDataset",
    "ModelSpec",
    "Observation",
    "QQBand",
    "QicComponents",
    "ResidualMomentSystem",
    "ResidualSet",
    "Scenario",
    "SmoothFunction",
    "SplineBasis",
    "SplineConfig",
    "StudySummary",
    "SubjectDesign",
    "SubjectRecord",
    "UnknownCovariateError",
    "WaldRow",
    "WorkingCorrelation",
    "basis_matrix",
    "block_scores",
    "build_basis",
    "build_design",
    "diagnostics_report",
    "estimate_dispersion",
    "evaluate_basis",
    "evaluate_smooth",
    "family_functions",
    "fit",
    "greville_abscissae",
    "initialize",
    "materialize",
    "model_spec",
    "moment_system",
    "qic",
    "qq_band_data",
    "quasi_likelihood",
    "run_study",
    "sandwich_covariance",
    "simulate_dataset",
    "solve_beta",
    "solve_spline_block",
    "standardized_residuals",
    "update_alpha",
    "wald_table",
]
