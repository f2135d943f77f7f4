"""Merge or ensemble? Transition-point theory for multi-study regression.

When training data come from several studies whose predictor effects vary
randomly from study to study, pooling the rows into one fit wins at low
heterogeneity and averaging per-study fits wins at high heterogeneity. This
package computes where the switch happens for least squares and ridge
regression, the optimal ensemble weights, moment estimates of the
heterogeneity, and Monte Carlo checks of all of it.
"""

__version__ = "0.1.0"

from .analysis import AnalysisReport, analyze, recommend
from .error_theory import (
    ErrorDecomposition,
    MSPEComponents,
    absolute_mspe,
    excess_mspe_ls_ensemble,
    excess_mspe_ls_merged,
    excess_mspe_ridge_ensemble,
    excess_mspe_ridge_merged,
    irreducible_error,
)
from .estimators import (
    EnsembleWeights,
    LearnerFit,
    RidgeConfig,
    fit_ensemble,
    fit_merged,
    fit_ols,
    fit_per_study,
    fit_ridge,
    predict,
    scaling_matrix,
)
from .exceptions import (
    ConditionViolation,
    DegenerateError,
    InputError,
    InsufficientStudiesError,
    NoCrossingError,
    SimulationError,
    SingularDesignError,
    TranspointError,
)
from .model import (
    GeneratorConfig,
    RandomEffectsStructure,
    StudyData,
    gaussian_designs,
    generate_study,
    heterogeneity_summary,
    stack_studies,
)
from .simulation import SweepConfig, SweepResult, compare_at, empirical_transition, run_sweep, theoretical_taus
from .transition import (
    TransitionResult,
    tau_asymptotic,
    tau_ls,
    tau_ls_interval,
    tau_ridge,
    tau_ridge_interval,
)
from .varcomp import VarCompEstimate, bootstrap_residuals, bootstrap_rmspe, estimate_varcomp
from .weights import OptimalWeightSolution, optimal_transition_point, optimal_weights_ls, optimal_weights_ridge

__all__ = [
    "AnalysisReport",
    "ConditionViolation",
    "DegenerateError",
    "EnsembleWeights",
    "ErrorDecomposition",
    "GeneratorConfig",
    "InputError",
    "InsufficientStudiesError",
    "LearnerFit",
    "MSPEComponents",
    "NoCrossingError",
    "OptimalWeightSolution",
    "RandomEffectsStructure",
    "RidgeConfig",
    "SimulationError",
    "SingularDesignError",
    "StudyData",
    "SweepConfig",
    "SweepResult",
    "TransitionResult",
    "TranspointError",
    "VarCompEstimate",
    "absolute_mspe",
    "analyze",
    "bootstrap_residuals",
    "bootstrap_rmspe",
    "compare_at",
    "empirical_transition",
    "estimate_varcomp",
    "excess_mspe_ls_ensemble",
    "excess_mspe_ls_merged",
    "excess_mspe_ridge_ensemble",
    "excess_mspe_ridge_merged",
    "fit_ensemble",
    "fit_merged",
    "fit_ols",
    "fit_per_study",
    "fit_ridge",
    "gaussian_designs",
    "generate_study",
    "heterogeneity_summary",
    "irreducible_error",
    "optimal_transition_point",
    "optimal_weights_ls",
    "optimal_weights_ridge",
    "predict",
    "recommend",
    "run_sweep",
    "scaling_matrix",
    "stack_studies",
    "tau_asymptotic",
    "tau_ls",
    "tau_ls_interval",
    "tau_ridge",
    "tau_ridge_interval",
    "theoretical_taus",
]
