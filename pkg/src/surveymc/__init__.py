"""Design-weighted low-rank matrix completion and doubly robust estimation
for multivariate survey nonresponse."""

__version__ = "0.1.0"

from .data_model import (
    PopulationData,
    SampleData,
    TuningTriple,
    read_matrix_csv,
    read_weights_csv,
    validate_sample,
    write_matrix_csv,
)
from .estimators import (
    METHODS,
    EstimateVector,
    EstimatorOptions,
    compute_estimates,
    dr_estimator,
    dr_linear,
    dr_naive_completion,
    hot_deck_impute,
    ht_estimator,
    ipw_estimator,
    mi_chained,
)
from .matrix_completion import (
    CompletionFit,
    ProjectionContext,
    assemble_fitted,
    build_weighted_target,
    cross_validate,
    default_tuning_grid,
    fit_coefficients,
    fit_completion,
    fit_low_rank,
    make_projection_context,
    project,
    soft_threshold_svd,
)
from .response_model import ResponseModelFit, fit_logistic_column, fit_response_matrix
from .sampling import (
    DesignSpec,
    SampleDraw,
    apply_missingness,
    calibrate_missingness,
    compute_size_measure,
    draw_indices,
    draw_sample,
    response_probabilities,
)
from .simulation import (
    McCell,
    McSummary,
    SimConfig,
    SimulationError,
    generate_population,
    run_monte_carlo,
    summarize_tables,
    write_results_csv,
)

__all__ = [
    "PopulationData",
    "SampleData",
    "TuningTriple",
    "read_matrix_csv",
    "read_weights_csv",
    "validate_sample",
    "write_matrix_csv",
    "METHODS",
    "EstimateVector",
    "EstimatorOptions",
    "compute_estimates",
    "dr_estimator",
    "dr_linear",
    "dr_naive_completion",
    "hot_deck_impute",
    "ht_estimator",
    "ipw_estimator",
    "mi_chained",
    "CompletionFit",
    "ProjectionContext",
    "assemble_fitted",
    "build_weighted_target",
    "cross_validate",
    "default_tuning_grid",
    "fit_coefficients",
    "fit_completion",
    "fit_low_rank",
    "make_projection_context",
    "project",
    "soft_threshold_svd",
    "ResponseModelFit",
    "fit_logistic_column",
    "fit_response_matrix",
    "DesignSpec",
    "SampleDraw",
    "apply_missingness",
    "calibrate_missingness",
    "compute_size_measure",
    "draw_indices",
    "draw_sample",
    "response_probabilities",
    "McCell",
    "McSummary",
    "SimConfig",
    "SimulationError",
    "generate_population",
    "run_monte_carlo",
    "summarize_tables",
    "write_results_csv",
]
