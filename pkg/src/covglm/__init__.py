"""covglm: multivariate covariance generalized linear models for counts.

Marginal log-linear means per response with offsets, dispersion modelled
by a matrix linear predictor over known symmetric structures, responses
joined through a generalized Kronecker product, and estimation by paired
quasi-score / Pearson estimating functions with a Godambe sandwich.
"""

__version__ = "0.1.0"

from .exceptions import (CovglmError, ConvergenceError, DataError,
                         InfeasibleParameterError, SpecificationError)
from .structures import (GroupIndex, KnownMatrix, build_covariate_block,
                         build_covariate_interaction, build_exchangeable,
                         build_identity, build_inverse_distance, build_ma_band,
                         dense_from_blocks)
from .covariance import (DispersionState, JointCovariance, ParamId,
                         cholesky_derivative, cross_correlation_matrix,
                         matrix_linear_predictor, response_covariance)
from .estimation import (FittedModel, LambdaLayout, ModelMatrices, fit,
                         fit_invocations, gaussian_pseudo_loglik)
from .selection import (ResponseSpec, ScoreTest, SelectionProblem, SelectionTrace,
                        TermBlock, WaldResult, score_test_dispersion,
                        score_test_mean, sic_one_step, sic_sequential, sic_table,
                        sic_value, stepwise_workflow, wald_test)
from .reporting import (DerivedCorrelation, derived_correlation, dispersion_table,
                        emit_report, fitted_values_ci, gaussian_pseudo_likelihood,
                        load_report_parameters, wald_table)
from .data import DataSchema, Dataset, emit_dataset, load_dataset
from .design import (build_component, build_components, build_model_matrices,
                     build_selection_problem, encode_term, term_index_map)
from .config import ModelConfig, ResponseConfig, load_config, parse_config

__all__ = [
    "__version__",
    "CovglmError", "ConvergenceError", "DataError", "InfeasibleParameterError",
    "SpecificationError",
    "GroupIndex", "KnownMatrix", "build_covariate_block",
    "build_covariate_interaction", "build_exchangeable", "build_identity",
    "build_inverse_distance", "build_ma_band", "dense_from_blocks",
    "DispersionState", "JointCovariance", "ParamId", "cholesky_derivative",
    "cross_correlation_matrix", "matrix_linear_predictor", "response_covariance",
    "FittedModel", "LambdaLayout", "ModelMatrices", "fit", "fit_invocations",
    "gaussian_pseudo_loglik",
    "ResponseSpec", "ScoreTest", "SelectionProblem", "SelectionTrace", "TermBlock",
    "WaldResult", "score_test_dispersion", "score_test_mean", "sic_one_step",
    "sic_sequential", "sic_table", "sic_value", "stepwise_workflow", "wald_test",
    "DerivedCorrelation", "derived_correlation", "dispersion_table", "emit_report",
    "fitted_values_ci", "gaussian_pseudo_likelihood", "load_report_parameters",
    "wald_table",
    "DataSchema", "Dataset", "emit_dataset", "load_dataset",
    "build_component", "build_components", "build_model_matrices",
    "build_selection_problem", "encode_term", "term_index_map",
    "ModelConfig", "ResponseConfig", "load_config", "parse_config",
]
