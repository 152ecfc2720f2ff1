"""Treatment effect estimation for randomized trials run on an online learning platform."""

__version__ = "0.1.0"

from .cleaning import attrition_rate, clean_problem_logs, summarize_conditions
from .covariates import (BalanceResult, FeatureSelectionResult, classification_permutation_test,
                         select_features)
from .data_model import TrialDataset, read_analysis_csv, validate_tables, write_analysis_csv
from .errors import (ConflictingAssignment, DomainError, EtrialsError, MissingRequiredFile,
                     SchemaError, ValidationFailed)
from .estimators import (EstimateResult, difference_in_means, fit_mixed_model, loop_estimate,
                         regression_estimate)
from .forest import Forest, ForestParams, forest_predict, forest_train
from .imputation import FittedImputer, ImputerSpec, fit_imputer
from .ingestion import HeaderMapping, LogTables, build_analysis_table, load_tables
from .simulation import SimulationConfig, SyntheticTrial, generate, rerandomize

__all__ = [
    "BalanceResult", "ConflictingAssignment", "DomainError", "EstimateResult", "EtrialsError",
    "FeatureSelectionResult", "FittedImputer", "Forest", "ForestParams", "HeaderMapping",
    "ImputerSpec", "LogTables", "MissingRequiredFile", "SchemaError", "SimulationConfig",
    "SyntheticTrial", "TrialDataset", "ValidationFailed", "attrition_rate",
    "build_analysis_table", "classification_permutation_test", "clean_problem_logs",
    "difference_in_means", "fit_imputer", "fit_mixed_model", "forest_predict", "forest_train",
    "generate", "load_tables", "loop_estimate", "read_analysis_csv", "regression_estimate",
    "rerandomize", "select_features", "summarize_conditions", "validate_tables",
    "write_analysis_csv",
]
