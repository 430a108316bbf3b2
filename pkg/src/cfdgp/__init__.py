"""Fast-scale pseudo measurements for meter-only nodes from slow energy
readings, correlated neighbours and deep Gaussian process forecasts."""

from .cf import (
    METHODS,
    baseline_average,
    baseline_prediction_based,
    cf_dgp_estimate,
    cf_estimate,
    correlation_matrix,
    pearson,
)
from .data import LoadSeries, SyntheticSpec, TwoScaleDataset, aggregate_fast_to_slow, generate_synthetic, read_csv
from .dgp import DGPModel, TrainConfig, dgp_predict, dgp_train, fit_load_model
from .errors import CfdgpError, ConfigError, DataError, NumericalError
from .evaluation import ExperimentConfig, mape, rmse, run_experiment
from .gpcore import KernelSpec, gp_log_marginal_likelihood, gp_predict

__version__ = "0.1.0"

__all__ = [
    "METHODS", "baseline_average", "baseline_prediction_based", "cf_dgp_estimate", "cf_estimate",
    "correlation_matrix", "pearson", "LoadSeries", "SyntheticSpec", "TwoScaleDataset",
    "aggregate_fast_to_slow", "generate_synthetic", "read_csv", "DGPModel", "TrainConfig",
    "dgp_predict", "dgp_train", "fit_load_model", "CfdgpError", "ConfigError", "DataError",
    "NumericalError", "ExperimentConfig", "mape", "rmse", "run_experiment", "KernelSpec",
    "gp_log_marginal_likelihood", "gp_predict",
]
