"""Regression analysis for fused data sources.

One source observes ``(V, Y)``, the other ``(V, L)``; the target is the
coefficient vector of a regression of Y on ``(V, L)``. Inverse-probability
weighted, imputation and doubly robust estimating equations are provided,
with stacked sandwich inference, bootstrap, Rubin pooling, locally
efficient weights and a Monte Carlo harness.
"""
from . import kernels
from .data import ColumnSchema, FusedDataset, Record, ReplicateSet, load_fused_csv, validate, write_fused_csv
from .errors import FitError, FusionError, InferenceError, InputError
from .estimating import EstimatorConfig, EstimatorKind, FitResult, GSpec, fit_point, solve, u_dr, u_imp, u_ipw
from .inference import bootstrap_covariance, fit_with_inference, rubin_pool, sandwich_covariance, wald_ci
from .nuisance import (
    LINEAR,
    LOGISTIC,
    ImputationFit,
    OutcomeModel,
    PropensityFit,
    fit_imputation,
    fit_propensity,
    predict_pi,
)

__version__ = "0.1.0"
BACKEND = kernels.BACKEND

__all__ = [
    "BACKEND",
    "ColumnSchema",
    "EstimatorConfig",
    "EstimatorKind",
    "FitError",
    "FitResult",
    "FusedDataset",
    "FusionError",
    "GSpec",
    "ImputationFit",
    "InferenceError",
    "InputError",
    "LINEAR",
    "LOGISTIC",
    "OutcomeModel",
    "PropensityFit",
    "Record",
    "ReplicateSet",
    "bootstrap_covariance",
    "fit_imputation",
    "fit_point",
    "fit_propensity",
    "fit_with_inference",
    "load_fused_csv",
    "predict_pi",
    "rubin_pool",
    "sandwich_covariance",
    "solve",
    "u_dr",
    "u_imp",
    "u_ipw",
    "validate",
    "wald_ci",
    "write_fused_csv",
]
