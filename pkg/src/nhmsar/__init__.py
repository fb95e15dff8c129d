"""Markov-switching autoregressions with observation-driven regime changes."""

from nhmsar.core import (
    RegimeModel, brute_force_loglik, filter_forgetting, forward_filter, simulate, smooth,
)
from nhmsar.estimation import (
    EmConfig, FitReport, GaussianArFamily, RainfallFamily, consistency_experiment,
    em_fit, model_select, multi_start_fit, parametric_bootstrap, setar_report,
)
from nhmsar.gaussian_ar import (
    GaussianArModel, GaussianArParams, fit_setar, lynx_published_params, param_distance,
    stability_check,
)
from nhmsar.rainfall import RainfallNhmmModel, RainfallNhmmParams, simulate_rainfall

__version__ = "0.1.0"

__all__ = [
    "EmConfig", "FitReport", "GaussianArFamily", "GaussianArModel", "GaussianArParams",
    "RainfallFamily", "RainfallNhmmModel", "RainfallNhmmParams", "RegimeModel",
    "brute_force_loglik", "consistency_experiment", "em_fit", "filter_forgetting",
    "fit_setar", "forward_filter", "lynx_published_params", "model_select",
    "multi_start_fit", "param_distance", "parametric_bootstrap", "setar_report",
    "simulate", "simulate_rainfall", "smooth", "stability_check",
]
