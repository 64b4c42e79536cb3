"""Latent class models with concomitant variables, fitted by Fisher scoring.

The class weights follow a multinomial logit of subject covariates and each
class has a log-linear distribution over response patterns.
"""

from .data_io import (
    DataError,
    Dataset,
    GroupedData,
    build_G,
    load_spec,
    parameter_names,
    parse_dataset,
    pattern_index,
    simulate,
)
from .inference import hybrid_info, observed_info, score, standard_errors
from .misfit_lab import MisfitScenario, fit_expected
from .model_core import ModelSpec, Params, StructuralError, loglik
from .optimizer import FitResult, OptimOptions, fit

__version__ = "0.1.0"

__all__ = [
    "DataError", "Dataset", "GroupedData", "build_G", "load_spec", "parameter_names",
    "parse_dataset", "pattern_index", "simulate", "hybrid_info", "observed_info", "score",
    "standard_errors", "MisfitScenario", "fit_expected", "ModelSpec", "Params",
    "StructuralError", "loglik", "FitResult", "OptimOptions", "fit",
]
