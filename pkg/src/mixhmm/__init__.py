"""Mixed multivariate hidden Markov models.

N latent states, K-component discrete random effects on the transition
matrix, and a binary covariate modulating the transition logits, fitted to
multi-series per-event observation data by staged maximum likelihood with
AIC model selection, local state decoding, and confidence intervals.
"""

from .errors import (
    ConfigError,
    DataError,
    EstimationError,
    NumericalError,
    SupportError,
)
from .estimation import (
    Candidate,
    FitConfig,
    FitResult,
    RestartProvenance,
    SelectionResult,
    SelectionRow,
    compute_aic,
    fit_full,
    fit_pipeline,
    fit_stage1_emissions,
    fit_stage2_markov,
    initial_emissions,
    select_model,
)
from .inference import (
    ConfidenceInterval,
    DecodeResult,
    context_posterior,
    decode_local,
    decode_viterbi,
    fisher_confidence_intervals,
    profile_ci,
)
from .likelihood import (
    ForwardResult,
    PackedData,
    emission_loglik_matrix,
    forward_loglik_one_series,
    total_loglik,
)
from .markov import (
    count_free_parameters,
    stationary_distribution,
    tpm_from_logits,
    tpm_to_logits,
)
from .obsmodel import (
    EmissionParams,
    EventObservation,
    Series,
    SeriesSet,
    event_log_density,
    gamma_mean_sd_to_shape_scale,
    log_density,
)
from .params import (
    ModelParams,
    ModelSpec,
    canonicalize,
    expand_contexts,
    pack,
    parameter_names,
    promote_covariate_mode,
    unpack,
)
from .simulate import SimConfig, SimTruth, simulate

__version__ = "0.1.0"

__all__ = [
    "Candidate",
    "ConfidenceInterval",
    "ConfigError",
    "DataError",
    "DecodeResult",
    "EmissionParams",
    "EstimationError",
    "EventObservation",
    "FitConfig",
    "FitResult",
    "ForwardResult",
    "ModelParams",
    "ModelSpec",
    "NumericalError",
    "PackedData",
    "RestartProvenance",
    "SelectionResult",
    "SelectionRow",
    "Series",
    "SeriesSet",
    "SimConfig",
    "SimTruth",
    "SupportError",
    "canonicalize",
    "compute_aic",
    "context_posterior",
    "count_free_parameters",
    "decode_local",
    "decode_viterbi",
    "emission_loglik_matrix",
    "event_log_density",
    "expand_contexts",
    "fisher_confidence_intervals",
    "fit_full",
    "fit_pipeline",
    "fit_stage1_emissions",
    "fit_stage2_markov",
    "forward_loglik_one_series",
    "gamma_mean_sd_to_shape_scale",
    "initial_emissions",
    "log_density",
    "pack",
    "parameter_names",
    "profile_ci",
    "promote_covariate_mode",
    "select_model",
    "simulate",
    "stationary_distribution",
    "total_loglik",
    "tpm_from_logits",
    "tpm_to_logits",
    "unpack",
]
