"""Bayesian outlier detection and down-weighting for binomial network
meta-analysis: random-effects models with exact binomial likelihoods,
mean-shift Bayes factor tests, posterior predictive p-values, power-prior
down-weighting, and a reproducible simulation harness."""

from .data import (
    Arm,
    ConnectivityResult,
    DatasetError,
    DisconnectedNetworkError,
    NetworkDataset,
    ObservedProportions,
    Study,
    connectivity_check,
    load_dataset,
    observed_proportions,
    write_dataset,
)
from .detect import (
    DegenerateProportionPool,
    DetectionReport,
    DetectionRow,
    DetectionThresholds,
    Discrepancy,
    PPPValue,
    ReplicateDataset,
    detect,
    f_gelman_chi2,
    f_likelihood,
    f_sdo,
    ppp_value,
    replicate,
    replicate_events,
)
from .downweight import (
    ComparisonSummary,
    ContrastBias,
    Estimate,
    downweighted_fit,
    exclusion_fit,
    relative_bias,
    standard_fit,
    summarize,
)
from .evidence import (
    BayesFactor,
    EvidenceClass,
    SteppingStoneResult,
    bayes_factor,
    bayes_factor_savage_dickey,
    bayes_factor_stepping_stone,
    classify_bayes_factor,
    log_marginal_stepping_stone,
)
from .mcmc import (
    PosteriorSamples,
    SamplerConfig,
    SamplerDiagnosticError,
    effective_sample_size,
    rhat,
    sample,
)
from .model import (
    DownweightPlan,
    ModelSpec,
    ParameterState,
    PriorConfig,
    RandomEffectsCovariance,
    linear_predictor,
    log_likelihood,
    log_posterior_unnorm,
    log_prior,
    theta_contrast,
)
from .simulate import GeneratedNetwork, SimScenario, generate, scenario, scenario_grid

__version__ = "0.1.0"

__all__ = [
    "Arm", "ConnectivityResult", "DatasetError", "DisconnectedNetworkError",
    "NetworkDataset", "ObservedProportions", "Study", "connectivity_check",
    "load_dataset", "observed_proportions", "write_dataset",
    "DegenerateProportionPool", "DetectionReport", "DetectionRow",
    "DetectionThresholds", "Discrepancy", "PPPValue", "ReplicateDataset",
    "detect", "f_gelman_chi2", "f_likelihood", "f_sdo", "ppp_value",
    "replicate", "replicate_events",
    "ComparisonSummary", "ContrastBias", "Estimate", "downweighted_fit",
    "exclusion_fit", "relative_bias", "standard_fit", "summarize",
    "BayesFactor", "EvidenceClass", "SteppingStoneResult", "bayes_factor",
    "bayes_factor_savage_dickey", "bayes_factor_stepping_stone",
    "classify_bayes_factor", "log_marginal_stepping_stone",
    "PosteriorSamples", "SamplerConfig", "SamplerDiagnosticError",
    "effective_sample_size", "rhat", "sample",
    "DownweightPlan", "ModelSpec", "ParameterState", "PriorConfig",
    "RandomEffectsCovariance", "linear_predictor", "log_likelihood",
    "log_posterior_unnorm", "log_prior", "theta_contrast",
    "GeneratedNetwork", "SimScenario", "generate", "scenario", "scenario_grid",
    "__version__",
]
