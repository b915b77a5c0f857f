"""Marginal event rates and rate ratios for count data in randomized trials.

The package pairs an empirical, model-light estimator (least squares on an
exposure-scaled transform of the event counts, with optional covariate
adjustment) with a negative binomial regression comparator, plus
meta-analytic pooling, synthetic trial generators, and a Monte Carlo
harness.
"""

__version__ = "0.1.0"

from . import errors
from .domain import (
    Dataset,
    LogRateEstimate,
    RateEstimate,
    RateRatioResult,
    SubjectRecord,
    validate_dataset,
)
from .empirical import (
    InferenceConfig,
    WVector,
    aggregated_rates,
    estimate_rates,
    log_rates,
    naive_subject_rate,
    rate_ratio,
    transform_w,
)
from .harness import (
    DEFAULT_METHODS,
    MethodSpec,
    MethodSummary,
    SimulationSummary,
    run_replicate,
    run_study,
)
from .linmod import DesignMatrix, OLSFit, fit_ols, hc_covariance
from .meta import StratumResult, pool_log, pool_natural
from .nbglm import (
    MarginalRates,
    NBFit,
    fit_nb,
    marginal_log_rates,
    marginal_rates_aipw,
    marginal_rates_gcomp,
    nb_loglik,
    nb_rate_ratio,
    nb_score,
    robust_covariance,
)
from .simgen import (
    ExposureMixture,
    RngStream,
    ScenarioSpec,
    calibrate_latent_correlation,
    gen_correlated_nb,
    gen_exposure,
    gen_nb_dataset,
    gen_zinb_dataset,
    nb_quantile,
    scenario,
)

__all__ = [
    "errors",
    "Dataset",
    "DesignMatrix",
    "DEFAULT_METHODS",
    "ExposureMixture",
    "InferenceConfig",
    "LogRateEstimate",
    "MarginalRates",
    "MethodSpec",
    "MethodSummary",
    "NBFit",
    "OLSFit",
    "RateEstimate",
    "RateRatioResult",
    "RngStream",
    "ScenarioSpec",
    "SimulationSummary",
    "StratumResult",
    "SubjectRecord",
    "WVector",
    "aggregated_rates",
    "calibrate_latent_correlation",
    "estimate_rates",
    "fit_nb",
    "fit_ols",
    "gen_correlated_nb",
    "gen_exposure",
    "gen_nb_dataset",
    "gen_zinb_dataset",
    "hc_covariance",
    "log_rates",
    "marginal_log_rates",
    "marginal_rates_aipw",
    "marginal_rates_gcomp",
    "naive_subject_rate",
    "nb_loglik",
    "nb_quantile",
    "nb_rate_ratio",
    "nb_score",
    "pool_log",
    "pool_natural",
    "rate_ratio",
    "robust_covariance",
    "run_replicate",
    "run_study",
    "scenario",
    "transform_w",
    "validate_dataset",
]
