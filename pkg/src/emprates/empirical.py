"""Empirical marginal rate estimation via the exposure-scaled transform.

The subject-level transform W_ij = Y_ij / dbar_i (event count over the arm
mean exposure) has arm means identical to the aggregated rates
Y_i. / d_i., so least squares on W with treatment indicators reproduces
the aggregated estimator exactly while opening the door to covariate
adjustment:

* ``none``      - treatment indicators only (cell means),
* ``ancova``    - adds centered covariates with common slopes,
* ``anhecova``  - adds arm-by-centered-covariate interactions, and, when
  stratification columns are declared, subtracts the between-stratum
  variance component attributable to stratified treatment assignment.

Rate ratios are formed on the log scale with delta-method standard errors.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import stats

from .domain import Dataset, LogRateEstimate, RateEstimate, RateRatioResult
from .errors import (
    DegenerateVarianceError,
    NonPositiveRateError,
    UsageError,
    ZeroEventsArmError,
)
from .linmod import DesignMatrix, fit_ols, hc_covariance

_ADJUSTMENTS = ("none", "ancova", "anhecova")
_ALTERNATIVES = ("two-sided", "less", "greater")


@dataclass(frozen=True)
class InferenceConfig:
    """Knobs for the empirical estimator.

    ``hc_flavor`` of None picks HC3 when any arm has fewer than
    ``small_arm_threshold`` subjects and HC1 otherwise.  Nonempty
    ``stratification_columns`` asserts that treatment was randomized within
    the dataset's stratum labels, which triggers the anhecova variance
    correction.
    """

    alpha: float = 0.05
    adjustment: str = "none"
    hc_flavor: str | None = None
    stratification_columns: tuple[str, ...] = ()
    small_arm_threshold: int = 250

    def __post_init__(self) -> None:
        if not (0 < self.alpha < 1):
            raise UsageError(f"alpha must lie in (0, 1), got {self.alpha}")
        if self.adjustment not in _ADJUSTMENTS:
            raise UsageError(
                f"adjustment must be one of {_ADJUSTMENTS}, got "
                f"{self.adjustment!r}"
            )
        if self.hc_flavor is not None:
            flavor = self.hc_flavor.upper()
            if flavor not in ("HC0", "HC1", "HC3"):
                raise UsageError(f"unknown HC flavor {self.hc_flavor!r}")
            object.__setattr__(self, "hc_flavor", flavor)
        object.__setattr__(
            self,
            "stratification_columns",
            tuple(self.stratification_columns),
        )

    def resolve_hc_flavor(self, data: Dataset) -> str:
        if self.hc_flavor is not None:
            return self.hc_flavor
        if int(data.n_per_arm.min()) < self.small_arm_threshold:
            return "HC3"
        return "HC1"


@dataclass(frozen=True, eq=False)
class WVector:
    """The transformed outcome and the arm mean exposures that scale it."""

    values: np.ndarray
    arm_mean_exposure: np.ndarray


def transform_w(data: Dataset) -> WVector:
    """W_ij = Y_ij / dbar_i where dbar_i is the arm mean exposure."""
    dbar = data.mean_exposure_per_arm
    values = data.count / dbar[data.arm]
    return WVector(values=values, arm_mean_exposure=dbar)


def aggregated_rates(data: Dataset) -> RateEstimate:
    """Unadjusted rates Y_i. / d_i. with within-arm sample variances.

    The covariance is diagonal: Var(W)_i / n_i per arm, with the n-1
    denominator.
    """
    w = transform_w(data).values
    rates = data.events_per_arm / data.exposure_per_arm
    var = np.empty(data.arm_count)
    for a in range(data.arm_count):
        var[a] = np.var(w[data.arm == a], ddof=1) / data.n_per_arm[a]
    zero = tuple(int(a) for a in np.flatnonzero(rates <= 0.0))
    return RateEstimate(
        rates=rates, cov=np.diag(var), method_tag="aggregated", zero_arms=zero
    )


def _centered_covariates(data: Dataset) -> np.ndarray:
    x = data.covariates
    return x - x.mean(axis=0)


def _build_design(data: Dataset, adjustment: str) -> DesignMatrix:
    n, k = data.n, data.arm_count
    arm_block = np.zeros((n, k))
    arm_block[np.arange(n), data.arm] = 1.0
    names = [f"arm_{a}" for a in range(k)]
    blocks = [arm_block]
    if adjustment in ("ancova", "anhecova") and data.n_covariates:
        centered = _centered_covariates(data)
        if adjustment == "ancova":
            blocks.append(centered)
            names.extend(data.covariate_names)
        else:
            for a in range(k):
                blocks.append(centered * arm_block[:, a : a + 1])
                names.extend(f"arm_{a}:{c}" for c in data.covariate_names)
    return DesignMatrix(np.hstack(blocks), tuple(names))


def _stratified_correction(
    data: Dataset, residuals: np.ndarray
) -> np.ndarray:
    """Between-stratum covariance component removed under stratified
    randomization.

    With stratum shares p_s, arm shares pi_a, and mean residuals
    ebar_a(s) per (arm, stratum) cell, the component is

        Omega[a, b] = sum_s p_s (delta_ab / pi_a - 1) ebar_a(s) ebar_b(s)

    and the corrected covariance is the sandwich arm block minus Omega / n.
    """
    if data.strata is None:
        raise UsageError(
            "stratification columns declared but the dataset has no stratum "
            "labels"
        )
    n, k = data.n, data.arm_count
    labels = np.asarray(data.strata)
    uniq, stratum_ix = np.unique(labels, return_inverse=True)
    s_count = uniq.shape[0]
    p_s = np.bincount(stratum_ix, minlength=s_count) / n
    pi_a = data.n_per_arm / n
    ebar = np.zeros((k, s_count))
    for a in range(k):
        mask = data.arm == a
        cells = np.bincount(stratum_ix[mask], minlength=s_count)
        sums = np.bincount(
            stratum_ix[mask], weights=residuals[mask], minlength=s_count
        )
        nonzero = cells > 0
        ebar[a, nonzero] = sums[nonzero] / cells[nonzero]
    omega = np.zeros((k, k))
    for a in range(k):
        for b in range(k):
            coeff = (1.0 / pi_a[a] if a == b else 0.0) - 1.0
            omega[a, b] = np.sum(p_s * coeff * ebar[a] * ebar[b])
    return omega / n


def _clip_psd(cov: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh(0.5 * (cov + cov.T))
    if vals.min() >= 0.0:
        return 0.5 * (cov + cov.T)
    vals = np.clip(vals, 0.0, None)
    return (vecs * vals) @ vecs.T


def estimate_rates(data: Dataset, config: InferenceConfig) -> RateEstimate:
    """Model-assisted marginal rates via least squares on W.

    The arm coefficients of the cell-means design are the marginal rate
    estimates; their joint covariance is the arm block of the HC sandwich.
    Unadjusted estimates coincide with :func:`aggregated_rates` exactly.

    ``anhecova`` requires stratum labels on the dataset; without them the
    fit falls back to ``ancova``.  When labels are present the variance
    subtracts the between-stratum component attributable to stratified
    treatment assignment.
    """
    if config.stratification_columns and data.strata is None:
        raise UsageError(
            "stratification columns declared but the dataset has no stratum "
            "labels"
        )
    adjustment = config.adjustment
    if adjustment == "anhecova" and data.strata is None:
        adjustment = "ancova"
    w = transform_w(data).values
    design = _build_design(data, adjustment)
    fit = fit_ols(design, w)
    k = data.arm_count
    cov = hc_covariance(fit, config.resolve_hc_flavor(data))[:k, :k]
    tag = adjustment if adjustment != "none" else "aggregated"
    if adjustment == "anhecova":
        cov = _clip_psd(cov - _stratified_correction(data, fit.residuals))
    rates = fit.coef[:k]
    zero = tuple(int(a) for a in np.flatnonzero(rates <= 0.0))
    return RateEstimate(rates=rates, cov=cov, method_tag=tag, zero_arms=zero)


def log_rates(estimate: RateEstimate) -> LogRateEstimate:
    """Delta-method transfer of rates and covariance to the log scale.

    Arms whose rate is exactly zero (no observed events) raise
    :class:`ZeroEventsArmError`; negative model-assisted rates raise the
    broader :class:`NonPositiveRateError`.
    """
    bad = estimate.zero_arms or tuple(
        int(a) for a in np.flatnonzero(estimate.rates <= 0.0)
    )
    if bad:
        message = (
            f"cannot take log rates; non-positive rate in arm(s) "
            f"{', '.join(str(a) for a in bad)}"
        )
        if all(estimate.rates[a] == 0.0 for a in bad):
            raise ZeroEventsArmError(message, arms=tuple(bad))
        raise NonPositiveRateError(message, arms=tuple(bad))
    jac = 1.0 / estimate.rates
    return LogRateEstimate(
        theta=np.log(estimate.rates),
        cov=estimate.cov * np.outer(jac, jac),
        method_tag=estimate.method_tag,
    )


def rate_ratio(
    log_estimate: LogRateEstimate,
    numerator_arm: int,
    denominator_arm: int,
    alpha: float = 0.05,
    alternative: str = "two-sided",
) -> RateRatioResult:
    """Wald inference for lambda = r_i / r_k on the log scale.

    ``alternative`` selects the p-value sidedness: "two-sided" (default),
    "greater" (H1: lambda > 1), or "less" (H1: lambda < 1).  The reported
    interval is always the central two-sided CI at level ``alpha``.
    """
    theta, cov = log_estimate.theta, log_estimate.cov
    i, k = numerator_arm, denominator_arm
    if i == k:
        raise ValueError("numerator and denominator arms must differ")
    if not (0 <= i < theta.shape[0] and 0 <= k < theta.shape[0]):
        raise ValueError(f"arm out of range: ({i}, {k})")
    if not (0 < alpha < 1):
        raise ValueError(f"alpha must lie in (0, 1), got {alpha}")
    if alternative not in _ALTERNATIVES:
        raise ValueError(
            f"alternative must be one of {_ALTERNATIVES}, got {alternative!r}"
        )
    var = cov[i, i] + cov[k, k] - 2.0 * cov[i, k]
    if not np.isfinite(var) or var <= 0.0:
        raise DegenerateVarianceError(
            f"contrast variance for arms ({i}, {k}) is {var!r}"
        )
    se = float(np.sqrt(var))
    delta = float(theta[i] - theta[k])
    z = delta / se
    if alternative == "two-sided":
        p = 2.0 * float(stats.norm.sf(abs(z)))
    elif alternative == "greater":
        p = float(stats.norm.sf(z))
    else:
        p = float(stats.norm.cdf(z))
    zcrit = float(stats.norm.ppf(1.0 - alpha / 2.0))
    return RateRatioResult(
        numerator_arm=i,
        denominator_arm=k,
        lambda_hat=float(np.exp(delta)),
        se_log=se,
        z=z,
        p=p,
        ci_low=float(np.exp(delta - zcrit * se)),
        ci_high=float(np.exp(delta + zcrit * se)),
        alpha=alpha,
        method_tag=log_estimate.method_tag,
    )


@dataclass(frozen=True, eq=False)
class NaiveSubjectRates:
    """Arm means of the per-subject ratios Y_ij / d_ij.

    This estimates E[Y/d], not the marginal rate E[Y]/E[d]; the two differ
    whenever exposure varies.  ``recommended`` is always False.
    """

    rates: np.ndarray
    recommended: bool = False


def naive_subject_rate(data: Dataset) -> NaiveSubjectRates:
    ratio = data.count / data.exposure
    rates = np.array(
        [ratio[data.arm == a].mean() for a in range(data.arm_count)]
    )
    return NaiveSubjectRates(rates=rates)
