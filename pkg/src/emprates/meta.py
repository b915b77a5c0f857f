"""Fixed-weight pooling of per-stratum rate ratios.

Two scales are supported.  Natural-scale pooling averages the lambda_s
with the supplied weights and moves to the log scale only for the
confidence interval; log-scale pooling averages log lambda_s directly.
Weights are taken as given (e.g. stratum sizes or inverse variances) and
are normalized internally.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import math

from scipy import stats

from .domain import RateRatioResult
from .errors import EmptyInputError, NonPositiveLambdaError


@dataclass(frozen=True)
class StratumResult:
    """One stratum's rate ratio, its variance, and a pooling weight.

    ``var_log_lambda`` may be supplied directly; otherwise it is derived
    from ``var_lambda`` by the delta method when log-scale pooling needs it.
    """

    stratum: str
    lambda_hat: float
    var_lambda: float
    weight: float
    var_log_lambda: float | None = None

    def __post_init__(self) -> None:
        if not math.isfinite(self.lambda_hat):
            raise ValueError(f"stratum {self.stratum!r}: non-finite lambda")
        if not (self.weight > 0 and math.isfinite(self.weight)):
            raise ValueError(
                f"stratum {self.stratum!r}: weight must be positive, got "
                f"{self.weight!r}"
            )
        if self.var_lambda < 0 or not math.isfinite(self.var_lambda):
            raise ValueError(
                f"stratum {self.stratum!r}: variance must be nonnegative"
            )

    def log_scale(self) -> tuple[float, float]:
        if self.lambda_hat <= 0.0:
            raise NonPositiveLambdaError(
                f"stratum {self.stratum!r}: lambda {self.lambda_hat!r} has "
                "no logarithm"
            )
        var_log = (
            self.var_log_lambda
            if self.var_log_lambda is not None
            else self.var_lambda / self.lambda_hat**2
        )
        return math.log(self.lambda_hat), var_log


def _check_nonempty(results: Sequence[StratumResult]) -> None:
    if len(results) == 0:
        raise EmptyInputError("no stratum results to pool")


def _wald(
    lam: float,
    se_log: float,
    alpha: float,
    tag: str,
    numerator_arm: int,
    denominator_arm: int,
) -> RateRatioResult:
    theta = math.log(lam)
    z = theta / se_log
    zcrit = float(stats.norm.ppf(1.0 - alpha / 2.0))
    return RateRatioResult(
        numerator_arm=numerator_arm,
        denominator_arm=denominator_arm,
        lambda_hat=lam,
        se_log=se_log,
        z=z,
        p=2.0 * float(stats.norm.sf(abs(z))),
        ci_low=math.exp(theta - zcrit * se_log),
        ci_high=math.exp(theta + zcrit * se_log),
        alpha=alpha,
        method_tag=tag,
    )


def pool_natural(
    results: Sequence[StratumResult],
    alpha: float = 0.05,
    numerator_arm: int = 1,
    denominator_arm: int = 0,
) -> RateRatioResult:
    """Weighted mean of lambda_s with variance sum w_s^2 Var_s / (sum w_s)^2.

    The confidence interval and test move to the log scale by the delta
    method, so the pooled lambda must be strictly positive.
    """
    _check_nonempty(results)
    total_w = sum(r.weight for r in results)
    lam = sum(r.weight * r.lambda_hat for r in results) / total_w
    var = sum(r.weight**2 * r.var_lambda for r in results) / total_w**2
    if lam <= 0.0:
        raise NonPositiveLambdaError(
            f"pooled rate ratio {lam!r} is not positive"
        )
    se_log = math.sqrt(var) / lam
    if se_log <= 0.0:
        raise NonPositiveLambdaError("pooled variance is zero")
    return _wald(lam, se_log, alpha, "pooled_natural",
                 numerator_arm, denominator_arm)


def pool_log(
    results: Sequence[StratumResult],
    alpha: float = 0.05,
    numerator_arm: int = 1,
    denominator_arm: int = 0,
) -> RateRatioResult:
    """Weighted mean of log lambda_s; every stratum lambda must be positive."""
    _check_nonempty(results)
    total_w = sum(r.weight for r in results)
    pairs = [r.log_scale() for r in results]
    theta = sum(r.weight * t for r, (t, _) in zip(results, pairs)) / total_w
    var = (
        sum(r.weight**2 * v for r, (_, v) in zip(results, pairs)) / total_w**2
    )
    if var <= 0.0:
        raise NonPositiveLambdaError("pooled log-scale variance is zero")
    return _wald(math.exp(theta), math.sqrt(var), alpha, "pooled_log",
                 numerator_arm, denominator_arm)
