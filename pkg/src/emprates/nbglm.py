"""Negative binomial (NB2) regression with robust marginal inference.

The model is log mu_j = x_j' beta + log d_j with Var(Y_j) = mu_j + k mu_j^2.
Fitting alternates iteratively reweighted least squares for beta with a
safeguarded root search for the dispersion k, and never raises on hard
data: boundary dispersion (k -> 0, the Poisson limit) and non-convergence
are reported as flags with diagnostics.

Coefficient covariances come in three flavors: the inverse observed
information (``model_cov``), the robust sandwich A^-1 B A^-1
(``sandwich_cov``), and the sandwich rescaled by the Pearson dispersion
statistic (``pearson_scaled_cov``, the default for inference).  Marginal
rates on the data's own covariate distribution are available by
G-computation and by an augmented inverse-probability-weighted (AIPW)
estimator.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from scipy import optimize, special, stats

from collections.abc import Sequence

from .domain import Dataset, LogRateEstimate, RateEstimate, RateRatioResult
from .errors import (
    DegenerateVarianceError,
    EmptyArmError,
    SingularInformationError,
    UsageError,
)

_ETA_CAP = 50.0
_BETA_BOUND = 30.0
_K_TINY = 1e-12


def _covariate_indices(
    data: Dataset, covariates: Sequence[str] | None
) -> tuple[int, ...]:
    if covariates is None:
        return tuple(range(data.n_covariates))
    lookup = {name: j for j, name in enumerate(data.covariate_names)}
    missing = [name for name in covariates if name not in lookup]
    if missing:
        raise UsageError(
            f"unknown covariate(s) {', '.join(missing)}; dataset has "
            f"{', '.join(data.covariate_names) or 'none'}"
        )
    return tuple(lookup[name] for name in covariates)


def _build_design(
    data: Dataset, adjusted: bool, indices: tuple[int, ...]
) -> tuple[np.ndarray, tuple[str, ...], np.ndarray]:
    n, k = data.n, data.arm_count
    arm_block = np.zeros((n, k))
    arm_block[np.arange(n), data.arm] = 1.0
    names = [f"arm_{a}" for a in range(k)]
    if adjusted and indices:
        x = data.covariates[:, indices]
        center = x.mean(axis=0)
        names.extend(data.covariate_names[j] for j in indices)
        return np.hstack([arm_block, x - center]), tuple(names), center
    return arm_block, tuple(names), np.empty(0)


def _mu(x: np.ndarray, offset: np.ndarray, beta: np.ndarray) -> np.ndarray:
    eta = np.clip(x @ beta + offset, -_ETA_CAP, _ETA_CAP)
    return np.exp(eta)


def nb_loglik(
    beta: np.ndarray,
    k: float,
    design: np.ndarray,
    response: np.ndarray,
    offset: np.ndarray,
) -> float:
    """NB2 log likelihood; k = 0 gives the exact Poisson limit."""
    y = response
    mu = _mu(design, offset, beta)
    if k <= _K_TINY:
        return float(np.sum(y * np.log(mu) - mu - special.gammaln(y + 1.0)))
    a = 1.0 / k
    return float(
        np.sum(
            special.gammaln(y + a)
            - special.gammaln(a)
            - special.gammaln(y + 1.0)
            + y * np.log(k * mu)
            - (y + a) * np.log1p(k * mu)
        )
    )


def _score_parts(
    beta: np.ndarray,
    k: float,
    design: np.ndarray,
    response: np.ndarray,
    offset: np.ndarray,
) -> tuple[np.ndarray, float, np.ndarray]:
    y = response
    mu = _mu(design, offset, beta)
    if k <= _K_TINY:
        beta_score = design.T @ (y - mu)
        k_score = 0.5 * float(np.sum((y - mu) ** 2 - y))
        return beta_score, k_score, mu
    a = 1.0 / k
    resid = (y - mu) / (1.0 + k * mu)
    beta_score = design.T @ resid
    k_score = float(
        np.sum(
            a * a * (special.digamma(a) - special.digamma(y + a)
                     + np.log1p(k * mu))
            + resid / k
        )
    )
    return beta_score, k_score, mu


def nb_score(
    beta: np.ndarray,
    k: float,
    design: np.ndarray,
    response: np.ndarray,
    offset: np.ndarray,
) -> np.ndarray:
    """Gradient of the log likelihood in (beta, k), k entry last."""
    beta_score, k_score, _ = _score_parts(beta, k, design, response, offset)
    return np.append(beta_score, k_score)


@dataclass(frozen=True, eq=False)
class NBFit:
    """A fitted NB2 model.

    ``converged`` is False when the optimizer hit its iteration cap or a
    parameter bound; ``boundary_dispersion`` marks the Poisson boundary
    k = 0.  ``diagnostics`` carries the final gradient norm, the condition
    number of the observed information, and the optimizer path length.
    """

    data: Dataset = field(repr=False)
    design: np.ndarray = field(repr=False)
    column_names: tuple[str, ...]
    response: np.ndarray = field(repr=False)
    offset: np.ndarray = field(repr=False)
    adjusted: bool
    covariate_indices: tuple[int, ...]
    covariate_center: np.ndarray = field(repr=False)
    beta: np.ndarray
    k: float
    mu: np.ndarray = field(repr=False)
    loglik: float
    converged: bool
    boundary_dispersion: bool
    iterations: int
    diagnostics: dict

    @property
    def arm_columns(self) -> int:
        return self.data.arm_count

    @cached_property
    def _observed_information(self) -> np.ndarray:
        w = (
            self.mu
            * (1.0 + self.k * self.response)
            / (1.0 + self.k * self.mu) ** 2
        )
        return (self.design * w[:, None]).T @ self.design

    @cached_property
    def model_cov(self) -> np.ndarray:
        """Inverse observed information for beta at (beta, k)."""
        return _invert_information(self._observed_information)

    @cached_property
    def sandwich_cov(self) -> np.ndarray:
        """A^-1 B A^-1 with per-subject score outer products as B."""
        u = (self.response - self.mu) / (1.0 + self.k * self.mu)
        meat = (self.design * (u * u)[:, None]).T @ self.design
        a_inv = self.model_cov
        cov = a_inv @ meat @ a_inv
        return 0.5 * (cov + cov.T)

    @cached_property
    def pearson_dispersion(self) -> float:
        """Pearson chi-square over residual degrees of freedom."""
        n, p = self.design.shape
        chi2 = float(
            np.sum(
                (self.response - self.mu) ** 2
                / (self.mu * (1.0 + self.k * self.mu))
            )
        )
        return chi2 / (n - p)

    @cached_property
    def pearson_scaled_cov(self) -> np.ndarray:
        """Sandwich covariance rescaled by the Pearson dispersion."""
        return self.sandwich_cov * self.pearson_dispersion


def _invert_information(info: np.ndarray) -> np.ndarray:
    scale = float(np.abs(info).max())
    if not np.isfinite(scale) or scale == 0.0:
        raise SingularInformationError("observed information is degenerate")
    cond = np.linalg.cond(info)
    if not np.isfinite(cond) or cond > 1e12:
        raise SingularInformationError(
            f"observed information is numerically singular "
            f"(condition number {cond:.3e})"
        )
    inv = np.linalg.inv(info)
    return 0.5 * (inv + inv.T)


def robust_covariance(
    fit: NBFit, base: str = "sandwich", pearson_scale: bool = True
) -> np.ndarray:
    """Coefficient covariance used for Wald inference.

    The default rescales the sandwich by the Pearson dispersion; set
    ``base="model"`` to rescale the inverse information instead, or
    ``pearson_scale=False`` for the unscaled matrices.
    """
    if base == "sandwich":
        cov = fit.sandwich_cov
    elif base == "model":
        cov = fit.model_cov
    else:
        raise ValueError(f"base must be 'sandwich' or 'model', got {base!r}")
    return cov * fit.pearson_dispersion if pearson_scale else cov


def _irls(
    design: np.ndarray,
    response: np.ndarray,
    offset: np.ndarray,
    beta: np.ndarray,
    k: float,
    tol: float = 1e-11,
    max_iter: int = 100,
) -> tuple[np.ndarray, int, float]:
    """Fisher scoring for beta at fixed k, with step halving."""
    y = response
    ll = nb_loglik(beta, k, design, response, offset)
    path = 0.0
    for it in range(1, max_iter + 1):
        mu = _mu(design, offset, beta)
        w = mu / (1.0 + k * mu)
        z = (design @ beta) + (y - mu) / mu
        xw = design * w[:, None]
        gram = xw.T @ design
        rhs = xw.T @ z
        try:
            new_beta = np.linalg.solve(gram, rhs)
        except np.linalg.LinAlgError:
            return beta, it, path
        step = new_beta - beta
        scale = 1.0
        for _ in range(40):
            cand = beta + scale * step
            cand_ll = nb_loglik(cand, k, design, response, offset)
            if cand_ll >= ll - 1e-13:
                break
            scale *= 0.5
        else:
            return beta, it, path
        path += float(np.abs(scale * step).max())
        beta = beta + scale * step
        ll = cand_ll
        if float(np.abs(scale * step).max()) < tol:
            break
    return beta, it, path


def _dispersion_root(
    design: np.ndarray,
    response: np.ndarray,
    offset: np.ndarray,
    beta: np.ndarray,
    k_start: float,
) -> float:
    """Maximize the profile likelihood in k at fixed beta.

    The score dl/dk is decreasing from the k -> 0 limit in typical data;
    a nonpositive limit means the boundary k = 0 is the maximizer.
    """

    def g(k: float) -> float:
        return _score_parts(beta, k, design, response, offset)[1]

    if g(0.0) <= 0.0:
        return 0.0
    lo = max(k_start / 8.0, 1e-10)
    while g(lo) <= 0.0 and lo > 1e-14:
        lo /= 8.0
    if g(lo) <= 0.0:
        return 0.0
    hi = max(k_start * 2.0, 2e-10)
    for _ in range(80):
        if g(hi) < 0.0:
            break
        hi *= 2.0
    else:
        return hi
    return float(optimize.brentq(g, lo, hi, xtol=1e-13, rtol=1e-14))


def fit_nb(
    data: Dataset,
    adjusted: bool = False,
    covariates: Sequence[str] | None = None,
    max_iter: int = 200,
    tol_loglik: float = 1e-10,
    tol_score: float = 1e-6,
    fix_dispersion: float | None = None,
) -> NBFit:
    """Maximum likelihood NB2 fit with log exposure offset.

    The design holds one indicator per arm (cell means) plus, when
    ``adjusted``, the grand-mean-centered covariates with common slopes.
    ``covariates`` selects a subset by name (default: all).
    ``fix_dispersion`` pins k instead of profiling it; 0 gives a Poisson
    fit.  Never raises on difficult data: inspect ``converged`` and
    ``boundary_dispersion``.
    """
    if fix_dispersion is not None and fix_dispersion < 0.0:
        raise UsageError("fix_dispersion must be nonnegative")
    indices = _covariate_indices(data, covariates)
    design, names, center = _build_design(data, adjusted, indices)
    y = data.count.astype(float)
    offset = np.log(data.exposure)
    n, p = design.shape

    events = data.events_per_arm
    beta = np.zeros(p)
    beta[: data.arm_count] = np.log(
        np.maximum(events, 0.5) / data.exposure_per_arm
    )
    beta, _, path = _irls(design, y, offset, beta, 0.0)
    if fix_dispersion is None:
        mu = _mu(design, offset, beta)
        mom = float(np.sum((y - mu) ** 2 - mu) / np.sum(mu**2))
        k = max(mom, 0.0)
    else:
        k = float(fix_dispersion)

    ll = nb_loglik(beta, k, design, y, offset)
    boundary = k == 0.0
    converged = False
    iterations = 0
    for iterations in range(1, max_iter + 1):
        if fix_dispersion is None:
            k_new = _dispersion_root(design, y, offset, beta, max(k, 1e-4))
        else:
            k_new = k
        beta_new, _, step_path = _irls(design, y, offset, beta, k_new)
        path += step_path + abs(k_new - k)
        beta, k = beta_new, k_new
        boundary = k == 0.0
        new_ll = nb_loglik(beta, k, design, y, offset)
        score = nb_score(beta, k, design, y, offset)
        score_norm = float(np.abs(score).max())
        if boundary or fix_dispersion is not None:
            # k is pinned or at the boundary; judge convergence on beta only
            score_norm = float(np.abs(score[:-1]).max()) if p else 0.0
        delta_ll = abs(new_ll - ll)
        ll = new_ll
        # gradient entries scale with n, so gate the score relative to the
        # log-likelihood magnitude (floored at 1 for tiny datasets)
        if delta_ll < tol_loglik and score_norm < tol_score * max(1.0, abs(ll)):
            converged = True
            break
    mu = _mu(design, offset, beta)
    if float(np.abs(beta).max()) > _BETA_BOUND:
        converged = False

    score = nb_score(beta, k, design, y, offset)
    info = (
        design * (mu * (1.0 + k * y) / (1.0 + k * mu) ** 2)[:, None]
    ).T @ design
    with np.errstate(all="ignore"):
        cond = float(np.linalg.cond(info))
    return NBFit(
        data=data,
        design=design,
        column_names=names,
        response=y,
        offset=offset,
        adjusted=adjusted,
        covariate_indices=indices if adjusted else (),
        covariate_center=center,
        beta=beta,
        k=float(k),
        mu=mu,
        loglik=ll,
        converged=converged,
        boundary_dispersion=boundary,
        iterations=iterations,
        diagnostics={
            "gradient_norm": float(np.abs(score).max()),
            "condition_number": cond,
            "path_length": float(path),
        },
    )


@dataclass(frozen=True, eq=False)
class MarginalRates:
    """Model-based marginal rates standardized to the sample."""

    rates: np.ndarray
    cov: np.ndarray
    kind: str

    def to_rate_estimate(self) -> RateEstimate:
        zero = tuple(int(a) for a in np.flatnonzero(self.rates <= 0.0))
        return RateEstimate(
            rates=self.rates,
            cov=self.cov,
            method_tag=f"nb_{self.kind}",
            zero_arms=zero,
        )


def _counterfactual_means(
    fit: NBFit, data: Dataset | None
) -> tuple[np.ndarray, np.ndarray, Dataset]:
    """Predicted counts d_j exp(x_j(a)' beta) for every subject and arm.

    ``data`` defaults to the fitted dataset; an external dataset is scored
    with the fit's own covariate centering.  Returns (yhat, xrest, data)
    with yhat[a, j] and the covariate part of the design rows.
    """
    k_arms = fit.arm_columns
    if data is None or data is fit.data:
        data = fit.data
        xrest = fit.design[:, k_arms:]
        offset = fit.offset
    else:
        if data.arm_count != fit.data.arm_count:
            raise UsageError("arm counts of fit and data disagree")
        if fit.covariate_indices:
            lookup = {name: j for j, name in enumerate(data.covariate_names)}
            fitted = [fit.data.covariate_names[j] for j in fit.covariate_indices]
            missing = [name for name in fitted if name not in lookup]
            if missing:
                raise UsageError(
                    f"dataset lacks fitted covariate(s) {', '.join(missing)}"
                )
            cols = [lookup[name] for name in fitted]
            xrest = data.covariates[:, cols] - fit.covariate_center
        else:
            xrest = np.empty((data.n, 0))
        offset = np.log(data.exposure)
    rest_eta = xrest @ fit.beta[k_arms:] + offset
    yhat = np.exp(
        np.clip(fit.beta[:k_arms, None] + rest_eta[None, :], -_ETA_CAP, _ETA_CAP)
    )
    return yhat, xrest, data


def marginal_rates_gcomp(fit: NBFit, data: Dataset | None = None) -> MarginalRates:
    """G-computation: average each subject's predicted count under every
    arm, divide by total exposure, with delta-method covariance."""
    yhat, xrest, data = _counterfactual_means(fit, data)
    total_d = float(data.exposure.sum())
    rates = yhat.sum(axis=1) / total_d
    k_arms = fit.arm_columns
    p = fit.design.shape[1]
    grad = np.zeros((k_arms, p))
    for a in range(k_arms):
        grad[a, a] = rates[a]
        if p > k_arms:
            grad[a, k_arms:] = (yhat[a][:, None] * xrest).sum(axis=0) / total_d
    cov = grad @ fit.pearson_scaled_cov @ grad.T
    return MarginalRates(rates=rates, cov=0.5 * (cov + cov.T), kind="gcomp")


def marginal_rates_aipw(fit: NBFit, data: Dataset | None = None) -> MarginalRates:
    """AIPW rates: G-computation plus inverse-probability-weighted
    residual corrections, with influence-function covariance."""
    yhat, _, data = _counterfactual_means(fit, data)
    if np.any(data.n_per_arm == 0):
        raise EmptyArmError("marginalization requires subjects in every arm")
    total_d = float(data.exposure.sum())
    pi = data.n_per_arm / data.n
    h = yhat.copy()
    resid = data.count - yhat[data.arm, np.arange(data.n)]
    for a in range(fit.arm_columns):
        mask = data.arm == a
        h[a, mask] += resid[mask] / pi[a]
    rates = h.sum(axis=1) / total_d
    psi = h - np.outer(rates, data.exposure)
    cov = (psi @ psi.T) / total_d**2
    return MarginalRates(rates=rates, cov=0.5 * (cov + cov.T), kind="aipw")


def nb_rate_ratio(
    source: NBFit | MarginalRates,
    numerator_arm: int,
    denominator_arm: int,
    alpha: float = 0.05,
    covariance: str = "pearson",
    alternative: str = "two-sided",
) -> RateRatioResult:
    """Wald rate-ratio inference from an NB fit or its marginal rates.

    For a fitted cell-means model the ratio is exp(beta_i - beta_k) with a
    coefficient-contrast variance; with shared covariate slopes this equals
    the G-computation ratio exactly.  ``covariance`` picks pearson,
    sandwich, or model for the fit-based route.  An arm against itself is
    the degenerate identity ratio: lambda = 1, p = 1.
    """
    i, k = numerator_arm, denominator_arm
    if i == k:
        tag = (
            f"nb_{source.kind}" if isinstance(source, MarginalRates)
            else "nb_gcomp"
        )
        return RateRatioResult(
            numerator_arm=i,
            denominator_arm=k,
            lambda_hat=1.0,
            se_log=0.0,
            z=0.0,
            p=1.0,
            ci_low=1.0,
            ci_high=1.0,
            alpha=alpha,
            method_tag=tag,
        )
    if isinstance(source, MarginalRates):
        from .empirical import log_rates, rate_ratio

        return rate_ratio(
            log_rates(source.to_rate_estimate()), i, k, alpha, alternative
        )
    fit = source
    if not (0 <= i < fit.arm_columns and 0 <= k < fit.arm_columns):
        raise ValueError(f"arm out of range: ({i}, {k})")
    if covariance == "pearson":
        cov = fit.pearson_scaled_cov
    elif covariance == "sandwich":
        cov = fit.sandwich_cov
    elif covariance == "model":
        cov = fit.model_cov
    else:
        raise ValueError(f"unknown covariance kind {covariance!r}")
    var = cov[i, i] + cov[k, k] - 2.0 * cov[i, k]
    if not np.isfinite(var) or var <= 0.0:
        raise DegenerateVarianceError(
            f"contrast variance for arms ({i}, {k}) is {var!r}"
        )
    se = float(np.sqrt(var))
    delta = float(fit.beta[i] - fit.beta[k])
    z = delta / se
    if alternative == "two-sided":
        p = 2.0 * float(stats.norm.sf(abs(z)))
    elif alternative == "greater":
        p = float(stats.norm.sf(z))
    elif alternative == "less":
        p = float(stats.norm.cdf(z))
    else:
        raise ValueError(f"unknown alternative {alternative!r}")
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
        method_tag="nb_gcomp",
    )


def marginal_log_rates(marginal: MarginalRates) -> LogRateEstimate:
    """Delta-method log rates for marginal NB estimates."""
    from .empirical import log_rates

    return log_rates(marginal.to_rate_estimate())
