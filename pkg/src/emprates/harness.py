"""Monte Carlo evaluation of rate-ratio estimators on synthetic trials.

A study runs R independent replicates of a scenario, applies a set of
method presets to each (negative binomial and empirical, adjusted and
unadjusted), and reduces to per-method operating characteristics:
rejection rate with its Monte Carlo standard error, mean estimate,
spread of the log estimate against the mean reported standard error,
and confidence interval coverage of the true rate ratio.

Replicate r draws from ``RngStream(seed, r)``, so results are identical
for any worker count, and the reduction is by replicate index.
Replicates where a method fails (non-convergence, degenerate variance)
count as non-rejections and are tallied separately; summary moments are
over the successful replicates.
"""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, asdict

import numpy as np

from . import empirical, nbglm
from .domain import Dataset
from .errors import EmpratesError, UsageError
from .simgen import (
    RngStream,
    ScenarioSpec,
    calibrate_latent_correlation,
    gen_nb_dataset,
    gen_zinb_dataset,
)

_ESTIMATORS = ("empirical", "nb")


@dataclass(frozen=True)
class MethodSpec:
    """One analysis recipe applied to every replicate."""

    name: str
    estimator: str
    adjusted: bool
    hc_flavor: str | None = None
    covariance: str = "pearson"

    def __post_init__(self) -> None:
        if self.estimator not in _ESTIMATORS:
            raise UsageError(
                f"estimator must be one of {_ESTIMATORS}, got "
                f"{self.estimator!r}"
            )


DEFAULT_METHODS: tuple[MethodSpec, ...] = (
    MethodSpec("nb_unadjusted", "nb", adjusted=False),
    MethodSpec("nb_adjusted", "nb", adjusted=True),
    MethodSpec("empirical_unadjusted", "empirical", adjusted=False),
    MethodSpec("empirical_adjusted", "empirical", adjusted=True),
)


@dataclass(frozen=True)
class ReplicateOutcome:
    """One method's result on one replicate."""

    method: str
    ok: bool
    lambda_hat: float = math.nan
    log_lambda: float = math.nan
    se_log: float = math.nan
    p: float = math.nan
    ci_low: float = math.nan
    ci_high: float = math.nan
    error: str | None = None


def _apply_method(
    method: MethodSpec, data: Dataset, alpha: float
) -> ReplicateOutcome:
    try:
        if method.estimator == "empirical":
            config = empirical.InferenceConfig(
                alpha=alpha,
                adjustment="ancova" if method.adjusted else "none",
                hc_flavor=method.hc_flavor,
            )
            estimate = empirical.estimate_rates(data, config)
            result = empirical.rate_ratio(
                empirical.log_rates(estimate), 1, 0, alpha
            )
        else:
            fit = nbglm.fit_nb(data, adjusted=method.adjusted)
            if not fit.converged:
                return ReplicateOutcome(
                    method=method.name,
                    ok=False,
                    error="nonconvergence: "
                    + ", ".join(
                        f"{k}={v:.3g}" for k, v in fit.diagnostics.items()
                    ),
                )
            result = nbglm.nb_rate_ratio(
                fit, 1, 0, alpha, covariance=method.covariance
            )
    except EmpratesError as exc:
        return ReplicateOutcome(
            method=method.name, ok=False, error=f"{type(exc).__name__}: {exc}"
        )
    return ReplicateOutcome(
        method=method.name,
        ok=True,
        lambda_hat=result.lambda_hat,
        log_lambda=math.log(result.lambda_hat),
        se_log=result.se_log,
        p=result.p,
        ci_low=result.ci_low,
        ci_high=result.ci_high,
    )


def run_replicate(
    spec: ScenarioSpec,
    methods: tuple[MethodSpec, ...],
    stream: RngStream,
    latent_rhos: np.ndarray | None = None,
    alpha: float = 0.05,
) -> dict[str, ReplicateOutcome]:
    """Generate one trial and apply every method to it."""
    rng = stream.generator()
    if spec.family == "nb_copula":
        if latent_rhos is None:
            latent_rhos = calibrate_latent_correlation(spec)
        data = gen_nb_dataset(spec, latent_rhos, rng)
    else:
        data = gen_zinb_dataset(spec, rng=rng)
    return {m.name: _apply_method(m, data, alpha) for m in methods}


@dataclass(frozen=True)
class MethodSummary:
    """Operating characteristics of one method over a study."""

    method: str
    n_replicates: int
    n_failed: int
    rejection_rate: float
    rejection_mc_se: float
    mean_lambda: float
    mean_log_lambda: float
    sd_log_lambda: float
    mean_se_log: float
    coverage: float


@dataclass(frozen=True)
class SimulationSummary:
    """A full study: scenario echo plus per-method summaries."""

    case_id: str
    family: str
    n_per_arm: int
    target_correlation: float
    latent_rhos: tuple[float, float]
    true_lambda: float
    alpha: float
    n_replicates: int
    seed: int
    methods: tuple[MethodSummary, ...]

    def method(self, name: str) -> MethodSummary:
        for summary in self.methods:
            if summary.method == name:
                return summary
        raise KeyError(name)

    def to_dict(self) -> dict:
        payload = asdict(self)
        payload["methods"] = [asdict(m) for m in self.methods]
        return payload


def _reduce(
    method_names: list[str],
    outcomes: list[dict[str, ReplicateOutcome]],
    true_lambda: float,
    alpha: float,
) -> tuple[MethodSummary, ...]:
    summaries = []
    n_reps = len(outcomes)
    for name in method_names:
        rows = [reps[name] for reps in outcomes]
        good = [r for r in rows if r.ok]
        n_failed = n_reps - len(good)
        rejections = sum(1 for r in good if r.p < alpha)
        rate = rejections / n_reps
        if good:
            lam = float(np.mean([r.lambda_hat for r in good]))
            logs = np.array([r.log_lambda for r in good])
            mean_log = float(logs.mean())
            sd_log = float(logs.std(ddof=1)) if len(good) > 1 else math.nan
            mean_se = float(np.mean([r.se_log for r in good]))
            covered = sum(
                1 for r in good if r.ci_low <= true_lambda <= r.ci_high
            )
            coverage = covered / len(good)
        else:
            lam = mean_log = sd_log = mean_se = coverage = math.nan
        summaries.append(
            MethodSummary(
                method=name,
                n_replicates=n_reps,
                n_failed=n_failed,
                rejection_rate=rate,
                rejection_mc_se=math.sqrt(rate * (1.0 - rate) / n_reps),
                mean_lambda=lam,
                mean_log_lambda=mean_log,
                sd_log_lambda=sd_log,
                mean_se_log=mean_se,
                coverage=coverage,
            )
        )
    return tuple(summaries)


def _run_chunk(args) -> list[tuple[int, dict[str, ReplicateOutcome]]]:
    spec, methods, seed, indices, latent, alpha = args
    out = []
    for r in indices:
        out.append(
            (r, run_replicate(spec, methods, RngStream(seed, r), latent, alpha))
        )
    return out


def run_study(
    spec: ScenarioSpec,
    methods: tuple[MethodSpec, ...] = DEFAULT_METHODS,
    n_replicates: int = 2000,
    seed: int = 0,
    alpha: float = 0.05,
    jobs: int = 1,
    cache_path=None,
) -> SimulationSummary:
    """Run R replicates of a scenario and summarize each method.

    Latent copula correlations are calibrated once up front (with the disk
    cache); the per-replicate streams make results independent of ``jobs``.
    """
    if n_replicates < 1:
        raise UsageError("n_replicates must be positive")
    names = [m.name for m in methods]
    if len(set(names)) != len(names):
        raise UsageError("method names must be unique")
    if spec.family == "nb_copula":
        latent = calibrate_latent_correlation(spec, cache_path=cache_path)
    else:
        latent = np.zeros(2)
    indices = list(range(n_replicates))
    results: list[dict[str, ReplicateOutcome] | None] = [None] * n_replicates
    if jobs > 1:
        chunks = [
            (spec, methods, seed, indices[i::jobs], latent, alpha)
            for i in range(jobs)
        ]
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            for chunk_result in pool.map(_run_chunk, chunks):
                for r, reps in chunk_result:
                    results[r] = reps
    else:
        for r in indices:
            results[r] = run_replicate(
                spec, methods, RngStream(seed, r), latent, alpha
            )
    outcomes = [r for r in results if r is not None]
    return SimulationSummary(
        case_id=spec.case_id,
        family=spec.family,
        n_per_arm=spec.n_per_arm,
        target_correlation=spec.target_correlation,
        latent_rhos=(float(latent[0]), float(latent[1])),
        true_lambda=spec.true_rate_ratio,
        alpha=alpha,
        n_replicates=n_replicates,
        seed=seed,
        methods=_reduce(names, outcomes, spec.true_rate_ratio, alpha),
    )
