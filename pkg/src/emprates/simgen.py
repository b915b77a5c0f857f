"""Synthetic trial generators for count outcomes with baseline dependence.

Two families:

* ``nb_copula`` - a baseline count X and an outcome count Y per subject,
  both NB2, coupled through a Gaussian copula.  Because the copula acts on
  latent normals, the latent correlation that achieves a target Pearson
  correlation between X and Y must be calibrated numerically; results are
  cached on disk keyed by a hash of the margins and target.
* ``zinb`` - zero-inflated NB2 outcomes with a Poisson baseline count and
  a standard normal biomarker as covariates.

Subject exposure is drawn from an equal mixture of U(0.6, 1.2) and
U(0.8, 1.4) (mean 1) in both families, and outcome means scale with
exposure.  All draws flow through :class:`RngStream` so replicates are
reproducible regardless of execution order.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
import tempfile
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from scipy import stats

from .domain import Dataset
from .errors import UnachievableCorrelationError, UnknownCaseError, UsageError

_CALIBRATION_SEED = 914_658_203
_CALIBRATION_DRAWS = 200_000
_LATENT_HI = 0.999
_K_TINY = 1e-12


@dataclass(frozen=True)
class ExposureMixture:
    """A finite mixture of uniform components for subject exposure."""

    components: tuple[tuple[float, float], ...] = ((0.6, 1.2), (0.8, 1.4))
    weights: tuple[float, ...] = (0.5, 0.5)

    def __post_init__(self) -> None:
        if len(self.components) != len(self.weights) or not self.components:
            raise ValueError("components and weights must align and be nonempty")
        if any(w <= 0 for w in self.weights):
            raise ValueError("mixture weights must be positive")
        if abs(sum(self.weights) - 1.0) > 1e-12:
            raise ValueError("mixture weights must sum to one")
        if any(not (0 < lo <= hi) for lo, hi in self.components):
            raise ValueError("each component needs 0 < low <= high")


DEFAULT_EXPOSURE = ExposureMixture()


def gen_exposure(
    n: int,
    rng: np.random.Generator,
    mixture: ExposureMixture = DEFAULT_EXPOSURE,
) -> np.ndarray:
    """Draw n exposures from the uniform mixture."""
    cum = np.cumsum(mixture.weights)
    idx = np.searchsorted(cum, rng.random(n), side="right")
    bounds = np.asarray(mixture.components)
    lo, hi = bounds[idx, 0], bounds[idx, 1]
    return lo + rng.random(n) * (hi - lo)


@dataclass(frozen=True)
class ScenarioSpec:
    """Parameters of one synthetic trial scenario.

    ``family`` selects the generator.  For ``nb_copula``: NB2 margins for
    the baseline count (``baseline_rate``, ``baseline_dispersion``) and for
    the outcome per arm (``rates``, ``dispersions``), plus the target
    Pearson correlation between baseline and outcome.  For ``zinb``: the
    structural zero probability, log-scale coefficients, the NB dispersion,
    and the Poisson mean of the baseline covariate.
    """

    case_id: str
    family: str
    n_per_arm: int
    exposure: ExposureMixture = DEFAULT_EXPOSURE
    baseline_rate: float | None = None
    baseline_dispersion: float | None = None
    rates: tuple[float, float] | None = None
    dispersions: tuple[float, float] | None = None
    target_correlation: float = 0.0
    zero_inflation: float | None = None
    log_baseline: float | None = None
    log_rate_ratio: float = 0.0
    covariate_log_effects: tuple[float, float] = (0.0, 0.0)
    zinb_dispersion: float | None = None
    covariate_poisson_mean: float | None = None

    def __post_init__(self) -> None:
        if self.family not in ("nb_copula", "zinb"):
            raise UsageError(f"unknown scenario family {self.family!r}")
        if self.n_per_arm < 2:
            raise UsageError("n_per_arm must be at least 2")
        if self.family == "nb_copula":
            if self.rates is None or self.dispersions is None:
                raise UsageError("nb_copula scenarios need rates and dispersions")
            if self.baseline_rate is None or self.baseline_dispersion is None:
                raise UsageError("nb_copula scenarios need a baseline margin")
            if any(r <= 0 for r in self.rates) or self.baseline_rate <= 0:
                raise UsageError("rates must be positive")
            if any(k < 0 for k in self.dispersions) or self.baseline_dispersion < 0:
                raise UsageError("dispersions must be nonnegative")
            if not (0.0 <= self.target_correlation <= 0.95):
                raise UsageError(
                    "target correlation must lie in [0, 0.95], got "
                    f"{self.target_correlation}"
                )
        else:
            if self.zero_inflation is None or self.log_baseline is None:
                raise UsageError("zinb scenarios need zero_inflation and "
                                 "log_baseline")
            if not (0.0 <= self.zero_inflation < 1.0):
                raise UsageError("zero inflation must lie in [0, 1)")
            if self.zinb_dispersion is None or self.zinb_dispersion < 0:
                raise UsageError("zinb scenarios need a nonnegative dispersion")
            if self.covariate_poisson_mean is None or self.covariate_poisson_mean <= 0:
                raise UsageError("zinb scenarios need a positive covariate mean")
            if self.target_correlation != 0.0:
                raise UsageError("target_correlation applies to nb_copula only")

    @property
    def true_rate_ratio(self) -> float:
        """Marginal rate ratio of arm 1 over arm 0."""
        if self.family == "nb_copula":
            return self.rates[1] / self.rates[0]
        return math.exp(self.log_rate_ratio)


_NB_CASES: dict[str, dict] = {
    "A": dict(baseline_rate=0.4, baseline_dispersion=3.75,
              rates=(0.7, 0.7), dispersions=(2.43, 2.43)),
    "B": dict(baseline_rate=0.4, baseline_dispersion=3.75,
              rates=(0.5, 0.5), dispersions=(14.0, 14.0)),
    "C": dict(baseline_rate=0.4, baseline_dispersion=3.75,
              rates=(0.7, 0.5), dispersions=(2.43, 2.43)),
    "D": dict(baseline_rate=3.7, baseline_dispersion=2.02,
              rates=(5.6, 5.6), dispersions=(0.62, 0.62)),
    "E": dict(baseline_rate=3.7, baseline_dispersion=2.02,
              rates=(5.6, 5.6), dispersions=(3.01, 3.01)),
    "F": dict(baseline_rate=3.7, baseline_dispersion=2.02,
              rates=(5.6, 4.7), dispersions=(0.62, 0.62)),
}

_ZINB_CASES: dict[str, dict] = {
    "G": dict(zero_inflation=0.6, log_rate_ratio=0.0),
    "H": dict(zero_inflation=0.3, log_rate_ratio=0.0),
    "I": dict(zero_inflation=0.6, log_rate_ratio=math.log(0.7)),
    "J": dict(zero_inflation=0.3, log_rate_ratio=math.log(0.7)),
}


def scenario(case_id: str, n: int = 400, rho: float = 0.0) -> ScenarioSpec:
    """Build a preset scenario (cases A through J).

    ``n`` is the total sample size, allocated 1:1 across the two arms, so
    it must be even.  ``rho`` is the target baseline-outcome correlation
    and applies to the copula cases A-F only.
    """
    if n < 4 or n % 2:
        raise UsageError(
            f"the total sample size must be an even number >= 4, got {n}"
        )
    n_per_arm = n // 2
    case = case_id.upper()
    if case in _NB_CASES:
        return ScenarioSpec(
            case_id=case,
            family="nb_copula",
            n_per_arm=n_per_arm,
            target_correlation=rho,
            **_NB_CASES[case],
        )
    if case in _ZINB_CASES:
        if rho != 0.0:
            raise UsageError(
                f"case {case} is zero-inflated; the copula correlation does "
                "not apply"
            )
        return ScenarioSpec(
            case_id=case,
            family="zinb",
            n_per_arm=n_per_arm,
            log_baseline=math.log(0.3),
            covariate_log_effects=(math.log(1.5), math.log(2.0)),
            zinb_dispersion=1.0,
            covariate_poisson_mean=1.5,
            **_ZINB_CASES[case],
        )
    raise UnknownCaseError(f"unknown scenario case {case_id!r}; expected A-J")


@dataclass(frozen=True)
class RngStream:
    """A named, order-independent random stream.

    ``RngStream(seed, i).generator()`` yields the same sequence no matter
    how many other streams were consumed before it, which keeps simulation
    replicates identical under any parallel schedule.
    """

    seed: int
    stream_id: int = 0

    def generator(self) -> np.random.Generator:
        ss = np.random.SeedSequence(
            entropy=self.seed, spawn_key=(self.stream_id,)
        )
        return np.random.default_rng(ss)

    def child(self, stream_id: int) -> "RngStream":
        return replace(self, stream_id=stream_id)


def nb_quantile(
    p: np.ndarray | float, mean: np.ndarray | float, k: float
) -> np.ndarray:
    """NB2 quantile function; k = 0 degenerates to Poisson.

    Defined for p in [0, 1); p = 0 maps to 0 (the smallest support point).
    """
    p_arr = np.asarray(p, dtype=float)
    mean_arr = np.asarray(mean, dtype=float)
    if np.any((p_arr < 0.0) | (p_arr >= 1.0)):
        raise ValueError("quantile levels must lie in [0, 1)")
    if np.any(mean_arr <= 0.0):
        raise ValueError("the mean must be positive")
    if k < 0.0:
        raise ValueError("the dispersion must be nonnegative")
    if k <= _K_TINY:
        q = stats.poisson.ppf(p_arr, mean_arr)
    else:
        a = 1.0 / k
        q = stats.nbinom.ppf(p_arr, a, a / (a + mean_arr))
    # scipy's discrete ppf returns -1 at p = 0
    q = np.where(p_arr == 0.0, 0.0, q)
    return q.astype(np.int64)


def _pearson(x: np.ndarray, y: np.ndarray) -> float:
    xc = x - x.mean()
    yc = y - y.mean()
    denom = math.sqrt(float(xc @ xc) * float(yc @ yc))
    return float(xc @ yc) / denom


def _calibration_draws(
    mixture: ExposureMixture,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    rng = np.random.default_rng(
        np.random.SeedSequence(entropy=_CALIBRATION_SEED)
    )
    z1 = rng.standard_normal(_CALIBRATION_DRAWS)
    z2 = rng.standard_normal(_CALIBRATION_DRAWS)
    d = gen_exposure(_CALIBRATION_DRAWS, rng, mixture)
    return z1, z2, d


def _calibrate_pair(
    baseline_rate: float,
    baseline_dispersion: float,
    rate: float,
    dispersion: float,
    mixture: ExposureMixture,
    target: float,
    tol: float,
) -> dict:
    """Bisect the latent normal correlation to hit the target Pearson
    correlation between the two NB margins.

    Uses a fixed internal seed and common random numbers across candidate
    correlations, so the objective is deterministic and monotone to within
    quantile granularity.
    """
    z1, z2, d = _calibration_draws(mixture)
    x = nb_quantile(stats.norm.cdf(z1), baseline_rate, baseline_dispersion)
    mean_y = rate * d

    def achieved(latent: float) -> float:
        mixed = latent * z1 + math.sqrt(1.0 - latent * latent) * z2
        y = nb_quantile(stats.norm.cdf(mixed), mean_y, dispersion)
        return _pearson(x, y)

    hi_val = achieved(_LATENT_HI)
    if hi_val < target - tol:
        raise UnachievableCorrelationError(
            f"target correlation {target} exceeds the copula maximum "
            f"{hi_val:.4f} for these margins"
        )
    lo, hi = 0.0, _LATENT_HI
    latent, value, evals = hi, hi_val, 1
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        val = achieved(mid)
        evals += 1
        if abs(val - target) < abs(value - target):
            latent, value = mid, val
        if abs(val - target) <= tol or (hi - lo) < 1e-5:
            latent, value = mid, val
            break
        if val < target:
            lo = mid
        else:
            hi = mid
    return {"latent": latent, "achieved": value, "evals": evals}


def _default_cache_path() -> Path:
    env = os.environ.get("EMPRATES_CACHE_DIR")
    base = Path(env) if env else Path.home() / ".cache" / "emprates"
    return base / "latent_correlation.json"


def _cache_key(spec: ScenarioSpec, arm: int, target: float, tol: float) -> str:
    payload = json.dumps(
        [
            "latent-v1",
            spec.baseline_rate,
            spec.baseline_dispersion,
            spec.rates[arm],
            spec.dispersions[arm],
            list(spec.exposure.components),
            list(spec.exposure.weights),
            target,
            tol,
            _CALIBRATION_DRAWS,
            _CALIBRATION_SEED,
        ],
        sort_keys=True,
    )
    return hashlib.sha256(payload.encode()).hexdigest()


def _read_cache(path: Path) -> dict:
    try:
        with open(path) as fh:
            return json.load(fh)
    except (OSError, json.JSONDecodeError):
        return {}


def _write_cache(path: Path, payload: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as fh:
            json.dump(payload, fh, indent=0, sort_keys=True)
        os.replace(tmp, path)
    except OSError:
        try:
            os.unlink(tmp)
        except OSError:
            pass


def calibrate_latent_correlation(
    spec: ScenarioSpec,
    tol: float = 0.005,
    cache_path: Path | str | None = None,
    use_cache: bool = True,
    refresh: bool = False,
    target: float | None = None,
) -> np.ndarray:
    """Latent correlations (one per arm) matching the target correlation.

    Deterministic given the spec.  Results are cached on disk; pass
    ``use_cache=False`` to skip the cache or ``refresh=True`` to overwrite.
    ``target`` overrides the spec's target correlation, which also allows
    probing attainability outside the simulation range [0, 0.95].
    """
    if spec.family != "nb_copula":
        raise UsageError("latent correlation applies to nb_copula scenarios")
    resolved = spec.target_correlation if target is None else float(target)
    if not (0.0 <= resolved < 1.0):
        raise UsageError(
            f"target correlation must lie in [0, 1), got {resolved}"
        )
    if resolved == 0.0:
        return np.zeros(2)
    path = Path(cache_path) if cache_path is not None else _default_cache_path()
    cache = _read_cache(path) if use_cache and not refresh else {}
    out = np.zeros(2)
    dirty = False
    for arm in (0, 1):
        key = _cache_key(spec, arm, resolved, tol)
        entry = cache.get(key)
        if entry is None:
            entry = _calibrate_pair(
                spec.baseline_rate,
                spec.baseline_dispersion,
                spec.rates[arm],
                spec.dispersions[arm],
                spec.exposure,
                resolved,
                tol,
            )
            cache[key] = entry
            dirty = True
        out[arm] = entry["latent"]
    if use_cache and dirty:
        merged = _read_cache(path)
        merged.update(cache)
        _write_cache(path, merged)
    return out


def gen_correlated_nb(
    spec: ScenarioSpec,
    arm: int,
    n: int,
    latent_rho: float,
    rng: np.random.Generator,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """One arm of copula-coupled (baseline count, outcome count, exposure).

    The outcome margin is NB2 with mean rate * exposure, so the marginal
    rate (total events over total exposure) targets the arm rate.
    """
    if spec.family != "nb_copula":
        raise UsageError("gen_correlated_nb applies to nb_copula scenarios")
    if arm not in (0, 1):
        raise UsageError(f"arm must be 0 or 1, got {arm}")
    z1 = rng.standard_normal(n)
    z2 = rng.standard_normal(n)
    d = gen_exposure(n, rng, spec.exposure)
    x = nb_quantile(
        stats.norm.cdf(z1), spec.baseline_rate, spec.baseline_dispersion
    )
    mixed = latent_rho * z1 + math.sqrt(1.0 - latent_rho**2) * z2
    y = nb_quantile(
        stats.norm.cdf(mixed), spec.rates[arm] * d, spec.dispersions[arm]
    )
    return x, y, d


def gen_nb_dataset(
    spec: ScenarioSpec,
    latent_rhos: np.ndarray,
    rng: np.random.Generator,
    n_per_arm: int | None = None,
) -> Dataset:
    """Assemble a two-arm copula trial with the baseline count as the
    adjustment covariate."""
    n = n_per_arm if n_per_arm is not None else spec.n_per_arm
    xs, ys, ds, arms = [], [], [], []
    for arm in (0, 1):
        x, y, d = gen_correlated_nb(spec, arm, n, float(latent_rhos[arm]), rng)
        xs.append(x)
        ys.append(y)
        ds.append(d)
        arms.append(np.full(n, arm))
    return Dataset.from_arrays(
        arm=np.concatenate(arms),
        count=np.concatenate(ys),
        exposure=np.concatenate(ds),
        covariates=np.concatenate(xs).astype(float)[:, None],
        covariate_names=("baseline_count",),
    )


def gen_zinb_dataset(
    spec: ScenarioSpec,
    n_per_arm: int | None = None,
    rng: np.random.Generator | None = None,
) -> Dataset:
    """A two-arm zero-inflated NB trial with covariates (X, Z).

    X is Poisson, Z standard normal; the NB mean is
    exp(b0 + b_trt arm + b1 X + b2 Z) * exposure, zeroed with probability
    ``zero_inflation``.  NB2 noise enters as a gamma-Poisson mixture.
    """
    if spec.family != "zinb":
        raise UsageError("gen_zinb_dataset applies to zinb scenarios")
    if rng is None:
        raise UsageError("an explicit rng is required")
    n = n_per_arm if n_per_arm is not None else spec.n_per_arm
    b1, b2 = spec.covariate_log_effects
    k = spec.zinb_dispersion
    covs, ys, ds, arms = [], [], [], []
    for arm in (0, 1):
        x = rng.poisson(spec.covariate_poisson_mean, size=n).astype(float)
        z = rng.standard_normal(n)
        d = gen_exposure(n, rng, spec.exposure)
        mu = np.exp(
            spec.log_baseline + spec.log_rate_ratio * arm + b1 * x + b2 * z
        ) * d
        structural_zero = rng.random(n) < spec.zero_inflation
        if k <= _K_TINY:
            y = rng.poisson(mu)
        else:
            heterogeneity = rng.gamma(shape=1.0 / k, scale=k, size=n)
            y = rng.poisson(mu * heterogeneity)
        y = np.where(structural_zero, 0, y)
        covs.append(np.column_stack([x, z]))
        ys.append(y)
        ds.append(d)
        arms.append(np.full(n, arm))
    return Dataset.from_arrays(
        arm=np.concatenate(arms),
        count=np.concatenate(ys),
        exposure=np.concatenate(ds),
        covariates=np.vstack(covs),
        covariate_names=("baseline_count", "biomarker"),
    )
