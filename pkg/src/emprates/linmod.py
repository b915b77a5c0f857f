"""Least squares with heteroskedasticity-consistent covariance.

Small, self-contained OLS layer: QR-based fitting plus the HC0/HC1/HC3
sandwich family.  Everything downstream (the rate estimators) works in
terms of :class:`DesignMatrix` and :class:`OLSFit`.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .errors import LeverageOneError, RankDeficientError

_RANK_TOL = 1e-10
_HC_FLAVORS = ("HC0", "HC1", "HC3")


@dataclass(frozen=True, eq=False)
class DesignMatrix:
    """A full-column-rank design matrix with named columns."""

    values: np.ndarray
    column_names: tuple[str, ...]

    def __post_init__(self) -> None:
        values = np.ascontiguousarray(self.values, dtype=float)
        if values.ndim != 2:
            raise ValueError("design matrix must be two-dimensional")
        n, p = values.shape
        names = tuple(self.column_names)
        if len(names) != p:
            raise ValueError(f"{len(names)} names for {p} columns")
        if n < p:
            raise RankDeficientError(
                f"more columns ({p}) than rows ({n})", columns=names
            )
        if not np.all(np.isfinite(values)):
            raise ValueError("design matrix contains non-finite entries")
        r_diag, pivots = _pivoted_r_diag(values)
        ref = abs(r_diag[0]) if r_diag.size else 0.0
        deficient = np.flatnonzero(np.abs(r_diag) <= _RANK_TOL * max(ref, 1.0))
        if ref == 0.0 or deficient.size:
            bad = tuple(names[pivots[int(i)]] for i in deficient) or names
            raise RankDeficientError(
                "design matrix is rank deficient; suspect columns: "
                + ", ".join(bad),
                columns=bad,
            )
        values.setflags(write=False)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "column_names", names)

    @property
    def n(self) -> int:
        return self.values.shape[0]

    @property
    def p(self) -> int:
        return self.values.shape[1]


def _pivoted_r_diag(values: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    r, pivots = scipy.linalg.qr(values, mode="r", pivoting=True)
    return np.diag(r[: values.shape[1], :]), pivots


@dataclass(frozen=True, eq=False)
class OLSFit:
    """OLS solution with the pieces the sandwich estimators need."""

    design: DesignMatrix
    response: np.ndarray
    coef: np.ndarray
    fitted: np.ndarray
    residuals: np.ndarray
    xtx_inv: np.ndarray
    leverages: np.ndarray


def fit_ols(design: DesignMatrix, response: np.ndarray) -> OLSFit:
    """Ordinary least squares via the thin QR decomposition."""
    y = np.asarray(response, dtype=float)
    if y.shape != (design.n,):
        raise ValueError(
            f"response length {y.shape} does not match design rows {design.n}"
        )
    if not np.all(np.isfinite(y)):
        raise ValueError("response contains non-finite entries")
    q, r = np.linalg.qr(design.values, mode="reduced")
    coef = scipy.linalg.solve_triangular(r, q.T @ y, lower=False)
    fitted = design.values @ coef
    residuals = y - fitted
    r_inv = scipy.linalg.solve_triangular(
        r, np.eye(design.p), lower=False
    )
    xtx_inv = r_inv @ r_inv.T
    leverages = np.einsum("ij,ij->i", q, q)
    return OLSFit(
        design=design,
        response=y,
        coef=coef,
        fitted=fitted,
        residuals=residuals,
        xtx_inv=xtx_inv,
        leverages=leverages,
    )


def hc_covariance(fit: OLSFit, flavor: str = "HC1") -> np.ndarray:
    """Heteroskedasticity-consistent covariance of the OLS coefficients.

    HC0 uses squared residuals as the meat weights, HC1 rescales them by
    n/(n-p), and HC3 divides each by (1 - h_jj)^2.  HC3 is undefined when
    any leverage reaches one.
    """
    flavor = flavor.upper()
    if flavor not in _HC_FLAVORS:
        raise ValueError(f"flavor must be one of {_HC_FLAVORS}, got {flavor!r}")
    n, p = fit.design.n, fit.design.p
    e2 = fit.residuals**2
    if flavor == "HC0":
        omega = e2
    elif flavor == "HC1":
        if n == p:
            raise LeverageOneError("HC1 is undefined with zero residual degrees "
                                   "of freedom")
        omega = e2 * (n / (n - p))
    else:
        one_minus_h = 1.0 - fit.leverages
        if np.any(one_minus_h <= 1e-10):
            j = int(np.argmin(one_minus_h))
            raise LeverageOneError(
                f"leverage of row {j} is {fit.leverages[j]:.12f}; HC3 weights "
                "are undefined at leverage one"
            )
        omega = e2 / one_minus_h**2
    meat = (fit.design.values * omega[:, None]).T @ fit.design.values
    cov = fit.xtx_inv @ meat @ fit.xtx_inv
    return 0.5 * (cov + cov.T)
