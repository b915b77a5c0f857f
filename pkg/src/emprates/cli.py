"""Command line interface.

Subcommands:

* ``analyze``   - estimate rates and rate ratios from a subject-level CSV,
* ``simulate``  - run a Monte Carlo study of a scenario preset,
* ``meta``      - pool per-stratum rate ratios from a CSV,
* ``calibrate`` - resolve latent copula correlations for a scenario.

Exit codes: 0 success, 2 usage, 3 invalid data, 4 numerical failure.
Errors are emitted as a single JSON object on stderr.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import __version__, empirical, nbglm
from .domain import Dataset, RateRatioResult
from .errors import (
    EmpratesError,
    NumericalError,
    SchemaError,
    UsageError,
)
from .harness import DEFAULT_METHODS, run_study
from .meta import StratumResult, pool_log, pool_natural
from .simgen import calibrate_latent_correlation, scenario

SCHEMA_VERSION = "1"
_REQUIRED_COLUMNS = ("subject_id", "arm", "events", "exposure")


# --- data loading -----------------------------------------------------


def _split_columns(raw: str | None) -> tuple[str, ...]:
    if not raw:
        return ()
    return tuple(c.strip() for c in raw.split(",") if c.strip())


def load_csv(
    path: str,
    adjust: tuple[str, ...] = (),
    strata: tuple[str, ...] = (),
    exposure_divisor: float = 1.0,
    control: str | None = None,
) -> tuple[Dataset, tuple[str, ...]]:
    """Read a subject-level CSV into a dataset.

    Returns the dataset and the arm labels in index order.  Labels map to
    indices by first appearance; ``control`` moves that label to index 0.
    A column named ``stratum`` is read as stratum labels even without an
    explicit ``strata`` selection.
    """
    try:
        fh = open(path, newline="")
    except OSError as exc:
        raise SchemaError(f"cannot open {path}: {exc}") from exc
    with fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        missing = [c for c in _REQUIRED_COLUMNS if c not in header]
        if missing:
            raise SchemaError(
                f"{path}: missing required column(s) {', '.join(missing)}; "
                f"found {', '.join(header) or 'nothing'}"
            )
        for col in (*adjust, *strata):
            if col not in header:
                raise SchemaError(f"{path}: no column named {col!r}")
        rows = list(reader)
    if not rows:
        raise SchemaError(f"{path}: no data rows")
    stratum_source = strata or (
        ("stratum",) if "stratum" in header else ()
    )

    def cell(row: dict, col: str, line: int) -> str:
        value = row.get(col)
        if value is None or value == "":
            raise SchemaError(f"{path} line {line}: empty {col!r}")
        return value

    subject_ids, arm_labels, events, exposures = [], [], [], []
    covariates, stratum_labels = [], []
    for i, row in enumerate(rows):
        line = i + 2
        subject_ids.append(cell(row, "subject_id", line))
        arm_labels.append(cell(row, "arm", line))
        raw = cell(row, "events", line)
        try:
            count = int(raw)
        except ValueError as exc:
            raise SchemaError(
                f"{path} line {line}: events must be an integer, got {raw!r}"
            ) from exc
        events.append(count)
        raw = cell(row, "exposure", line)
        try:
            exposures.append(float(raw) / exposure_divisor)
        except ValueError as exc:
            raise SchemaError(
                f"{path} line {line}: exposure must be numeric, got {raw!r}"
            ) from exc
        vals = []
        for col in adjust:
            raw = cell(row, col, line)
            try:
                vals.append(float(raw))
            except ValueError as exc:
                raise SchemaError(
                    f"{path} line {line}: covariate {col!r} must be numeric, "
                    f"got {raw!r}"
                ) from exc
        covariates.append(vals)
        if stratum_source:
            stratum_labels.append(
                "|".join(cell(row, col, line) for col in stratum_source)
            )

    labels = list(dict.fromkeys(arm_labels))
    if control is not None:
        if control not in labels:
            raise UsageError(
                f"control arm {control!r} not present; arms found: "
                + ", ".join(labels)
            )
        labels.remove(control)
        labels.insert(0, control)
    index = {label: i for i, label in enumerate(labels)}
    data = Dataset.from_arrays(
        arm=np.array([index[a] for a in arm_labels]),
        count=np.array(events, dtype=float),
        exposure=np.array(exposures),
        covariates=np.array(covariates) if adjust else None,
        covariate_names=adjust or None,
        subject_ids=subject_ids,
        strata=stratum_labels if stratum_source else None,
    )
    return data, tuple(labels)


def write_csv(
    data: Dataset,
    path: str,
    arm_labels: tuple[str, ...] | None = None,
) -> None:
    """Write a dataset back to the subject-level CSV schema."""
    labels = arm_labels or tuple(str(a) for a in range(data.arm_count))
    if len(labels) != data.arm_count:
        raise UsageError(
            f"need {data.arm_count} arm labels, got {len(labels)}"
        )
    header = list(_REQUIRED_COLUMNS) + list(data.covariate_names)
    if data.strata is not None:
        header.append("stratum")
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for j in range(data.n):
            row = [
                data.subject_ids[j],
                labels[int(data.arm[j])],
                int(data.count[j]),
                repr(float(data.exposure[j])),
            ]
            row.extend(repr(float(v)) for v in data.covariates[j])
            if data.strata is not None:
                row.append(data.strata[j])
            writer.writerow(row)


# --- analyze -----------------------------------------------------------


@dataclass(frozen=True)
class AnalysisReport:
    """Serializable result of ``analyze``: arms, comparisons, errors."""

    schema_version: str
    label: str | None
    alpha: float
    control: str
    arm_labels: tuple[str, ...]
    adjustment: dict
    arms: tuple[dict, ...]
    comparisons: tuple[dict, ...]
    nb_fit: dict | None
    errors: dict

    def to_dict(self) -> dict:
        return {
            "schema_version": self.schema_version,
            "label": self.label,
            "alpha": self.alpha,
            "control": self.control,
            "arm_labels": list(self.arm_labels),
            "adjustment": self.adjustment,
            "arms": [dict(a) for a in self.arms],
            "comparisons": [dict(c) for c in self.comparisons],
            "nb_fit": self.nb_fit,
            "errors": self.errors,
        }

    def table(self) -> str:
        lines = []
        if self.label:
            lines.append(f"analysis: {self.label}")
        lines.append(
            f"control arm: {self.control}    alpha: {self.alpha:g}"
        )
        head = [
            "arm", "n", "events", "exposure", "obs.rate",
            "emp.rate", "emp.se", "nb.gcomp", "nb.aipw",
        ]
        rows = [head]
        for arm in self.arms:
            rows.append([
                arm["label"],
                str(arm["n"]),
                str(arm["events"]),
                _fmt(arm["exposure"]),
                _fmt(arm["observed_rate"]),
                _fmt(arm.get("empirical_rate")),
                _fmt(arm.get("empirical_se")),
                _fmt(arm.get("nb_gcomp_rate")),
                _fmt(arm.get("nb_aipw_rate")),
            ])
        lines.extend(_align(rows))
        if self.comparisons:
            lines.append("")
            head = ["comparison", "raw.rr", "method", "rr", "ci.low",
                    "ci.high", "p"]
            rows = [head]
            for comp in self.comparisons:
                base = f"{comp['numerator']}/{comp['denominator']}"
                for key in ("empirical", "nb"):
                    block = comp.get(key)
                    if not block:
                        continue
                    rows.append([
                        base,
                        _fmt(comp["raw_rate_ratio"]),
                        key,
                        _fmt(block["rate_ratio"]),
                        _fmt(block["ci_low"]),
                        _fmt(block["ci_high"]),
                        _fmt(block["p"], "{:.4g}"),
                    ])
            lines.extend(_align(rows))
        for method, message in sorted(self.errors.items()):
            lines.append(f"warning: {method}: {message}")
        return "\n".join(lines) + "\n"


def _fmt(value, spec: str = "{:.4f}") -> str:
    if value is None or (isinstance(value, float) and not math.isfinite(value)):
        return "-"
    return spec.format(value)


def _align(rows: list[list[str]]) -> list[str]:
    widths = [max(len(r[i]) for r in rows) for i in range(len(rows[0]))]
    return [
        "  ".join(cell.rjust(w) for cell, w in zip(row, widths))
        for row in rows
    ]


def _ratio_block(result: RateRatioResult) -> dict:
    return {
        "rate_ratio": result.lambda_hat,
        "se_log": result.se_log,
        "z": result.z,
        "p": result.p,
        "ci_low": result.ci_low,
        "ci_high": result.ci_high,
        "method_tag": result.method_tag,
    }


def build_report(
    data: Dataset,
    arm_labels: tuple[str, ...],
    method: str = "both",
    adjust: tuple[str, ...] = (),
    strata: tuple[str, ...] = (),
    alpha: float = 0.05,
    hc_flavor: str | None = None,
    label: str | None = None,
) -> AnalysisReport:
    """Run the selected estimators and assemble the analysis report.

    A failing estimator is reported in ``errors`` without blocking the
    others.
    """
    k = data.arm_count
    errors: dict[str, str] = {}
    arms = [
        {
            "index": a,
            "label": arm_labels[a],
            "n": int(data.n_per_arm[a]),
            "events": int(data.events_per_arm[a]),
            "exposure": float(data.exposure_per_arm[a]),
            "observed_rate": float(
                data.events_per_arm[a] / data.exposure_per_arm[a]
            ),
            "naive_subject_rate": float(
                empirical.naive_subject_rate(data).rates[a]
            ),
        }
        for a in range(k)
    ]

    emp_log = None
    if method in ("empirical", "both"):
        if strata:
            adjustment = "anhecova"
        elif adjust:
            adjustment = "ancova"
        else:
            adjustment = "none"
        try:
            config = empirical.InferenceConfig(
                alpha=alpha,
                adjustment=adjustment,
                hc_flavor=hc_flavor,
                stratification_columns=strata,
            )
            estimate = empirical.estimate_rates(data, config)
            for a in range(k):
                arms[a]["empirical_rate"] = float(estimate.rates[a])
                arms[a]["empirical_se"] = float(estimate.se[a])
            emp_log = empirical.log_rates(estimate)
        except EmpratesError as exc:
            errors["empirical"] = f"{type(exc).__name__}: {exc}"

    nb_fit_info = None
    nb_fit = None
    gcomp = aipw = None
    if method in ("nb", "both"):
        try:
            nb_fit = nbglm.fit_nb(data, adjusted=bool(adjust))
            nb_fit_info = {
                "dispersion": nb_fit.k,
                "converged": nb_fit.converged,
                "boundary_dispersion": nb_fit.boundary_dispersion,
                "loglik": nb_fit.loglik,
                "iterations": nb_fit.iterations,
                "adjusted": nb_fit.adjusted,
            }
            if not nb_fit.converged:
                errors["nb"] = (
                    "nonconvergence: "
                    + ", ".join(
                        f"{k_}={v:.4g}"
                        for k_, v in nb_fit.diagnostics.items()
                    )
                )
                nb_fit = None
            else:
                nb_fit_info["pearson_dispersion"] = nb_fit.pearson_dispersion
                gcomp = nbglm.marginal_rates_gcomp(nb_fit)
                aipw = nbglm.marginal_rates_aipw(nb_fit)
                for a in range(k):
                    arms[a]["nb_gcomp_rate"] = float(gcomp.rates[a])
                    arms[a]["nb_gcomp_se"] = float(
                        math.sqrt(max(gcomp.cov[a, a], 0.0))
                    )
                    arms[a]["nb_aipw_rate"] = float(aipw.rates[a])
                    arms[a]["nb_aipw_se"] = float(
                        math.sqrt(max(aipw.cov[a, a], 0.0))
                    )
        except EmpratesError as exc:
            errors["nb"] = f"{type(exc).__name__}: {exc}"
            nb_fit = None

    comparisons = []
    for a in range(1, k):
        comp: dict = {
            "numerator": arm_labels[a],
            "denominator": arm_labels[0],
            "numerator_index": a,
            "denominator_index": 0,
            "raw_rate_ratio": arms[a]["observed_rate"]
            / arms[0]["observed_rate"]
            if arms[0]["observed_rate"] > 0
            else None,
        }
        if emp_log is not None:
            try:
                comp["empirical"] = _ratio_block(
                    empirical.rate_ratio(emp_log, a, 0, alpha)
                )
            except NumericalError as exc:
                errors[f"empirical:{arm_labels[a]}"] = (
                    f"{type(exc).__name__}: {exc}"
                )
        if nb_fit is not None:
            try:
                comp["nb"] = _ratio_block(
                    nbglm.nb_rate_ratio(nb_fit, a, 0, alpha)
                )
            except NumericalError as exc:
                errors[f"nb:{arm_labels[a]}"] = f"{type(exc).__name__}: {exc}"
        comparisons.append(comp)

    return AnalysisReport(
        schema_version=SCHEMA_VERSION,
        label=label,
        alpha=alpha,
        control=arm_labels[0],
        arm_labels=arm_labels,
        adjustment={
            "method": method,
            "covariates": list(adjust),
            "strata": list(strata),
            "hc_flavor": hc_flavor,
        },
        arms=tuple(arms),
        comparisons=tuple(comparisons),
        nb_fit=nb_fit_info,
        errors=errors,
    )


def cmd_analyze(args: argparse.Namespace) -> int:
    adjust = _split_columns(args.adjust)
    strata = _split_columns(args.strata)
    if args.adjust is not None and not adjust:
        raise UsageError("--adjust was given but names no columns")
    if args.strata is not None and not strata:
        raise UsageError("--strata was given but names no columns")
    if args.exposure_divisor <= 0:
        raise UsageError("--exposure-divisor must be positive")
    data, labels = load_csv(
        args.data,
        adjust=adjust,
        strata=strata,
        exposure_divisor=args.exposure_divisor,
        control=args.control,
    )
    report = build_report(
        data,
        labels,
        method=args.method,
        adjust=adjust,
        strata=strata,
        alpha=args.alpha,
        hc_flavor=args.hc,
        label=args.label,
    )
    if args.json:
        _write_json(args.json, report.to_dict())
    sys.stdout.write(report.table())
    return 0


# --- simulate -----------------------------------------------------------


_CONFIG_KEYS = {
    "case": str,
    "rho": float,
    "n": int,
    "reps": int,
    "seed": int,
    "alpha": float,
    "jobs": int,
    "methods": str,
    "out_prefix": str,
}


def _read_config(path: str) -> dict:
    """Parse a flat key=value config file (# starts a comment)."""
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from exc
    values: dict = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(
                f"{path} line {lineno}: expected key=value, got {raw!r}"
            )
        key, _, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if key not in _CONFIG_KEYS:
            raise UsageError(
                f"{path} line {lineno}: unknown key {key!r}; known keys: "
                + ", ".join(sorted(_CONFIG_KEYS))
            )
        try:
            values[key] = _CONFIG_KEYS[key](value)
        except ValueError as exc:
            raise UsageError(
                f"{path} line {lineno}: bad value for {key}: {value!r}"
            ) from exc
    return values


def _select_methods(raw: str | None):
    if not raw:
        return DEFAULT_METHODS
    by_name = {m.name: m for m in DEFAULT_METHODS}
    chosen = []
    for name in _split_columns(raw):
        if name not in by_name:
            raise UsageError(
                f"unknown method {name!r}; available: "
                + ", ".join(by_name)
            )
        chosen.append(by_name[name])
    return tuple(chosen)


def cmd_simulate(args: argparse.Namespace) -> int:
    settings = {
        "case": "A", "rho": 0.0, "n": 400, "reps": 2000, "seed": 0,
        "alpha": 0.05, "jobs": 1, "methods": "", "out_prefix": "study",
    }
    if args.config:
        settings.update(_read_config(args.config))
    for key in ("case", "rho", "n", "reps", "seed", "alpha", "jobs",
                "methods", "out_prefix"):
        value = getattr(args, key)
        if value is not None:
            settings[key] = value
    spec = scenario(settings["case"], settings["n"], settings["rho"])
    summary = run_study(
        spec,
        methods=_select_methods(settings["methods"]),
        n_replicates=settings["reps"],
        seed=settings["seed"],
        alpha=settings["alpha"],
        jobs=settings["jobs"],
    )
    prefix = Path(settings["out_prefix"])
    _write_json(prefix.with_suffix(".json"), summary.to_dict())
    _write_summary_csv(prefix.with_suffix(".csv"), summary)
    sys.stdout.write(
        f"case {summary.case_id} n/arm={summary.n_per_arm} "
        f"rho={summary.target_correlation:g} reps={summary.n_replicates}\n"
    )
    rows = [["method", "reject", "mc.se", "coverage", "mean.rr", "failed"]]
    for m in summary.methods:
        rows.append([
            m.method,
            _fmt(m.rejection_rate),
            _fmt(m.rejection_mc_se),
            _fmt(m.coverage),
            _fmt(m.mean_lambda),
            str(m.n_failed),
        ])
    sys.stdout.write("\n".join(_align(rows)) + "\n")
    return 0


_SUMMARY_COLUMNS = (
    "case_id", "family", "n_per_arm", "target_correlation", "true_lambda",
    "alpha", "n_replicates", "seed", "method", "n_failed", "rejection_rate",
    "rejection_mc_se", "mean_lambda", "mean_log_lambda", "sd_log_lambda",
    "mean_se_log", "coverage",
)


def _write_summary_csv(path: Path, summary) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(_SUMMARY_COLUMNS)
        base = summary.to_dict()
        for m in summary.methods:
            row = []
            for col in _SUMMARY_COLUMNS:
                if col == "method":
                    row.append(m.method)
                elif hasattr(m, col) and col != "n_replicates":
                    row.append(getattr(m, col))
                else:
                    row.append(base[col])
            writer.writerow(row)


# --- meta ------------------------------------------------------------------


def cmd_meta(args: argparse.Namespace) -> int:
    try:
        fh = open(args.data, newline="")
    except OSError as exc:
        raise SchemaError(f"cannot open {args.data}: {exc}") from exc
    with fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        needed = ("stratum", "lambda", "var_lambda", "weight")
        missing = [c for c in needed if c not in header]
        if missing:
            raise SchemaError(
                f"{args.data}: missing column(s) {', '.join(missing)}"
            )
        results = []
        for i, row in enumerate(reader):
            line = i + 2
            try:
                results.append(
                    StratumResult(
                        stratum=row["stratum"],
                        lambda_hat=float(row["lambda"]),
                        var_lambda=float(row["var_lambda"]),
                        weight=float(row["weight"]),
                        var_log_lambda=float(row["var_log_lambda"])
                        if row.get("var_log_lambda") not in (None, "")
                        else None,
                    )
                )
            except ValueError as exc:
                raise SchemaError(
                    f"{args.data} line {line}: {exc}"
                ) from exc
    pool = pool_log if args.scale == "log" else pool_natural
    result = pool(results, alpha=args.alpha)
    payload = {
        "schema_version": SCHEMA_VERSION,
        "scale": args.scale,
        "n_strata": len(results),
        "rate_ratio": result.lambda_hat,
        "se_log": result.se_log,
        "z": result.z,
        "p": result.p,
        "ci_low": result.ci_low,
        "ci_high": result.ci_high,
        "alpha": result.alpha,
    }
    if args.json:
        _write_json(args.json, payload)
    sys.stdout.write(
        f"pooled rate ratio ({args.scale} scale, {len(results)} strata): "
        f"{result.lambda_hat:.4f} "
        f"[{result.ci_low:.4f}, {result.ci_high:.4f}]  p={result.p:.4g}\n"
    )
    return 0


# --- calibrate ----------------------------------------------------------


def cmd_calibrate(args: argparse.Namespace) -> int:
    # the spec is built at rho 0; the target is passed separately so the
    # command can probe attainability beyond the simulation range
    spec = scenario(args.case, 400, 0.0)
    cache_path = (
        Path(args.cache_dir) / "latent_correlation.json"
        if args.cache_dir
        else None
    )
    latent = calibrate_latent_correlation(
        spec,
        tol=args.tol,
        cache_path=cache_path,
        use_cache=not args.no_cache,
        refresh=args.refresh,
        target=args.rho,
    )
    payload = {
        "schema_version": SCHEMA_VERSION,
        "case": spec.case_id,
        "target_correlation": args.rho,
        "tolerance": args.tol,
        "latent_correlation": [float(v) for v in latent],
    }
    sys.stdout.write(json.dumps(payload, indent=2) + "\n")
    return 0


# --- plumbing -----------------------------------------------------------


def _write_json(path, payload: dict) -> None:
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="emprates",
        description="Marginal event rates and rate ratios for count data "
        "from randomized trials",
    )
    parser.add_argument(
        "--version", action="version", version=f"%(prog)s {__version__}"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("analyze", help="analyze a subject-level CSV")
    p.add_argument("data", help="CSV with subject_id, arm, events, exposure")
    p.add_argument("--method", choices=("empirical", "nb", "both"),
                   default="both")
    p.add_argument("--adjust", help="comma-separated covariate columns")
    p.add_argument("--strata",
                   help="comma-separated stratification columns (anhecova)")
    p.add_argument("--alpha", type=float, default=0.05)
    p.add_argument("--hc", choices=("HC0", "HC1", "HC3"),
                   help="override the HC flavor")
    p.add_argument("--exposure-divisor", type=float, default=1.0,
                   help="divide exposure by this (e.g. 365.25 for days "
                        "to years)")
    p.add_argument("--control", help="arm label to use as the denominator")
    p.add_argument("--label", help="free-text label echoed in the report")
    p.add_argument("--json", help="write the JSON report to this path")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("simulate", help="run a Monte Carlo study")
    p.add_argument("--config", help="flat key=value config file")
    p.add_argument("--case", help="scenario preset A-J")
    p.add_argument("--rho", type=float, help="target baseline correlation")
    p.add_argument("--n", type=int,
                   help="total sample size (1:1 allocation)")
    p.add_argument("--reps", type=int, help="number of replicates")
    p.add_argument("--seed", type=int)
    p.add_argument("--alpha", type=float)
    p.add_argument("--jobs", type=int, help="parallel worker processes")
    p.add_argument("--methods", help="comma-separated method preset names")
    p.add_argument("--out-prefix", dest="out_prefix",
                   help="write PREFIX.json and PREFIX.csv")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("meta", help="pool per-stratum rate ratios")
    p.add_argument("data",
                   help="CSV with stratum, lambda, var_lambda, weight")
    p.add_argument("--scale", choices=("natural", "log"), default="natural")
    p.add_argument("--alpha", type=float, default=0.05)
    p.add_argument("--json", help="write the JSON result to this path")
    p.set_defaults(func=cmd_meta)

    p = sub.add_parser("calibrate",
                       help="resolve latent copula correlations")
    p.add_argument("--case", required=True, help="scenario preset A-F")
    p.add_argument("--rho", type=float, required=True)
    p.add_argument("--tol", type=float, default=0.005)
    p.add_argument("--cache-dir", help="override the calibration cache dir")
    p.add_argument("--no-cache", action="store_true")
    p.add_argument("--refresh", action="store_true",
                   help="recompute and overwrite cached entries")
    p.set_defaults(func=cmd_calibrate)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except EmpratesError as exc:
        payload = {
            "error": {
                "type": type(exc).__name__,
                "message": str(exc),
                "exit_code": exc.exit_code,
            }
        }
        sys.stderr.write(json.dumps(payload) + "\n")
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
