"""End-to-end analysis: load, clean, check balance, select covariates, estimate, report.

Artifacts written by :func:`write_report`:

``results.csv``
    one row per (outcome, estimator): perf, method, est, se, p_value,
    ci_low, ci_high, n_treated, n_control
``results.md``
    the same numbers as a markdown table, smallest SE per outcome in bold
``ci_plot.csv``
    interval data for plotting, with a ``min_se_in_group`` flag
``provenance.json``
    options, seeds, cleaning counts, attrition, balance and selection results

Every artifact is a pure function of the inputs and options; the worker
thread count is deliberately left out so it cannot change a byte.
"""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import __version__
from .cleaning import CleaningLedger, attrition_rate, clean_problem_logs, summarize_conditions
from .covariates import (DEFAULT_CORRELATION_THRESHOLD, DEFAULT_PERMUTATIONS,
                         DEFAULT_VARIANCE_THRESHOLD, classification_permutation_test,
                         select_features)
from .data_model import TrialDataset, read_analysis_csv, validate_tables
from .errors import DomainError, ValidationFailed
from .estimators import (ESTIMATORS, OUTCOMES, difference_in_means, loop_estimate,
                         regression_estimate)
from .imputation import ImputerSpec
from .ingestion import HeaderMapping, build_analysis_table, load_tables

RESULT_COLUMNS = ("perf", "method", "est", "se", "p_value", "ci_low", "ci_high",
                  "n_treated", "n_control")
PLOT_COLUMNS = ("estimator", "outcome", "estimate", "ci_low", "ci_high", "min_se_in_group")
_MD_METHOD = {"t_test": "t-test", "regression": "Reg", "loop": "LOOP"}
_MD_PERF = {"proximal": "Prox.", "distal": "Distal"}


@dataclass(frozen=True)
class AnalysisOptions:
    """Every knob that can change a number in the report."""

    seed: int = 0
    level: float = 0.95
    welch: bool = False
    imputer: str = "forest"
    trees: int = 100
    mtry: int | None = None
    min_leaf: int = 5
    max_depth: int | None = None
    permutations: int = DEFAULT_PERMUTATIONS
    balance: bool = True
    var_threshold: float = DEFAULT_VARIANCE_THRESHOLD
    cor_threshold: float = DEFAULT_CORRELATION_THRESHOLD
    best_so_far_code: int | None = 2
    require_hint: bool = True
    treatment_code: int = 1
    control_code: int = 0
    p_assign: float = 0.5
    cluster_covariate: bool = True
    proximal_covariate: bool = True

    def imputer_spec(self) -> ImputerSpec:
        return ImputerSpec(kind=self.imputer, n_trees=self.trees, mtry=self.mtry,
                           min_leaf=self.min_leaf, max_depth=self.max_depth, seed=self.seed)

    def with_changes(self, **kw) -> "AnalysisOptions":
        return replace(self, **kw)


@dataclass
class LoadedData:
    dataset: TrialDataset
    source: str
    cleaning: list = field(default_factory=list)
    validation: dict = field(default_factory=dict)
    condition_summary: list = field(default_factory=list)


def load_raw(directory, options: AnalysisOptions, mapping=None, n_threads: int = 1,
             strict: bool = True) -> LoadedData:
    """Read an export directory, validate, clean and build the student table."""
    if mapping is not None and not isinstance(mapping, HeaderMapping):
        mapping = HeaderMapping.read(mapping)
    tables = load_tables(directory, mapping, n_threads=n_threads)
    report = validate_tables(tables)
    if strict and not report.ok:
        first = report.errors[0]
        raise ValidationFailed(
            f"{len(report.errors)} validation error(s); first: {first.table} line {first.line} "
            f"column {first.column}: {first.message}", report)
    ledger = CleaningLedger()
    problems = clean_problem_logs(tables.problem_logs, tables.action_logs,
                                  options.best_so_far_code, options.require_hint, ledger)
    summary_source = problems
    tables = tables.replace(problem_logs=problems)
    ds = build_analysis_table(tables, options.treatment_code, options.control_code, options.p_assign)
    summary = summarize_conditions(summary_source, ds)
    return LoadedData(ds, "raw", ledger.as_dict(), report.as_dict(),
                      _json_safe(summary.to_dict(orient="records")))


def load_input(path, options: AnalysisOptions, mapping=None, n_threads: int = 1) -> LoadedData:
    """A directory is treated as a raw export, a file as an analysis CSV."""
    path = Path(path)
    if path.is_dir():
        return load_raw(path, options, mapping, n_threads)
    # the assigned_prob column wins; --p-assign only applies to raw exports
    return LoadedData(read_analysis_csv(path), "analysis_csv")


def estimate_all(dataset: TrialDataset, options: AnalysisOptions, estimators=ESTIMATORS,
                 outcomes=OUTCOMES, regression_covariates=(), n_threads: int = 1):
    """Run the requested estimators; returns ``(results, skipped)``.

    An outcome that no arm has observed (for example a missing distal table)
    is skipped and listed rather than failing the whole run.
    """
    results, skipped = [], []
    for outcome in outcomes:
        y = dataset.outcome(outcome)
        seen = ~np.isnan(y)
        if not ((dataset.arm[seen] == 1).any() and (dataset.arm[seen] == 0).any()):
            skipped.append({"outcome": outcome, "reason": "an arm has no observed outcome"})
            continue
        for est in estimators:
            if est == "t_test":
                r = difference_in_means(dataset, outcome, welch=options.welch, level=options.level)
            elif est == "regression":
                r = regression_estimate(dataset, outcome, regression_covariates, options.level,
                                        options.proximal_covariate)
            elif est == "loop":
                r = loop_estimate(dataset, outcome, options.imputer_spec(), options.seed,
                                  level=options.level, n_threads=n_threads,
                                  proximal_covariate=options.proximal_covariate,
                                  cluster_covariate=options.cluster_covariate)
            else:
                raise ValueError(f"unknown estimator {est!r}")
            results.append(r)
    return results, skipped


@dataclass
class Report:
    results: list
    skipped: list
    balance: object
    selection: object
    options: AnalysisOptions
    loaded: LoadedData
    attrition: dict

    def result_rows(self):
        return [{"perf": r.outcome, "method": r.estimator, "est": r.estimate, "se": r.std_error,
                 "p_value": r.p_value, "ci_low": r.ci_low, "ci_high": r.ci_high,
                 "n_treated": r.n_treated, "n_control": r.n_control} for r in self.results]

    def min_se_flags(self):
        best = {}
        for r in self.results:
            best[r.outcome] = min(best.get(r.outcome, math.inf), r.std_error)
        return [r.std_error == best[r.outcome] for r in self.results]


def run_report(loaded: LoadedData, options: AnalysisOptions, n_threads: int = 1) -> Report:
    ds = loaded.dataset
    balance = None
    if options.balance and ds.covariate_names:
        balance = classification_permutation_test(ds, options.permutations, options.seed,
                                                  n_trees=options.trees, n_threads=n_threads)
    selection = select_features(ds, options.var_threshold, options.cor_threshold)
    results, skipped = estimate_all(ds, options, regression_covariates=selection.kept,
                                    n_threads=n_threads)
    if not results:
        raise DomainError("no outcome could be analysed")
    attrition = {"denominator": "students", "n_students": len(ds),
                 "distal_post": attrition_rate(ds, "distal_post")}
    if "prior_avg_cont_score" in ds.covariate_names:
        attrition["proximal_prior"] = attrition_rate(ds, "proximal_prior")
    return Report(results, skipped, balance, selection, options, loaded, attrition)


def _fmt(x) -> str:
    if isinstance(x, (bool, np.bool_)):
        return "true" if x else "false"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    x = float(x)
    return "NA" if math.isnan(x) else repr(x)


def _csv_text(columns, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for row in rows:
        w.writerow([v if isinstance(v, str) else _fmt(v) for v in (row[c] for c in columns)])
    return buf.getvalue()


def results_csv(report: Report) -> str:
    return _csv_text(RESULT_COLUMNS, report.result_rows())


def ci_plot_csv(report: Report) -> str:
    rows = [{"estimator": r.estimator, "outcome": r.outcome, "estimate": r.estimate,
             "ci_low": r.ci_low, "ci_high": r.ci_high, "min_se_in_group": flag}
            for r, flag in zip(report.results, report.min_se_flags())]
    return _csv_text(PLOT_COLUMNS, rows)


def results_markdown(report: Report) -> str:
    lines = ["| Perf. | Method | Est. | SE | p-value |", "|---|---|---:|---:|---:|"]
    previous = None
    for r, bold in zip(report.results, report.min_se_flags()):
        perf = _MD_PERF[r.outcome] if r.outcome != previous else ""
        previous = r.outcome
        se = f"{r.std_error:.4f}"
        lines.append(f"| {perf} | {_MD_METHOD[r.estimator]} | {r.estimate:.4f} | "
                     f"{'**' + se + '**' if bold else se} | {r.p_value:.4f} |")
    level = f"{100 * report.options.level:g}"
    lines += ["", "Smallest SE per group is in bold. "
              f"Intervals are {level}% (t reference for the t-test, normal otherwise)."]
    return "\n".join(lines) + "\n"


def _json_safe(obj):
    if isinstance(obj, dict):
        return {str(k): _json_safe(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_json_safe(v) for v in obj]
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        return None if math.isnan(obj) or math.isinf(obj) else float(obj)
    if obj is None or isinstance(obj, str):
        return obj
    return str(obj)


def provenance(report: Report, flags: dict | None = None) -> dict:
    ds = report.loaded.dataset
    sel = report.selection
    imputer = report.options.imputer_spec()
    out = {
        "version": __version__,
        "options": asdict(report.options),
        "flags": dict(flags or {}),
        "seeds": {"global": report.options.seed,
                  "loop_arm_models": "derived from (seed, arm)",
                  "cpt_permutations": "derived from (seed, permutation index)"},
        "input": {"source": report.loaded.source, "n_students": len(ds),
                  "n_treated": ds.n_treated, "n_control": ds.n_control,
                  "dataset": ds.provenance},
        "validation": report.loaded.validation,
        "cleaning": report.loaded.cleaning,
        "condition_summary": report.loaded.condition_summary,
        "attrition": report.attrition,
        "balance": None if report.balance is None else report.balance.as_dict(),
        "feature_selection": {
            "kept": list(sel.kept),
            "dropped_near_zero_variance": list(sel.dropped_near_zero_variance),
            "dropped_high_correlation": [{"covariate": n, "partner": p, "abs_r": r}
                                         for n, p, r in sel.dropped_high_correlation],
            "warnings": list(sel.warnings)},
        "skipped_outcomes": report.skipped,
        "estimates": [{**r.as_dict(), "details": _result_details(r)} for r in report.results],
        "decisions": {
            "t_test": "Welch" if report.options.welch else "pooled variance, t reference",
            "regression": "random intercept per class, REML, normal-approximation p-value, "
                          "covariates after feature selection",
            "loop": f"leave-one-out {imputer.kind} imputer on all covariates"
                    + (" plus class" if report.options.cluster_covariate else "")
                    + "; plug-in variance",
            "distal_adjusts_for_proximal": report.options.proximal_covariate,
            "attrition_denominator": "students",
        },
    }
    return _json_safe(out)


def _result_details(r):
    d = r.details
    keep = {k: d[k] for k in ("df", "welch", "n_missing_outcome", "converged") if k in d}
    fit = d.get("fit")
    if fit is not None:
        keep.update({"sigma_u2": fit.sigma_u2, "sigma2": fit.sigma2,
                     "dropped_columns": list(fit.dropped_columns), "n_groups": fit.n_groups})
    return keep


def write_report(report: Report, out_dir, flags: dict | None = None) -> dict:
    """Write the four artifacts; returns ``{name: path}``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    texts = {
        "results.csv": results_csv(report),
        "results.md": results_markdown(report),
        "ci_plot.csv": ci_plot_csv(report),
        "provenance.json": json.dumps(provenance(report, flags), sort_keys=True, indent=2,
                                      allow_nan=False) + "\n",
    }
    paths = {}
    for name, text in texts.items():
        p = out / name
        p.write_text(text, encoding="utf-8", newline="\n")
        paths[name] = p
    return paths
