"""Schemas for the eight experiment-export tables and the student-level dataset.

Log tables are held as pandas DataFrames whose columns follow the canonical
headers below. The student-level analysis table is a :class:`TrialDataset`,
a column-oriented, immutable container with one row per student.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from types import MappingProxyType
from typing import Iterable

import numpy as np
import pandas as pd

from .errors import DomainError, SchemaError

# exact enum members; strings are matched before any float conversion
CONTINUOUS_SCORES = (0.0, 0.33, 0.67, 1.0)
SCORE_STRINGS = {"0": 0.0, "0.0": 0.0, "0.33": 0.33, "0.67": 0.67, "1": 1.0, "1.0": 1.0}
ACTION_TYPES = ("start", "resume", "finish", "hint_request", "answer_submit")

PRIOR_COVARIATES = (
    "problems_assigned",
    "student_prior_median_first_response_time_task",
    "student_prior_median_time_on_task",
    "student_prior_problem_sets_completed",
    "student_prior_average_attempt_count",
    "student_prior_viewed_assignment_report_percent",
)

# column kinds:
#   id        non-empty string          opt_id   string or missing
#   int       integer                   count    integer >= 0
#   seconds   real >= 0                 opt_seconds
#   binary    integer in {0, 1}         score    continuous score enum
#   unit      real in [0, 1]            opt_unit real in [0, 1] or missing
#   real      finite real or missing    bool     true/false/1/0
#   action    action type               epoch_ms integer > 0
_PROBLEM_COLUMNS = {
    "student_id": "id",
    "assignment_id": "id",
    "problem_id": "id",
    "parent_problem_id": "opt_id",
    "condition": "int",
    "hint_count": "count",
    "attempt_count": "count",
    "time_on_task": "seconds",
    "discrete_score": "binary",
    "continuous_score": "score",
}
_SAME_SKILL_COLUMNS = {
    "student_id": "id",
    "avg_continuous_score": "opt_unit",
    "problem_count": "count",
}

SCHEMAS: dict[str, dict[str, str]] = {
    "action_logs": {
        "student_id": "id",
        "problem_id": "id",
        "action_type": "action",
        "timestamp": "epoch_ms",
    },
    "problem_logs": _PROBLEM_COLUMNS,
    "assignment_logs": {
        "student_id": "id",
        "assignment_id": "id",
        "class_id": "id",
        "teacher_id": "id",
        "total_time": "seconds",
        "total_attempts": "count",
        "total_hints": "count",
        "assignment_discrete_score": "unit",
    },
    "prior_logs": {
        "student_id": "id",
        "class_id": "id",
        "school_id": "opt_id",
        **{name: "real" for name in PRIOR_COVARIATES},
    },
    "same_skill_prior_logs": _SAME_SKILL_COLUMNS,
    "same_skill_post_logs": _SAME_SKILL_COLUMNS,
    "assignment_settings": {
        "assignment_id": "id",
        "time_limit": "opt_seconds",
        "redo_enabled": "bool",
    },
    "redo_logs": _PROBLEM_COLUMNS,
}
TABLE_NAMES = tuple(SCHEMAS)
REQUIRED_TABLES = ("problem_logs", "assignment_logs")
# columns that may be left out of the header entirely
OPTIONAL_COLUMNS = {"parent_problem_id", "school_id", "time_limit"}

_TRUE = {"true", "1", "yes", "t", "y"}
_FALSE = {"false", "0", "no", "f", "n"}


@dataclass(frozen=True)
class Violation:
    table: str
    line: int | None
    column: str | None
    message: str
    severity: str = "error"

    def as_dict(self):
        return {"table": self.table, "line": self.line, "column": self.column,
                "message": self.message, "severity": self.severity}


@dataclass(frozen=True)
class ProblemLogRow:
    student_id: str
    assignment_id: str
    problem_id: str
    parent_problem_id: str | None
    condition: int
    hint_count: int
    attempt_count: int
    time_on_task: float
    discrete_score: int
    continuous_score: float


@dataclass(frozen=True)
class StudentRecord:
    student_id: str
    arm: int
    assigned_prob: float
    proximal_outcome: float
    distal_outcome: float | None
    cluster_id: str
    covariates: MappingProxyType


def parse_score(text: str) -> float:
    """Map a continuous-score string onto its exact enum member."""
    try:
        return SCORE_STRINGS[text.strip()]
    except KeyError:
        raise ValueError(f"score {text!r} not in {{0,0.33,0.67,1.0}}") from None


def _line_numbers(df: pd.DataFrame) -> np.ndarray:
    if "_line" in df.columns:
        return df["_line"].to_numpy()
    # header is line 1
    return np.arange(2, len(df) + 2)


def coerce_table(name: str, raw: pd.DataFrame, file: str | None = None,
                 na_values: Iterable[str] = ()) -> tuple[pd.DataFrame, list[Violation]]:
    """Convert a string-valued frame into typed columns.

    Structural problems (a required column absent) raise :class:`SchemaError`;
    bad cells become ``NaN``/``None`` and are returned as violations.
    """
    schema = SCHEMAS[name]
    missing = [c for c in schema if c not in raw.columns and c not in OPTIONAL_COLUMNS]
    if missing:
        raise SchemaError(f"missing required column {missing[0]!r}", file=file or name,
                          column=missing[0])
    na = {""} | {v.strip() for v in na_values}
    lines = _line_numbers(raw)
    out = {}
    issues: list[Violation] = []

    def flag(mask, column, message):
        for ln in lines[np.asarray(mask)]:
            issues.append(Violation(name, int(ln), column, message))

    for col in raw.columns:
        if col == "_line":
            continue
        kind = schema.get(col)
        s = raw[col].astype(object).map(lambda v: "" if v is None else str(v).strip())
        is_na = s.isin(na).to_numpy()
        if kind is None:
            # extra columns: numeric ones become reals, others stay strings
            num = pd.to_numeric(s.where(~is_na), errors="coerce")
            if (num.notna().to_numpy() | is_na).all():
                out[col] = num.astype(float)
            else:
                out[col] = s.where(~is_na, None)
            continue
        if kind in ("id", "opt_id"):
            out[col] = s.where(~is_na, None)
            if kind == "id":
                flag(is_na, col, "empty id")
        elif kind == "score":
            mapped = s.map(SCORE_STRINGS)
            num = pd.to_numeric(s.where(~is_na), errors="coerce")
            bad = mapped.isna().to_numpy()
            flag(bad, col, "score not in {0,0.33,0.67,1.0}")
            out[col] = mapped.where(~bad, num).astype(float)
        elif kind == "bool":
            low = s.str.lower()
            val = low.map(lambda v: True if v in _TRUE else (False if v in _FALSE else None))
            flag(val.isna().to_numpy(), col, "not a boolean")
            out[col] = val
        elif kind == "action":
            out[col] = s.where(~is_na, None)
            flag(is_na, col, "empty action type")
        else:
            num = pd.to_numeric(s.where(~is_na), errors="coerce")
            unparsable = num.isna().to_numpy() & ~is_na
            flag(unparsable, col, "not a number")
            vals = num.to_numpy(dtype=float)
            optional = kind in ("real", "opt_seconds", "opt_unit")
            if not optional:
                flag(is_na, col, "missing value")
            with np.errstate(invalid="ignore"):
                if kind in ("int", "count", "binary", "epoch_ms"):
                    flag(np.isfinite(vals) & (vals != np.floor(vals)), col, "not an integer")
                if kind in ("count", "seconds", "opt_seconds"):
                    flag(vals < 0, col, "negative value")
                if kind == "binary":
                    flag(np.isfinite(vals) & ~np.isin(vals, (0.0, 1.0)), col, "not in {0,1}")
                if kind in ("unit", "opt_unit"):
                    flag((vals < 0) | (vals > 1), col, "outside [0,1]")
                if kind == "epoch_ms":
                    flag(vals <= 0, col, "timestamp must be positive")
                if kind == "real":
                    flag(np.isinf(vals), col, "not finite")
            out[col] = pd.Series(vals, index=raw.index)
    df = pd.DataFrame(out, index=raw.index)
    for col in OPTIONAL_COLUMNS & set(schema):
        if col not in df.columns:
            df[col] = None if schema[col].endswith("id") else np.nan
    if "_line" in raw.columns:
        df["_line"] = raw["_line"].to_numpy()
    return df.reset_index(drop=True), issues


@dataclass
class ValidationReport:
    row_counts: dict
    violations: list

    @property
    def errors(self):
        return [v for v in self.violations if v.severity == "error"]

    @property
    def warnings(self):
        return [v for v in self.violations if v.severity == "warning"]

    @property
    def ok(self) -> bool:
        return not self.errors

    def as_dict(self):
        return {
            "ok": self.ok,
            "row_counts": dict(self.row_counts),
            "n_errors": len(self.errors),
            "n_warnings": len(self.warnings),
            "violations": [v.as_dict() for v in self.violations],
        }


def validate_tables(tables) -> ValidationReport:
    """Check row-level invariants and cross-table keys of a :class:`LogTables`.

    Never mutates ``tables``. Cell-level parse problems recorded at load time
    are included first, then invariant checks on the typed values.
    """
    violations = list(getattr(tables, "parse_issues", ()))
    counts = {}
    for name in TABLE_NAMES:
        df = tables.get(name)
        counts[name] = None if df is None else int(len(df))
    for name in ("problem_logs", "redo_logs"):
        df = tables.get(name)
        if df is None:
            continue
        lines = _line_numbers(df)
        score = df["continuous_score"].to_numpy(dtype=float)
        on_enum = np.isin(score, CONTINUOUS_SCORES)
        # NaN scores were already flagged during parsing
        for ln in lines[~on_enum & np.isfinite(score)]:
            v = Violation(name, int(ln), "continuous_score", "score not in {0,0.33,0.67,1.0}")
            if v not in violations:
                violations.append(v)
        hints = df["hint_count"].to_numpy(dtype=float)
        bad = (hints >= 1) & (score > 0.67)
        for ln in lines[bad]:
            violations.append(Violation(name, int(ln), "continuous_score",
                                        "hint requested but score above 0.67"))
    for name in ("same_skill_prior_logs", "same_skill_post_logs"):
        df = tables.get(name)
        if df is None:
            continue
        lines = _line_numbers(df)
        miss = df["avg_continuous_score"].isna().to_numpy()
        zero = df["problem_count"].to_numpy(dtype=float) == 0
        for ln in lines[miss != zero]:
            violations.append(Violation(name, int(ln), "avg_continuous_score",
                                        "score missing must coincide with problem_count = 0"))
    problems = tables.get("problem_logs")
    assignments = tables.get("assignment_logs")
    if problems is not None and assignments is not None:
        known = set(zip(assignments["student_id"], assignments["assignment_id"]))
        keys = list(zip(problems["student_id"], problems["assignment_id"]))
        lines = _line_numbers(problems)
        for ln, key in zip(lines, keys):
            if key not in known:
                violations.append(Violation(
                    "problem_logs", int(ln), "assignment_id",
                    f"orphan key: no assignment row for student {key[0]!r}, "
                    f"assignment {key[1]!r}", "warning"))
    redo = tables.get("redo_logs")
    if redo is not None and len(redo):
        settings = tables.get("assignment_settings")
        enabled = set()
        if settings is not None:
            enabled = set(settings.loc[settings["redo_enabled"] == True, "assignment_id"])  # noqa: E712
        lines = _line_numbers(redo)
        for ln, aid in zip(lines, redo["assignment_id"]):
            if aid not in enabled:
                violations.append(Violation("redo_logs", int(ln), "assignment_id",
                                            "redo row for assignment without redo enabled",
                                            "warning"))
    return ValidationReport(counts, violations)


def _canonical_categories(values) -> tuple[np.ndarray, tuple]:
    labels = np.asarray([None if v is None or (isinstance(v, float) and math.isnan(v))
                         else str(v) for v in values], dtype=object)
    present = sorted({v for v in labels if v is not None})
    lookup = {v: i for i, v in enumerate(present)}
    codes = np.array([np.nan if v is None else lookup[v] for v in labels], dtype=float)
    return codes, tuple(present)


@dataclass(frozen=True, eq=False)
class TrialDataset:
    """Student-level analysis table.

    ``covariates`` is an ``(n, q)`` float matrix ordered like
    ``covariate_names``; missing cells are NaN. Columns listed in
    ``categorical`` hold integer codes into ``categories[name]``.
    """

    student_id: np.ndarray
    arm: np.ndarray
    assigned_prob: np.ndarray
    proximal_outcome: np.ndarray
    distal_outcome: np.ndarray
    cluster_id: np.ndarray
    covariates: np.ndarray
    covariate_names: tuple
    categorical: tuple = ()
    categories: dict = field(default_factory=dict)
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        n = len(self.student_id)
        set_ = object.__setattr__
        set_(self, "student_id", np.asarray([str(s) for s in self.student_id], dtype=object))
        set_(self, "arm", np.asarray(self.arm, dtype=np.int64).reshape(n))
        p = np.broadcast_to(np.asarray(self.assigned_prob, dtype=float), (n,)).copy()
        set_(self, "assigned_prob", p)
        set_(self, "proximal_outcome", np.asarray(self.proximal_outcome, dtype=float).reshape(n))
        set_(self, "distal_outcome", np.asarray(self.distal_outcome, dtype=float).reshape(n))
        set_(self, "cluster_id", np.asarray([str(c) for c in self.cluster_id], dtype=object))
        X = np.asarray(self.covariates, dtype=float).reshape(n, len(self.covariate_names))
        set_(self, "covariates", X)
        set_(self, "covariate_names", tuple(self.covariate_names))
        set_(self, "categorical", tuple(self.categorical))
        set_(self, "categories", {k: tuple(v) for k, v in self.categories.items()})
        for arr in (self.arm, self.assigned_prob, self.proximal_outcome,
                    self.distal_outcome, self.covariates):
            arr.setflags(write=False)

        if len(set(self.student_id)) != n:
            raise DomainError("duplicate student_id in dataset")
        if len(set(self.covariate_names)) != len(self.covariate_names):
            raise DomainError("duplicate covariate name")
        if not np.isin(self.arm, (0, 1)).all():
            raise DomainError("arm must be 0 or 1")
        if n and not ((self.arm == 1).any() and (self.arm == 0).any()):
            raise DomainError("both arms must be nonempty")
        if not ((p > 0) & (p < 1)).all():
            raise DomainError("assigned_prob must lie strictly between 0 and 1")
        if not np.isfinite(self.proximal_outcome).all():
            raise DomainError("proximal_outcome must be finite")
        unknown = set(self.categorical) - set(self.covariate_names)
        if unknown:
            raise DomainError(f"categorical names not among covariates: {sorted(unknown)}")
        for name in self.categorical:
            col = X[:, self.covariate_names.index(name)]
            k = len(self.categories.get(name, ()))
            ok = np.isnan(col) | ((col >= 0) & (col < k) & (col == np.floor(col)))
            if not ok.all():
                raise DomainError(f"categorical column {name!r} holds invalid codes")

    def __len__(self):
        return len(self.student_id)

    @property
    def n_treated(self) -> int:
        return int((self.arm == 1).sum())

    @property
    def n_control(self) -> int:
        return int((self.arm == 0).sum())

    @property
    def records(self) -> list[StudentRecord]:
        out = []
        for i in range(len(self)):
            cov = {}
            for j, name in enumerate(self.covariate_names):
                v = self.covariates[i, j]
                if name in self.categorical and not np.isnan(v):
                    v = self.categories[name][int(v)]
                cov[name] = v
            d = self.distal_outcome[i]
            out.append(StudentRecord(
                self.student_id[i], int(self.arm[i]), float(self.assigned_prob[i]),
                float(self.proximal_outcome[i]), None if np.isnan(d) else float(d),
                self.cluster_id[i], MappingProxyType(cov)))
        return out

    def outcome(self, which: str) -> np.ndarray:
        if which == "proximal":
            return self.proximal_outcome
        if which == "distal":
            return self.distal_outcome
        raise ValueError(f"unknown outcome {which!r}")

    def column(self, name: str) -> np.ndarray:
        return self.covariates[:, self.covariate_names.index(name)]

    def subset(self, mask) -> "TrialDataset":
        mask = np.asarray(mask)
        cov = self.covariates[mask]
        return TrialDataset(
            self.student_id[mask], self.arm[mask], self.assigned_prob[mask],
            self.proximal_outcome[mask], self.distal_outcome[mask], self.cluster_id[mask],
            cov, self.covariate_names, self.categorical, self.categories, dict(self.provenance))

    def replace(self, **changes) -> "TrialDataset":
        fields = dict(
            student_id=self.student_id, arm=self.arm, assigned_prob=self.assigned_prob,
            proximal_outcome=self.proximal_outcome, distal_outcome=self.distal_outcome,
            cluster_id=self.cluster_id, covariates=self.covariates,
            covariate_names=self.covariate_names, categorical=self.categorical,
            categories=self.categories, provenance=dict(self.provenance))
        fields.update(changes)
        return TrialDataset(**fields)

    def select_covariates(self, names) -> "TrialDataset":
        names = tuple(names)
        idx = [self.covariate_names.index(n) for n in names]
        cat = tuple(n for n in self.categorical if n in names)
        return self.replace(covariates=self.covariates[:, idx], covariate_names=names,
                            categorical=cat,
                            categories={k: v for k, v in self.categories.items() if k in cat})

    @classmethod
    def from_columns(cls, student_id, arm, assigned_prob, proximal_outcome, cluster_id,
                     covariates: dict | None = None, distal_outcome=None,
                     categorical=(), provenance=None) -> "TrialDataset":
        """Build from a mapping of covariate name to values.

        Categorical covariates may hold arbitrary labels; they are encoded
        against their sorted distinct labels.
        """
        n = len(student_id)
        covariates = covariates or {}
        names = tuple(covariates)
        X = np.empty((n, len(names)))
        cats = {}
        for j, name in enumerate(names):
            if name in categorical:
                X[:, j], cats[name] = _canonical_categories(covariates[name])
            else:
                X[:, j] = np.asarray(covariates[name], dtype=float)
        if distal_outcome is None:
            distal_outcome = np.full(n, np.nan)
        return cls(student_id, arm, assigned_prob, proximal_outcome, distal_outcome,
                   cluster_id, X, names, tuple(categorical), cats, provenance or {})


ANALYSIS_BASE_COLUMNS = ("student_id", "arm", "assigned_prob", "proximal_outcome",
                         "distal_outcome", "cluster_id")


def _fmt(v: float) -> str:
    return "" if np.isnan(v) else repr(float(v))


def write_analysis_csv(dataset: TrialDataset, path_or_buf) -> None:
    """Write the canonical analysis CSV.

    Numeric covariates appear as ``x:<name>`` and categorical ones as
    ``c:<name>`` holding their labels. Reals are written with ``repr`` so
    they read back bit-identically; missing cells are empty.
    """
    header = list(ANALYSIS_BASE_COLUMNS)
    for name in dataset.covariate_names:
        header.append(("c:" if name in dataset.categorical else "x:") + name)
    rows = []
    for i in range(len(dataset)):
        row = [dataset.student_id[i], str(int(dataset.arm[i])), _fmt(dataset.assigned_prob[i]),
               _fmt(dataset.proximal_outcome[i]), _fmt(dataset.distal_outcome[i]),
               dataset.cluster_id[i]]
        for j, name in enumerate(dataset.covariate_names):
            v = dataset.covariates[i, j]
            if name in dataset.categorical:
                row.append("" if np.isnan(v) else dataset.categories[name][int(v)])
            else:
                row.append(_fmt(v))
        rows.append(row)

    def emit(fh):
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)

    if hasattr(path_or_buf, "write"):
        emit(path_or_buf)
    else:
        with open(path_or_buf, "w", newline="", encoding="utf-8") as fh:
            emit(fh)


def read_analysis_csv(path_or_buf, provenance=None) -> TrialDataset:
    if hasattr(path_or_buf, "read"):
        text = path_or_buf.read()
    else:
        with open(path_or_buf, newline="", encoding="utf-8") as fh:
            text = fh.read()
    reader = csv.reader(io.StringIO(text), strict=True)
    try:
        header = next(reader)
    except StopIteration:
        raise SchemaError("empty analysis table", file=str(path_or_buf)) from None
    for col in ANALYSIS_BASE_COLUMNS:
        if col not in header:
            raise SchemaError(f"missing required column {col!r}", file=str(path_or_buf), column=col)
    body = []
    for row in reader:
        if len(row) != len(header):
            raise SchemaError(f"expected {len(header)} fields, got {len(row)}",
                              file=str(path_or_buf), line=reader.line_num)
        body.append(row)
    cols = {h: [r[k] for r in body] for k, h in enumerate(header)}

    def reals(values):
        return np.array([np.nan if v == "" else float(v) for v in values], dtype=float)

    covs = {}
    categorical = []
    for h in header:
        if h.startswith("x:"):
            covs[h[2:]] = reals(cols[h])
        elif h.startswith("c:"):
            covs[h[2:]] = [None if v == "" else v for v in cols[h]]
            categorical.append(h[2:])
    return TrialDataset.from_columns(
        cols["student_id"], [int(a) for a in cols["arm"]], reals(cols["assigned_prob"]),
        reals(cols["proximal_outcome"]), cols["cluster_id"], covs,
        distal_outcome=reals(cols["distal_outcome"]), categorical=tuple(categorical),
        provenance=provenance)
