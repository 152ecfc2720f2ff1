"""Loading an experiment export and joining it into a :class:`TrialDataset`."""
from __future__ import annotations

import csv
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

from .data_model import REQUIRED_TABLES, SCHEMAS, TABLE_NAMES, TrialDataset, coerce_table
from .errors import ConflictingAssignment, DomainError, MissingRequiredFile, SchemaError

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class HeaderMapping:
    """Renames for exported headers plus extra missing-value markers.

    File format, one ``key=value`` per line, ``#`` starts a comment::

        na_values = NA, null
        problem_logs.file = problem_logs_export.csv
        user_xid = student_id              # every table
        assignment_logs:class_xid = class_id   # one table only
    """

    columns: dict = field(default_factory=dict)
    table_columns: dict = field(default_factory=dict)
    files: dict = field(default_factory=dict)
    na_values: tuple = ()

    @classmethod
    def parse(cls, text: str) -> "HeaderMapping":
        columns, table_columns, files, na = {}, {}, {}, ()
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise SchemaError("expected key=value", file="mapping", line=lineno)
            key, value = (s.strip() for s in line.split("=", 1))
            if key == "na_values":
                na = tuple(v.strip() for v in value.split(",") if v.strip())
            elif key.endswith(".file") and key[:-5] in SCHEMAS:
                files[key[:-5]] = value
            elif ":" in key:
                table, src = key.split(":", 1)
                if table not in SCHEMAS:
                    raise SchemaError(f"unknown table {table!r}", file="mapping", line=lineno)
                table_columns.setdefault(table, {})[src.strip()] = value
            else:
                columns[key] = value
        return cls(columns, table_columns, files, na)

    @classmethod
    def read(cls, path) -> "HeaderMapping":
        return cls.parse(Path(path).read_text(encoding="utf-8"))

    def rename(self, table: str, header: list[str]) -> list[str]:
        scoped = self.table_columns.get(table, {})
        return [scoped.get(h, self.columns.get(h, h)) for h in header]


@dataclass(frozen=True, eq=False)
class LogTables:
    """The eight export tables; absent optional tables are ``None``."""

    problem_logs: pd.DataFrame
    assignment_logs: pd.DataFrame
    action_logs: pd.DataFrame | None = None
    prior_logs: pd.DataFrame | None = None
    same_skill_prior_logs: pd.DataFrame | None = None
    same_skill_post_logs: pd.DataFrame | None = None
    assignment_settings: pd.DataFrame | None = None
    redo_logs: pd.DataFrame | None = None
    parse_issues: tuple = ()

    def get(self, name: str):
        return getattr(self, name)

    @property
    def present(self) -> tuple:
        return tuple(n for n in TABLE_NAMES if self.get(n) is not None)

    def replace(self, **changes) -> "LogTables":
        kw = {n: self.get(n) for n in TABLE_NAMES}
        kw["parse_issues"] = self.parse_issues
        kw.update(changes)
        return LogTables(**kw)

    @classmethod
    def from_frames(cls, **frames) -> "LogTables":
        """Type string- or value-valued frames (handy for tests)."""
        typed, issues = {}, []
        for name, df in frames.items():
            if df is None:
                continue
            t, found = coerce_table(name, df.astype(object).where(df.notna(), ""))
            typed[name] = t
            issues.extend(found)
        return cls(**typed, parse_issues=tuple(issues))


def read_csv_strict(path, table: str, mapping: HeaderMapping | None = None) -> pd.DataFrame:
    """Read an RFC-4180 CSV into a string frame with a ``_line`` column.

    Raises :class:`SchemaError` naming the physical line of a malformed
    record or a record with the wrong number of fields.
    """
    mapping = mapping or HeaderMapping()
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh, strict=True)
        try:
            header = next(reader)
        except StopIteration:
            raise SchemaError("missing header row", file=str(path), line=1) from None
        except csv.Error as exc:
            raise SchemaError(f"malformed CSV: {exc}", file=str(path), line=reader.line_num) from None
        header = mapping.rename(table, [h.strip().lstrip("﻿") for h in header])
        if len(set(header)) != len(header):
            raise SchemaError("duplicate column in header", file=str(path), line=1)
        rows, lines = [], []
        while True:
            try:
                row = next(reader)
            except StopIteration:
                break
            except csv.Error as exc:
                raise SchemaError(f"malformed CSV: {exc}", file=str(path),
                                  line=reader.line_num) from None
            if not row:
                continue
            if len(row) != len(header):
                raise SchemaError(f"expected {len(header)} fields, got {len(row)}",
                                  file=str(path), line=reader.line_num)
            rows.append(row)
            lines.append(reader.line_num)
    df = pd.DataFrame(rows, columns=header, dtype=object)
    df["_line"] = np.asarray(lines, dtype=np.int64)
    return df


def _table_path(directory: Path, name: str, mapping: HeaderMapping) -> Path | None:
    if name in mapping.files:
        p = directory / mapping.files[name]
        return p if p.exists() else None
    p = directory / f"{name}.csv"
    return p if p.exists() else None


def load_tables(directory, mapping: HeaderMapping | str | Path | None = None,
                n_threads: int = 1) -> LogTables:
    """Parse the export directory into typed :class:`LogTables`.

    Only ``problem_logs.csv`` and ``assignment_logs.csv`` are required.
    """
    directory = Path(directory)
    if mapping is None:
        mapping = HeaderMapping()
    elif not isinstance(mapping, HeaderMapping):
        mapping = HeaderMapping.read(mapping)
    paths = {name: _table_path(directory, name, mapping) for name in TABLE_NAMES}
    for name in REQUIRED_TABLES:
        if paths[name] is None:
            raise MissingRequiredFile(f"{name}.csv not found in {directory}")

    def load(name):
        raw = read_csv_strict(paths[name], name, mapping)
        return coerce_table(name, raw, file=str(paths[name]), na_values=mapping.na_values)

    names = [n for n in TABLE_NAMES if paths[n] is not None]
    with ThreadPoolExecutor(max_workers=max(1, n_threads)) as pool:
        loaded = list(pool.map(load, names))
    typed, issues = {}, []
    for name, (df, found) in zip(names, loaded):
        typed[name] = df
        issues.extend(found)
        log.info("loaded %s: %d rows", name, len(df))
    return LogTables(**typed, parse_issues=tuple(issues))


def _mode(values: pd.Series) -> str:
    counts = values.value_counts()
    top = counts[counts == counts.max()].index
    return sorted(str(v) for v in top)[0]


def build_analysis_table(tables: LogTables, treatment_arm_code: int = 1,
                         control_arm_code: int = 0, assigned_prob: float = 0.5,
                         provenance: dict | None = None) -> TrialDataset:
    """Join the cleaned logs into one row per student.

    The proximal outcome pools every experiment problem a student answered,
    across all of their assignments. Covariates are the numeric columns of
    ``prior_logs`` plus ``prior_avg_cont_score`` from the same-skill prior
    table; the cluster is the student's (modal) ``class_id``.
    """
    if treatment_arm_code == control_arm_code:
        raise DomainError("treatment and control codes must differ")
    if not 0 < assigned_prob < 1:
        raise DomainError("assigned_prob must lie strictly between 0 and 1")
    problems = tables.problem_logs
    assignments = tables.assignment_logs
    all_students = sorted(set(problems["student_id"].dropna()))
    dropped: dict[str, list[str]] = {}

    codes = problems.groupby("student_id")["condition"].agg(lambda s: frozenset(s.dropna()))
    treat, ctrl = float(treatment_arm_code), float(control_arm_code)
    both = sorted(s for s, c in codes.items() if treat in c and ctrl in c)
    if both:
        raise ConflictingAssignment(
            f"{len(both)} student(s) appear under both arm codes, e.g. {both[0]!r}")
    arm_of = {}
    for s, c in codes.items():
        if treat in c:
            arm_of[s] = 1
        elif ctrl in c:
            arm_of[s] = 0
        else:
            dropped.setdefault("arm code not analysed", []).append(s)

    known = set(assignments["student_id"])
    for s in list(arm_of):
        if s not in known:
            dropped.setdefault("missing from assignment_logs", []).append(s)
            del arm_of[s]

    rows = problems[problems["student_id"].isin(arm_of)
                    & problems["condition"].isin([treat, ctrl])]
    rows = rows[np.isfinite(rows["continuous_score"].to_numpy(dtype=float))]
    proximal = rows.groupby("student_id")["continuous_score"].mean()
    for s in list(arm_of):
        if s not in proximal.index:
            dropped.setdefault("no scored experiment problems", []).append(s)
            del arm_of[s]

    ids = sorted(arm_of)
    n = len(ids)
    cluster = assignments[assignments["student_id"].isin(arm_of)].groupby("student_id")["class_id"].agg(_mode)

    def lookup(table, column):
        if table is None or column not in table.columns:
            return np.full(n, np.nan)
        s = table.drop_duplicates("student_id", keep="first").set_index("student_id")[column]
        return s.reindex(ids).to_numpy(dtype=float)

    covs = {}
    prior = tables.prior_logs
    if prior is not None:
        skip = {"student_id", "class_id", "school_id", "_line"}
        for col in prior.columns:
            if col not in skip and pd.api.types.is_float_dtype(prior[col]):
                covs[col] = lookup(prior, col)
    covs["prior_avg_cont_score"] = lookup(tables.same_skill_prior_logs, "avg_continuous_score")
    distal = lookup(tables.same_skill_post_logs, "avg_continuous_score")

    prov = dict(provenance or {})
    prov.update({
        "treatment_arm_code": int(treatment_arm_code),
        "control_arm_code": int(control_arm_code),
        "assigned_prob": float(assigned_prob),
        "students_in_problem_logs": len(all_students),
        "students_retained": n,
        "students_dropped": {k: sorted(v) for k, v in sorted(dropped.items())},
    })
    ds = TrialDataset.from_columns(
        ids, [arm_of[s] for s in ids], assigned_prob, proximal.reindex(ids).to_numpy(dtype=float),
        cluster.reindex(ids).to_numpy(dtype=object), covs, distal_outcome=distal, provenance=prov)
    if not ((ds.proximal_outcome >= 0) & (ds.proximal_outcome <= 1)).all():
        raise DomainError("proximal outcome outside [0, 1]")
    return ds

