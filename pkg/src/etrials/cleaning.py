"""Row filters applied to the problem logs before analysis, plus summaries.

Each filter takes and returns a problem-log frame and, when handed a
:class:`CleaningLedger`, records exactly which rows and students it removed.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from .data_model import TrialDataset
from .errors import DomainError

log = logging.getLogger(__name__)

SAFETY_NOTE = (
    "Help-requester subsetting is assignment-independent: the Get Help button "
    "is shown before the condition-specific support is revealed, so the same "
    "students would request help under any assignment."
)


@dataclass
class CleaningStep:
    name: str
    rows_in: int
    rows_out: int
    students_in: int
    students_out: int
    removed_students: list
    removed_lines: list
    note: str = ""
    details: dict = field(default_factory=dict)

    @property
    def rows_removed(self) -> int:
        return self.rows_in - self.rows_out

    @property
    def students_removed(self) -> int:
        return len(self.removed_students)

    def as_dict(self):
        return {
            "step": self.name,
            "rows_in": self.rows_in,
            "rows_out": self.rows_out,
            "rows_removed": self.rows_removed,
            "students_in": self.students_in,
            "students_out": self.students_out,
            "students_removed": self.students_removed,
            "removed_students": list(self.removed_students),
            "note": self.note,
            **self.details,
        }


@dataclass
class CleaningLedger:
    steps: list = field(default_factory=list)

    def record(self, name, before: pd.DataFrame, after: pd.DataFrame, note=""):
        s_before = set(before["student_id"])
        s_after = set(after["student_id"])
        kept = set(after.index)
        gone = [i for i in before.index if i not in kept]
        if "_line" in before.columns:
            lines = [int(x) for x in before.loc[gone, "_line"]]
        else:
            lines = [int(i) for i in gone]
        step = CleaningStep(name, len(before), len(after), len(s_before), len(s_after),
                            sorted(s_before - s_after), lines, note)
        self.steps.append(step)
        return step

    def as_dict(self):
        return [s.as_dict() for s in self.steps]


def drop_best_so_far(problem_logs: pd.DataFrame, best_so_far_code: int = 2,
                     ledger: CleaningLedger | None = None) -> pd.DataFrame:
    """Remove every row served under the platform's default condition."""
    out = problem_logs[problem_logs["condition"] != best_so_far_code]
    if len(problem_logs) and out.empty:
        log.warning("every problem row carried condition %s; table is now empty", best_so_far_code)
    if ledger is not None:
        ledger.record("drop_best_so_far", problem_logs, out,
                      f"condition code {best_so_far_code} removed")
    return out


def help_requesters(problem_logs: pd.DataFrame, action_logs: pd.DataFrame | None = None) -> set:
    """Students with at least one hint on an experiment problem.

    Problem-log hint counts and ``hint_request`` actions on the same
    (student, problem) pairs are combined by union.
    """
    hints = problem_logs.groupby("student_id")["hint_count"].sum()
    found = set(hints.index[hints >= 1])
    if action_logs is not None and len(action_logs):
        pairs = set(zip(problem_logs["student_id"], problem_logs["problem_id"]))
        req = action_logs[action_logs["action_type"] == "hint_request"]
        found |= {s for s, p in zip(req["student_id"], req["problem_id"]) if (s, p) in pairs}
    return found


def restrict_to_help_requesters(problem_logs: pd.DataFrame, action_logs: pd.DataFrame | None = None,
                                ledger: CleaningLedger | None = None) -> pd.DataFrame:
    keep = help_requesters(problem_logs, action_logs)
    out = problem_logs[problem_logs["student_id"].isin(keep)]
    if ledger is not None:
        mode = "hint_count or hint_request actions" if action_logs is not None else "hint_count"
        ledger.record("restrict_to_help_requesters", problem_logs, out,
                      f"kept students with >= 1 hint ({mode}). {SAFETY_NOTE}")
    return out


def flatten_subproblems(problem_logs: pd.DataFrame,
                        ledger: CleaningLedger | None = None) -> pd.DataFrame:
    """Keep sub-problems as standalone problems and drop the parent link."""
    is_sub = problem_logs["parent_problem_id"].notna()
    out = problem_logs.copy()
    out["parent_problem_id"] = None
    if ledger is not None:
        step = ledger.record("flatten_subproblems", problem_logs, out,
                             f"{int(is_sub.sum())} sub-problem rows kept as independent problems")
        step.details["subproblem_rows"] = int(is_sub.sum())
    return out


def students_with_multiple_conditions(problem_logs: pd.DataFrame) -> list:
    n = problem_logs.groupby("student_id")["condition"].nunique()
    return sorted(n.index[n > 1])


def clean_problem_logs(problem_logs: pd.DataFrame, action_logs=None, best_so_far_code: int | None = 2,
                       require_hint: bool = True, ledger: CleaningLedger | None = None) -> pd.DataFrame:
    """The full filter sequence: best-so-far, help requesters, sub-problems."""
    ledger = ledger if ledger is not None else CleaningLedger()
    out = problem_logs
    if best_so_far_code is not None:
        out = drop_best_so_far(out, best_so_far_code, ledger)
    if require_hint:
        out = restrict_to_help_requesters(out, action_logs, ledger)
    out = flatten_subproblems(out, ledger)
    multi = students_with_multiple_conditions(out)
    if multi:
        log.warning("%d student(s) appear under more than one condition", len(multi))
    return out


ATTRITION_OUTCOMES = {"proximal_prior": "prior_avg_cont_score", "distal_post": None}


def attrition_rate(dataset: TrialDataset, outcome: str = "distal_post") -> float:
    """Share of students whose chosen score variable is missing.

    ``proximal_prior`` looks at the same-skill prior score covariate,
    ``distal_post`` at the same-skill post score. The denominator is the
    number of students in ``dataset``.
    """
    if outcome not in ATTRITION_OUTCOMES:
        raise ValueError(f"outcome must be one of {sorted(ATTRITION_OUTCOMES)}")
    n = len(dataset)
    if n == 0:
        raise DomainError("attrition rate of an empty dataset is undefined")
    if outcome == "distal_post":
        values = dataset.distal_outcome
    else:
        values = dataset.column(ATTRITION_OUTCOMES[outcome])
    return int(np.isnan(values).sum()) / n


def summarize_conditions(problem_logs: pd.DataFrame, dataset: TrialDataset | None = None,
                         ddof: int = 1, attrition_outcome: str = "distal_post") -> pd.DataFrame:
    """Per-condition counts and continuous-score moments.

    Mean and standard deviation are taken over problem rows; ``ddof=1`` gives
    the sample standard deviation, ``ddof=0`` the population one. Average
    problems assigned is problem rows per (student, assignment) pair. When
    ``dataset`` is given an attrition column is added for the two analysed
    arm codes.
    """
    rows = []
    for code, g in problem_logs.groupby("condition", sort=True):
        scores = g["continuous_score"].to_numpy(dtype=float)
        scores = scores[np.isfinite(scores)]
        n_assign = len(set(zip(g["student_id"], g["assignment_id"])))
        if len(scores) - ddof > 0:
            sd = float(np.std(scores, ddof=ddof))
        else:
            sd = float("nan")
        rows.append({
            "condition": int(code),
            "student_count": int(g["student_id"].nunique()),
            "assignment_count": n_assign,
            "mean": float(np.mean(scores)) if len(scores) else float("nan"),
            "sd": sd,
            "avg_problems_assigned": len(g) / n_assign if n_assign else float("nan"),
        })
    out = pd.DataFrame(rows, columns=["condition", "student_count", "assignment_count", "mean",
                                      "sd", "avg_problems_assigned"])
    if dataset is not None:
        prov = dataset.provenance
        arm_for = {prov.get("treatment_arm_code", 1): 1, prov.get("control_arm_code", 0): 0}
        att = []
        for code in out["condition"]:
            if code in arm_for:
                sub = dataset.arm == arm_for[code]
                if sub.any():
                    att.append(attrition_rate(_arm_view(dataset, sub), attrition_outcome))
                    continue
            att.append(float("nan"))
        out["attrition_rate"] = att
    return out


class _ArmView:
    """Minimal stand-in exposing what :func:`attrition_rate` reads."""

    def __init__(self, dataset, mask):
        self.distal_outcome = dataset.distal_outcome[mask]
        self._d = dataset
        self._m = mask

    def __len__(self):
        return int(self._m.sum())

    def column(self, name):
        return self._d.column(name)[self._m]


def _arm_view(dataset, mask):
    # single-arm subsets cannot be TrialDatasets (both arms required)
    return _ArmView(dataset, mask)
