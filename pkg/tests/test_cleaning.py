import logging

import numpy as np
import pandas as pd
import pytest
from helpers import build_three_arm_export

from etrials import DomainError, TrialDataset, build_analysis_table, load_tables
from etrials.cleaning import (CleaningLedger, attrition_rate, clean_problem_logs, drop_best_so_far,
                              flatten_subproblems, help_requesters, restrict_to_help_requesters,
                              summarize_conditions)
from etrials.data_model import SCHEMAS, coerce_table


def _logs(rows):
    raw = pd.DataFrame([[str(v) for v in r] for r in rows], columns=list(SCHEMAS["problem_logs"]))
    raw = raw.replace("", None)
    df, issues = coerce_table("problem_logs", raw)
    assert not issues
    return df


def _row(student, cond, hints=0, score="0.67", problem="p1", parent=""):
    return [student, f"a_{student}", problem, parent, cond, hints, 1, 30, int(hints == 0), score]


def test_best_so_far_rows_removed():
    df = _logs([_row("s1", 0), _row("s2", 1), _row("s3", 2), _row("s4", 2)])
    ledger = CleaningLedger()
    out = drop_best_so_far(df, 2, ledger)
    assert set(out["condition"]) == {0, 1}
    assert ledger.steps[0].rows_removed == 2
    assert ledger.steps[0].removed_students == ["s3", "s4"]


def test_best_so_far_absent_is_identity():
    df = _logs([_row("s1", 0), _row("s2", 1)])
    assert drop_best_so_far(df, 2).equals(df)


def test_all_best_so_far_gives_empty_table_and_warning(caplog):
    df = _logs([_row("s1", 2), _row("s2", 2)])
    with caplog.at_level(logging.WARNING, logger="etrials.cleaning"):
        out = drop_best_so_far(df, 2)
    assert out.empty
    assert "empty" in caplog.text


def test_never_hinting_student_removed():
    df = _logs([_row("s1", 0, 0, problem="p1"), _row("s1", 0, 0, problem="p2"),
                _row("s1", 0, 0, problem="p3"), _row("s2", 1, 1, "0.33")])
    out = restrict_to_help_requesters(df)
    assert set(out["student_id"]) == {"s2"}


def test_hint_seen_only_in_action_logs_is_kept():
    df = _logs([_row("s1", 0, 0), _row("s2", 1, 1, "0.33")])
    actions = pd.DataFrame({"student_id": ["s1", "s3"], "problem_id": ["p1", "p1"],
                            "action_type": ["hint_request", "hint_request"], "timestamp": [1, 2]})
    assert help_requesters(df) == {"s2"}
    assert help_requesters(df, actions) == {"s1", "s2"}
    # actions on problems outside the experiment do not count
    assert "s3" not in help_requesters(df, actions)


def test_subproblems_become_standalone_rows():
    df = _logs([_row("s1", 0, 1, "0.33", "P1"), _row("s1", 0, 0, "1", "P1a", "P1"),
                _row("s1", 0, 0, "1", "P1b", "P1")])
    ledger = CleaningLedger()
    out = flatten_subproblems(df, ledger)
    assert len(out) == 3
    assert out["parent_problem_id"].isna().all()
    assert ledger.steps[0].details["subproblem_rows"] == 2
    plain = _logs([_row("s1", 0, 1, "0.33")])
    assert flatten_subproblems(plain)[list(SCHEMAS["problem_logs"])].equals(plain[list(SCHEMAS["problem_logs"])])


def _mixed_fixture():
    rows = []
    for k in range(30):
        rows.append(_row(f"s{k}", k % 3, hints=int(k % 4 == 0), score="0" if k % 4 == 0 else "1",
                         problem=f"p{k % 5}"))
        rows.append(_row(f"s{k}", k % 3, hints=0, score="0.67", problem=f"q{k % 2}"))
    return _logs(rows)


def test_filters_commute():
    df = _mixed_fixture()
    a = restrict_to_help_requesters(drop_best_so_far(df, 2))
    b = drop_best_so_far(restrict_to_help_requesters(df), 2)
    assert a.equals(b)


def test_filters_are_idempotent():
    df = _mixed_fixture()
    once = drop_best_so_far(df, 2)
    assert drop_best_so_far(once, 2).equals(once)
    once = restrict_to_help_requesters(df)
    assert restrict_to_help_requesters(once).equals(once)
    once = flatten_subproblems(df)
    assert flatten_subproblems(once).equals(once)


def test_ledger_accounts_for_every_row():
    df = _mixed_fixture()
    ledger = CleaningLedger()
    out = clean_problem_logs(df, ledger=ledger)
    removed = sum(len(s.removed_lines) for s in ledger.steps)
    assert len(out) + removed == len(df)
    gone = set().union(*(s.removed_students for s in ledger.steps))
    assert gone | set(out["student_id"]) == set(df["student_id"])
    assert not gone & set(out["student_id"])


def _missing_distal(n, k):
    distal = np.ones(n)
    distal[:k] = np.nan
    return TrialDataset.from_columns(np.arange(n).astype(str), np.arange(n) % 2, 0.5,
                                     np.zeros(n), ["c"] * n, {}, distal_outcome=distal)


@pytest.mark.parametrize("n,k,expected", [(1000, 5, 0.005), (1000, 0, 0.0),
                                          (25000, 1, 0.00004), (20000, 1, 0.00005)])
def test_attrition_exact_fraction(n, k, expected):
    assert attrition_rate(_missing_distal(n, k)) == expected


def test_attrition_prior_score_variable():
    ds = TrialDataset.from_columns(["a", "b", "c", "d"], [1, 0, 1, 0], 0.5, [0, 1, 0, 1],
                                   ["k"] * 4, {"prior_avg_cont_score": [np.nan, 0.5, 0.2, 1.0]})
    assert attrition_rate(ds, "proximal_prior") == 0.25
    with pytest.raises(ValueError):
        attrition_rate(ds, "elsewhere")


def test_single_score_summary():
    s = summarize_conditions(_logs([_row("s1", 0, 0, "1.0")]), ddof=0)
    assert s["mean"].iloc[0] == 1.0 and s["sd"].iloc[0] == 0.0
    assert np.isnan(summarize_conditions(_logs([_row("s1", 0, 0, "1.0")]))["sd"].iloc[0])


def test_identical_arms_have_identical_summaries():
    rows = [_row("s1", 0, 1, "0.33"), _row("s1", 0, 0, "1", "p2"),
            _row("t1", 1, 1, "0.33"), _row("t1", 1, 0, "1", "p2")]
    s = summarize_conditions(_logs(rows)).drop(columns="condition")
    assert s.iloc[0].equals(s.iloc[1])


def test_three_arm_export_counts_and_moments(tmp_path):
    exp = build_three_arm_export(tmp_path)
    tables = load_tables(exp.directory)
    summary = summarize_conditions(tables.problem_logs)
    for code, plan in exp.planted["arms"].items():
        row = summary.set_index("condition").loc[code]
        assert row["student_count"] == plan.students
        assert row["assignment_count"] == plan.assignments
        assert round(row["mean"], 3) == plan.mean and round(row["sd"], 3) == plan.sd
    ledger = CleaningLedger()
    clean = clean_problem_logs(tables.problem_logs, tables.action_logs, ledger=ledger)
    best, helpers_, flat = ledger.steps
    assert best.students_removed == exp.planted["arms"][2].students
    assert helpers_.students_removed == sum(exp.planted["never_hint"].values()) == 400
    assert helpers_.students_out == 291
    assert flat.details["subproblem_rows"] == exp.planted["subproblem_rows"]
    after = summarize_conditions(clean).set_index("condition")
    for code, plan in exp.planted["arms"].items():
        if plan.kept is None:
            continue
        students, assignments, rows, mean, sd = plan.kept
        assert after.loc[code, "student_count"] == students
        assert after.loc[code, "assignment_count"] == assignments
        assert round(after.loc[code, "mean"], 3) == mean and round(after.loc[code, "sd"], 3) == sd


def test_empty_dataset_attrition_undefined():
    class Empty:
        distal_outcome = np.array([])

        def __len__(self):
            return 0
    with pytest.raises(DomainError):
        attrition_rate(Empty())


def test_attrition_column_in_summary(tmp_path):
    exp = build_three_arm_export(tmp_path)
    tables = load_tables(exp.directory)
    clean = clean_problem_logs(tables.problem_logs, tables.action_logs)
    ds = build_analysis_table(tables.replace(problem_logs=clean), 1, 0, 0.5)
    s = summarize_conditions(clean, ds).set_index("condition")
    for code, missing in exp.planted["post_missing"].items():
        assert s.loc[code, "attrition_rate"] == missing / len(exp.planted["kept_students"][code])
