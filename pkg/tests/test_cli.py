import csv
import json

import numpy as np
import pandas as pd
import pytest
from helpers import build_three_arm_export, tiny_export

from etrials.cli import main
from etrials.report import PLOT_COLUMNS, RESULT_COLUMNS, AnalysisOptions, LoadedData, run_report
from etrials.simulation import SimulationConfig, generate


def _error(capsys):
    lines = capsys.readouterr().err.strip().splitlines()
    assert len(lines) == 1
    return json.loads(lines[0])


_TINY_ROWS_S4_NO_HINT = [
    ["s1", "a1", "p1", "", 1, 1, 2, 40, 0, "0.67"],
    ["s2", "a2", "p1", "", 0, 2, 3, 60, 0, "0.33"],
    ["s3", "a3", "p1", "", 1, 1, 1, 25, 0, "0"],
    ["s4", "a4", "p1", "", 0, 0, 1, 35, 1, "0.67"],
    ["s5", "a5", "p1", "", 2, 1, 1, 35, 0, "0.33"],
]


@pytest.fixture
def trial_csv(tmp_path):
    path = tmp_path / "trial.csv"
    assert main(["simulate", "--n", "60", "--clusters", "6", "--levels", "3", "--distal-tau", "0.1",
                 "--seed", "4", "--out", str(path)]) == 0
    return path


def test_simulate_writes_trial_and_truth(trial_csv):
    df = pd.read_csv(trial_csv)
    assert len(df) == 60
    truth = pd.read_csv(trial_csv.with_name("trial_truth.csv"))
    assert len(truth) == 60 and "true_ate" in truth.columns


def test_validate_clean_export(tmp_path, capsys):
    assert main(["validate", str(tiny_export(tmp_path / "raw"))]) == 0
    out = json.loads(capsys.readouterr().out)
    assert out["ok"] is True


def test_validate_reports_violations_with_exit_two(tmp_path, capsys):
    d = tiny_export(tmp_path, problem_logs=[["s1", "a1", "p1", "", 1, 0, 1, 40, 0, "0.5"]])
    assert main(["validate", str(d)]) == 2
    assert json.loads(capsys.readouterr().out)["ok"] is False


def test_clean_summary_and_analysis_table(tmp_path):
    # s4 never asks for help
    d = tiny_export(tmp_path / "raw", action_logs=[], problem_logs=_TINY_ROWS_S4_NO_HINT)
    summary, table = tmp_path / "summary.csv", tmp_path / "table.csv"
    assert main(["clean", str(d), "--summary-out", str(summary), "--emit-analysis-table", str(table),
                 "--out", str(tmp_path / "clean.json")]) == 0
    s = pd.read_csv(summary)
    assert set(s["condition"]) == {0, 1}
    assert sorted(pd.read_csv(table)["student_id"]) == ["s1", "s2", "s3"]
    steps = json.loads((tmp_path / "clean.json").read_text())["cleaning"]
    assert [st["step"] for st in steps] == ["drop_best_so_far", "restrict_to_help_requesters",
                                            "flatten_subproblems"]


def test_clean_without_hint_filter(tmp_path):
    d = tiny_export(tmp_path / "raw", action_logs=[], problem_logs=_TINY_ROWS_S4_NO_HINT)
    table = tmp_path / "table.csv"
    assert main(["clean", str(d), "--no-require-hint", "--emit-analysis-table", str(table)]) == 0
    assert len(pd.read_csv(table)) == 4


def test_balance_on_analysis_csv(trial_csv, capsys):
    assert main(["balance", str(trial_csv), "--permutations", "99", "--trees", "30"]) == 0
    res = json.loads(capsys.readouterr().out)
    assert res["n_permutations"] == 99 and 0 < res["p_value"] <= 1


def test_balance_rejects_few_permutations(trial_csv, capsys):
    assert main(["balance", str(trial_csv), "--permutations", "10"]) == 3
    assert _error(capsys)["error"] == "DomainError"


def test_select_features_csv(trial_csv, tmp_path):
    out = tmp_path / "sel.csv"
    assert main(["select-features", str(trial_csv), "--out", str(out)]) == 0
    assert list(pd.read_csv(out).columns) == ["covariate", "status", "partner", "abs_r"]


@pytest.mark.parametrize("estimator", ["t-test", "reg", "loop", "all"])
def test_estimate_outputs(trial_csv, tmp_path, estimator):
    out = tmp_path / "est.json"
    assert main(["estimate", str(trial_csv), "--estimator", estimator, "--outcome", "both",
                 "--trees", "30", "--out", str(out)]) == 0
    rows = json.loads(out.read_text())["estimates"]
    assert len(rows) == (6 if estimator == "all" else 2)


def test_estimate_csv_to_stdout(trial_csv, capsys):
    assert main(["estimate", str(trial_csv), "--estimator", "t-test"]) == 0
    rows = list(csv.DictReader(capsys.readouterr().out.splitlines()))
    assert len(rows) == 1 and float(rows[0]["std_error"]) > 0


def _report(args, out_dir):
    assert main(["report", *args, "--out-dir", str(out_dir)]) == 0
    return {p.name: p.read_bytes() for p in sorted(out_dir.iterdir())}


def test_report_artifacts(trial_csv, tmp_path):
    files = _report([str(trial_csv), "--trees", "30", "--permutations", "99"], tmp_path / "r")
    assert set(files) == {"results.csv", "results.md", "ci_plot.csv", "provenance.json"}
    results = pd.read_csv(tmp_path / "r" / "results.csv")
    assert set(results.columns) == set(RESULT_COLUMNS)
    assert len(results) == 6
    plot = pd.read_csv(tmp_path / "r" / "ci_plot.csv")
    assert tuple(plot.columns) == PLOT_COLUMNS
    # exactly one smallest SE within each outcome group
    assert (plot.groupby("outcome")["min_se_in_group"].sum() == 1).all()
    assert np.allclose(plot["ci_low"], results["ci_low"], rtol=0, atol=0)
    assert "**" in files["results.md"].decode()
    prov = json.loads(files["provenance.json"])
    assert prov["flags"]["seed"] == 0
    assert "threads" not in prov["flags"]
    assert prov["balance"]["n_permutations"] == 99


def test_min_se_flag_marks_smallest_se(trial_csv, tmp_path):
    _report([str(trial_csv), "--trees", "30", "--no-balance"], tmp_path / "r")
    res = pd.read_csv(tmp_path / "r" / "results.csv")
    plot = pd.read_csv(tmp_path / "r" / "ci_plot.csv")
    for outcome, g in plot.groupby("outcome"):
        mine = res[res["perf"] == outcome]
        se = dict(zip(mine["method"], mine["se"]))
        best = g[g["min_se_in_group"]]["estimator"].iloc[0]
        assert se[best] == min(se.values())


def test_report_bytes_identical_across_threads(trial_csv, tmp_path):
    a = _report([str(trial_csv), "--trees", "30", "--permutations", "99", "--threads", "1"],
                tmp_path / "a")
    b = _report([str(trial_csv), "--trees", "30", "--permutations", "99", "--threads", "3"],
                tmp_path / "b")
    assert a == b


def test_report_on_raw_export(tmp_path):
    exp = build_three_arm_export(tmp_path / "raw")
    files = _report([str(exp.directory), "--no-balance", "--trees", "20"], tmp_path / "r")
    prov = json.loads(files["provenance.json"])
    assert prov["input"]["source"] == "raw"
    assert prov["cleaning"][1]["students_removed"] == 400
    assert "attrition" in prov
    assert len(pd.read_csv(tmp_path / "r" / "results.csv")) == 6


def test_config_file_supplies_defaults(trial_csv, tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("# shared settings\ntrees = 30\nseed = 7\nbalance-permutations = 99\n")
    assert main(["report", str(trial_csv), "--config", str(cfg), "--out-dir", str(tmp_path / "r")]) == 4
    cfg.write_text("# shared settings\ntrees = 30\nseed = 7\npermutations = 99\nwelch = true\n")
    assert main(["report", str(trial_csv), "--config", str(cfg), "--out-dir", str(tmp_path / "r")]) == 0
    flags = json.loads((tmp_path / "r" / "provenance.json").read_text())["flags"]
    assert (flags["trees"], flags["seed"], flags["permutations"], flags["welch"]) == (30, 7, 99, True)


def test_command_line_overrides_config(trial_csv, tmp_path, capsys):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("estimator = reg\n")
    out = tmp_path / "e.json"
    assert main(["estimate", str(trial_csv), "--config", str(cfg), "--estimator", "t-test",
                 "--out", str(out)]) == 0
    assert json.loads(out.read_text())["estimates"][0]["estimator"] == "t_test"


def test_usage_errors_exit_four(capsys):
    assert main([]) == 4
    assert _error(capsys)["exit_code"] == 4
    assert main(["report"]) == 4
    _error(capsys)
    assert main(["estimate", "x.csv", "--estimator", "bogus"]) == 4
    _error(capsys)


def test_missing_input_exits_two(tmp_path, capsys):
    assert main(["validate", str(tmp_path / "nowhere")]) == 2
    err = _error(capsys)
    assert err["exit_code"] == 2 and err["message"]


def test_estimation_failure_exits_three(tmp_path, capsys):
    path = tmp_path / "one_arm.csv"
    path.write_text("student_id,arm,assigned_prob,proximal_outcome,distal_outcome,cluster_id\n"
                    "a,1,0.5,1,,k1\nb,1,0.5,0.33,,k1\nc,1,0.5,0.67,,k2\n")
    assert main(["estimate", str(path), "--estimator", "reg", "--outcome", "proximal"]) == 3
    assert _error(capsys)["exit_code"] == 3


def test_thread_count_from_environment(trial_csv, tmp_path, monkeypatch):
    monkeypatch.setenv("ETRIALS_THREADS", "2")
    a = _report([str(trial_csv), "--trees", "20", "--no-balance"], tmp_path / "a")
    monkeypatch.delenv("ETRIALS_THREADS")
    b = _report([str(trial_csv), "--trees", "20", "--no-balance"], tmp_path / "b")
    assert a == b


@pytest.mark.slow
def test_null_effect_intervals_cover_zero():
    # zero effect: every estimator's interval should contain 0 most of the time
    options = AnalysisOptions(balance=False)
    hits = np.zeros(3)
    for rep in range(100):
        trial = generate(SimulationConfig(tau=0.0, kind="linear"), seed=rep)
        report = run_report(LoadedData(trial.dataset, "simulated"), options.with_changes(seed=rep))
        prox = [r for r in report.results if r.outcome == "proximal"]
        hits += [r.ci_low <= 0.0 <= r.ci_high for r in prox]
    assert (hits >= 93).all(), hits
