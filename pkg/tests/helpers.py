"""Fixture builders shared by the test modules."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

from etrials.data_model import SCHEMAS, PRIOR_COVARIATES, TrialDataset

LEVELS = np.array([0.0, 0.33, 0.67, 1.0])
LEVEL_TEXT = ("0", "0.33", "0.67", "1")


def counts_matching(n_rows, mean, sd, base=(0, 0, 0, 0), ddof=1):
    """Score-level counts ``c`` (summing to ``n_rows``) so that ``base + c``
    has the given mean and SD once both are rounded to 3 decimals.

    Brute force over the 0.33 and 0.67 counts; the 1.0 count follows from
    the mean and the 0 count from the total.
    """
    base = np.asarray(base)
    tot = n_rows + base.sum()
    base_sum = float(base @ LEVELS)
    for k33 in range(0, n_rows // 3):
        k67 = np.arange(0, n_rows // 3)
        partial = base_sum + 0.33 * k33 + 0.67 * k67
        k1 = np.rint(mean * tot - partial).astype(int)
        k0 = n_rows - k33 - k67 - k1
        ok = (k1 >= 0) & (k0 >= 0)
        for j in np.flatnonzero(ok):
            c = np.array([k0[j], k33, k67[j], k1[j]])
            full = base + c
            vals = np.repeat(LEVELS, full)
            if round(vals.mean(), 3) == round(mean, 3) and round(vals.std(ddof=ddof), 3) == round(sd, 3):
                return c
    raise ValueError("no count vector matches")


@dataclass
class ArmPlan:
    code: int
    students: int
    assignments: int
    rows: int
    mean: float
    sd: float
    # retained after the help filter: students, assignments, rows, mean, sd
    kept: tuple | None = None


@dataclass
class Export:
    directory: Path
    planted: dict = field(default_factory=dict)


def _split_rows(n_rows, n_groups):
    base, extra = divmod(n_rows, n_groups)
    return [base + (1 if k < extra else 0) for k in range(n_groups)]


def _scores_from_counts(counts):
    return list(np.repeat(np.arange(4), counts))


def _write(path, columns, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        w.writerows(rows)


def _group_rows(rng, prefix, code, n_students, n_assign, n_rows, counts, hinting,
                sub_every=0):
    """Problem rows for one block of students sharing a condition.

    ``hinting`` students get one hint on a low-score row each; others never
    hint. Returns (problem rows, assignment keys, student ids, hint pairs).
    """
    students = [f"{prefix}{k:04d}" for k in range(n_students)]
    # the first (n_assign - n_students) students have two assignments
    keys = []
    for k, s in enumerate(students):
        keys.append((s, f"{prefix}a{k:04d}"))
        if k < n_assign - n_students:
            keys.append((s, f"{prefix}b{k:04d}"))
    sizes = _split_rows(n_rows, n_assign)
    levels = _scores_from_counts(counts)
    low = [i for i, lv in enumerate(levels) if lv < 3]
    if hinting and len(low) < n_students:
        raise ValueError("not enough low scores to give every student a hint")
    reserved = set(low[:n_students]) if hinting else set()
    pool = [i for i in range(len(levels)) if i not in reserved]
    pool = list(np.asarray(pool)[rng.permutation(len(pool))])
    reserved = list(reserved)
    rows, hints = [], []
    first_key = {}
    for (s, a), size in zip(keys, sizes):
        first_key.setdefault(s, (s, a))
    pid = 0
    for (s, a), size in zip(keys, sizes):
        for r in range(size):
            give_hint = hinting and first_key[s] == (s, a) and r == 0
            idx = reserved.pop() if give_hint else pool.pop()
            lv = levels[idx]
            parent = f"{prefix}p{pid - 1:05d}" if sub_every and r > 0 and pid % sub_every == 0 else ""
            rows.append([s, a, f"{prefix}p{pid:05d}", parent, code, 1 if give_hint else 0,
                         1 + (lv < 3), 30 + (pid % 50), int(lv == 3), LEVEL_TEXT[lv]])
            if give_hint:
                hints.append((s, f"{prefix}p{pid:05d}"))
            pid += 1
    assert not pool and not reserved
    return rows, keys, students, hints


def build_three_arm_export(directory, seed=0, sub_every=9, post_missing=(1, 1)):
    """A three-arm export with planted counts and score moments.

    Arms 0 and 1 follow the initial and post-filter summaries (students,
    assignments, mean, SD); arm 2 is the best-so-far arm. 186 arm-0 and 214
    arm-1 students never ask for help. ``post_missing`` students per
    analysed arm have no same-skill post problems.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    plans = [
        ArmPlan(0, 343, 362, 3642, 0.565, 0.448, kept=(157, 161, 1610, 0.427, 0.454)),
        ArmPlan(1, 348, 365, 3581, 0.573, 0.445, kept=(134, 137, 1370, 0.396, 0.448)),
        ArmPlan(2, 334, 362, 3815, 0.571, 0.446),
    ]
    problem_rows, assign_rows, hint_pairs = [], [], []
    students_by_arm, kept_by_arm = {}, {}
    planted = {"arms": {}, "subproblem_rows": 0}
    for plan in plans:
        blocks = []
        if plan.kept:
            ks, ka, kr, km, ksd = plan.kept
            kept_counts = counts_matching(kr, km, ksd)
            gone_counts = counts_matching(plan.rows - kr, plan.mean, plan.sd, base=kept_counts)
            blocks.append((f"k{plan.code}_", ks, ka, kr, kept_counts, True, sub_every))
            blocks.append((f"n{plan.code}_", plan.students - ks, plan.assignments - ka,
                           plan.rows - kr, gone_counts, False, 0))
        else:
            counts = counts_matching(plan.rows, plan.mean, plan.sd)
            blocks.append((f"b{plan.code}_", plan.students, plan.assignments, plan.rows,
                           counts, True, 0))
        ids = []
        for prefix, ns, na, nr, counts, hinting, sub in blocks:
            rows, keys, studs, hints = _group_rows(rng, prefix, plan.code, ns, na, nr, counts,
                                                   hinting, sub)
            problem_rows += rows
            hint_pairs += hints
            ids += studs
            if prefix.startswith("k"):
                kept_by_arm[plan.code] = studs
                planted["subproblem_rows"] += sum(1 for r in rows if r[3])
            for k, (s, a) in enumerate(keys):
                assign_rows.append([s, a, f"class{hash_id(s) % 12:02d}", f"t{hash_id(s) % 5}",
                                    600, 12, 1, 0.5])
        students_by_arm[plan.code] = ids
        planted["arms"][plan.code] = plan
    # shuffle rows so nothing depends on file order
    problem_rows = [problem_rows[i] for i in rng.permutation(len(problem_rows))]
    assign_rows = [assign_rows[i] for i in rng.permutation(len(assign_rows))]
    _write(directory / "problem_logs.csv", list(SCHEMAS["problem_logs"]), problem_rows)
    _write(directory / "assignment_logs.csv", list(SCHEMAS["assignment_logs"]), assign_rows)

    all_students = [s for ids in students_by_arm.values() for s in ids]
    prior = []
    for s in all_students:
        prior.append([s, f"class{hash_id(s) % 12:02d}", f"sch{hash_id(s) % 3}"]
                     + [f"{v:.6g}" for v in rng.gamma(2.0, 5.0, len(PRIOR_COVARIATES))])
    _write(directory / "prior_logs.csv", list(SCHEMAS["prior_logs"]), prior)
    same_prior, same_post = [], []
    missing = set()
    for code, m in zip((0, 1), post_missing):
        missing |= set(kept_by_arm[code][:m])
    for s in all_students:
        same_prior.append([s, LEVEL_TEXT[int(rng.integers(0, 4))], 4])
        same_post.append([s, "", 0] if s in missing else [s, LEVEL_TEXT[int(rng.integers(0, 4))], 3])
    _write(directory / "same_skill_prior_logs.csv", list(SCHEMAS["same_skill_prior_logs"]), same_prior)
    _write(directory / "same_skill_post_logs.csv", list(SCHEMAS["same_skill_post_logs"]), same_post)
    actions = [[s, p, "hint_request", 1_700_000_000_000 + k] for k, (s, p) in enumerate(hint_pairs)]
    _write(directory / "action_logs.csv", list(SCHEMAS["action_logs"]), actions)
    assignments = sorted({r[1] for r in assign_rows})
    _write(directory / "assignment_settings.csv", list(SCHEMAS["assignment_settings"]),
           [[a, "", "false"] for a in assignments])
    _write(directory / "redo_logs.csv", list(SCHEMAS["redo_logs"]), [])
    planted["never_hint"] = {0: 343 - 157, 1: 348 - 134}
    planted["kept_students"] = kept_by_arm
    planted["post_missing"] = dict(zip((0, 1), post_missing))
    return Export(directory, planted)


def hash_id(s: str) -> int:
    # stable across interpreter runs, unlike hash()
    return sum((k + 1) * ord(ch) for k, ch in enumerate(s))


def tiny_export(directory, **overrides):
    """Eight small, well-formed tables: four students, two arms plus best-so-far."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    tables = {
        "problem_logs": [
            ["s1", "a1", "p1", "", 1, 1, 2, 40, 0, "0.67"],
            ["s1", "a1", "p2", "p1", 1, 0, 1, 20, 1, "1"],
            ["s2", "a2", "p1", "", 0, 2, 3, 60, 0, "0.33"],
            ["s2", "a2", "p2", "", 0, 0, 1, 15, 1, "1.0"],
            ["s3", "a3", "p1", "", 1, 1, 1, 25, 0, "0"],
            ["s4", "a4", "p1", "", 0, 1, 1, 35, 0, "0.67"],
            ["s5", "a5", "p1", "", 2, 1, 1, 35, 0, "0.33"],
        ],
        "assignment_logs": [
            ["s1", "a1", "c1", "t1", 60, 3, 1, 0.5],
            ["s2", "a2", "c1", "t1", 75, 4, 2, 0.5],
            ["s3", "a3", "c2", "t2", 25, 1, 1, 0.0],
            ["s4", "a4", "c2", "t2", 35, 1, 1, 0.0],
            ["s5", "a5", "c2", "t2", 35, 1, 1, 0.0],
        ],
        "action_logs": [["s1", "p1", "hint_request", 1_700_000_000_000]],
        "prior_logs": [[s, c, "sch1", *vals] for s, c, vals in (
            ("s1", "c1", (10, 3.5, 40, 5, 1.2, 0.5)),
            ("s2", "c1", (12, 4.0, 35, 6, 1.4, 0.25)),
            ("s3", "c2", (8, 5.5, 50, 3, 1.1, 0.0)),
            ("s4", "c2", (9, 2.5, 45, 4, 1.9, 1.0)),
            ("s5", "c2", (9, 2.5, 45, 4, 1.9, 1.0)))],
        "same_skill_prior_logs": [["s1", "0.67", 3], ["s2", "0.33", 2], ["s3", "", 0],
                                  ["s4", "1", 1], ["s5", "1", 1]],
        "same_skill_post_logs": [["s1", "1", 2], ["s2", "0.67", 3], ["s3", "0.33", 1],
                                 ["s4", "", 0], ["s5", "1", 1]],
        "assignment_settings": [["a1", 600, "true"], ["a2", "", "false"], ["a3", "", "false"],
                                ["a4", "", "false"], ["a5", "", "false"]],
        "redo_logs": [["s1", "a1", "p1", "", 1, 0, 1, 30, 1, "1"]],
    }
    tables.update(overrides)
    for name, rows in tables.items():
        if rows is None:
            continue
        _write(directory / f"{name}.csv", list(SCHEMAS[name]), rows)
    return directory


def random_dataset(rng, n, q=3, p=0.5, clusters=None, distal=False):
    """A TrialDataset with uniform covariates and a random outcome."""
    while True:
        arm = (rng.random(n) < p).astype(int)
        if 0 < arm.sum() < n:
            break
    covs = {f"x{j}": rng.random(n) for j in range(q)}
    y = rng.random(n)
    clusters = clusters or max(2, n // 10)
    return TrialDataset.from_columns(
        [f"s{k:04d}" for k in range(n)], arm, p, y, [f"c{k % clusters}" for k in range(n)], covs,
        distal_outcome=rng.random(n) if distal else None)


def same_records(a, b) -> bool:
    """Record-wise equality that treats NaN covariates as equal."""
    return _records_frame(a).equals(_records_frame(b))


def _records_frame(ds):
    rows = [dict(r.covariates, student_id=r.student_id, arm=r.arm, p=r.assigned_prob,
                 proximal=r.proximal_outcome, distal=r.distal_outcome, cluster=r.cluster_id)
            for r in ds.records]
    return pd.DataFrame(rows)


# (criterion number, passed, detail) lines collected by the acceptance suite
ACCEPTANCE_LINES: list = []


def record_criterion(number: int, passed: bool, detail: str) -> bool:
    ACCEPTANCE_LINES.append((number, bool(passed), detail))
    return bool(passed)
