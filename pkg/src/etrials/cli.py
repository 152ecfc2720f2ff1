"""``etrials`` command line.

Exit codes: 0 success, 2 validation failure, 3 estimation failure, 4 usage
error. Fatal errors are written to stderr as one JSON object per line.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

from . import __version__
from .covariates import classification_permutation_test, select_features
from .data_model import validate_tables, write_analysis_csv
from .errors import EtrialsError
from .estimators import THREADS_ENV, default_threads
from .ingestion import HeaderMapping, load_tables
from .report import AnalysisOptions, estimate_all, load_input, load_raw, run_report, write_report
from .simulation import SimulationConfig, generate, write_truth_csv

EXIT_OK, EXIT_VALIDATION, EXIT_ESTIMATION, EXIT_USAGE = 0, 2, 3, 4
_ESTIMATOR_FLAGS = {"t-test": ("t_test",), "reg": ("regression",), "loop": ("loop",),
                    "all": ("t_test", "regression", "loop")}
_OUTCOME_FLAGS = {"proximal": ("proximal",), "distal": ("distal",), "both": ("proximal", "distal")}
# flags that only steer where or how fast things run; kept out of embedded flag sets
_NON_SEMANTIC = {"threads", "config", "out_dir", "out", "command", "verbose"}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _optional_int(text):
    return None if text.lower() in ("none", "") else int(text)


def _build_parser() -> _Parser:
    threads = argparse.ArgumentParser(add_help=False)
    threads.add_argument("--threads", type=int, default=None,
                         help=f"worker threads (default: ${THREADS_ENV} or 1)")
    threads.add_argument("--config", help="key=value file with defaults for any long flag")
    threads.add_argument("-v", "--verbose", action="store_true")

    raw = argparse.ArgumentParser(add_help=False)
    raw.add_argument("--mapping", help="header-mapping file (key=value)")
    raw.add_argument("--best-so-far-code", type=_optional_int, default=2,
                     help="condition code of the platform default arm; 'none' keeps it")
    raw.add_argument("--require-hint", action=argparse.BooleanOptionalAction, default=True,
                     help="keep only students who asked for help on an experiment problem")
    raw.add_argument("--treatment-code", type=int, default=1)
    raw.add_argument("--control-code", type=int, default=0)
    raw.add_argument("--p-assign", type=float, default=0.5,
                     help="assignment probability for raw exports")

    analysis = argparse.ArgumentParser(add_help=False)
    analysis.add_argument("--seed", type=int, default=0)
    analysis.add_argument("--level", type=float, default=0.95)
    analysis.add_argument("--welch", action="store_true")
    analysis.add_argument("--imputer", choices=("mean", "linear", "forest"), default="forest")
    analysis.add_argument("--trees", type=int, default=100)
    analysis.add_argument("--mtry", type=_optional_int, default=None)
    analysis.add_argument("--min-leaf", type=int, default=5)
    analysis.add_argument("--max-depth", type=_optional_int, default=None)
    analysis.add_argument("--cluster-covariate", action=argparse.BooleanOptionalAction, default=True,
                          help="give the LOOP imputer the class as a categorical covariate")
    analysis.add_argument("--proximal-covariate", action=argparse.BooleanOptionalAction,
                          default=True, help="adjust distal models for the proximal outcome")

    selection = argparse.ArgumentParser(add_help=False)
    selection.add_argument("--var-threshold", type=float, default=1e-8)
    selection.add_argument("--cor-threshold", type=float, default=0.9)

    balance = argparse.ArgumentParser(add_help=False)
    balance.add_argument("--permutations", type=int, default=199)

    parser = _Parser(prog="etrials", description="Analyse randomized trials from ASSISTments experiment exports.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("validate", parents=[threads, raw], help="check an export directory")
    p.add_argument("input")
    p.add_argument("--out", help="write the validation report as JSON")

    p = sub.add_parser("clean", parents=[threads, raw], help="apply the cleaning filters")
    p.add_argument("input")
    p.add_argument("--summary-out", help="per-condition summary CSV")
    p.add_argument("--emit-analysis-table", help="student-level analysis CSV")
    p.add_argument("--out", help="cleaning ledger as JSON")

    p = sub.add_parser("balance", parents=[threads, raw, balance],
                       help="classification permutation test")
    p.add_argument("input")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--trees", type=int, default=100)

    p = sub.add_parser("select-features", parents=[threads, raw, selection],
                       help="variance and correlation filter")
    p.add_argument("input")
    p.add_argument("--out", help="CSV path (default: stdout)")

    p = sub.add_parser("estimate", parents=[threads, raw, analysis, selection],
                       help="treatment effect estimates")
    p.add_argument("input")
    p.add_argument("--estimator", choices=tuple(_ESTIMATOR_FLAGS), default="all")
    p.add_argument("--outcome", choices=tuple(_OUTCOME_FLAGS), default="proximal")
    p.add_argument("--out", help="output path; .json writes JSON, anything else CSV")

    p = sub.add_parser("simulate", parents=[threads], help="write a synthetic trial")
    p.add_argument("--n", type=int, default=200)
    p.add_argument("--q", type=int, default=5)
    p.add_argument("--clusters", type=int, default=10)
    p.add_argument("--tau", type=float, default=0.3)
    p.add_argument("--distal-tau", type=float, default=None)
    p.add_argument("--kind", choices=("constant", "linear", "nonlinear"), default="nonlinear")
    p.add_argument("--noise-sd", type=float, default=0.5)
    p.add_argument("--signal", type=float, default=1.0)
    p.add_argument("--cluster-sd", type=float, default=0.0)
    p.add_argument("--levels", type=int, default=0)
    p.add_argument("--p", type=float, default=0.5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="analysis CSV path")
    p.add_argument("--truth-out", help="truth sidecar CSV (default: <out stem>_truth.csv)")

    p = sub.add_parser("report", parents=[threads, raw, analysis, selection, balance],
                       help="full pipeline and report artifacts")
    p.add_argument("input")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--no-balance", dest="balance", action="store_false",
                   help="skip the permutation test")
    return parser


def read_config(path) -> dict:
    """``key = value`` lines; ``#`` starts a comment; keys are long flag names."""
    out = {}
    for n, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{n}: expected key=value")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key.lstrip("-")] = value
    return out


def _apply_config(subparser: argparse.ArgumentParser, config: dict):
    by_flag = {}
    for action in subparser._actions:
        for opt in action.option_strings:
            if opt.startswith("--"):
                by_flag[opt[2:]] = action
    defaults = {}
    for key, text in config.items():
        action = by_flag.get(key)
        if action is None or action.dest in ("config", "help"):
            raise UsageError(f"unknown config key {key!r}")
        if action.nargs == 0 or isinstance(action, argparse.BooleanOptionalAction):
            low = text.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise UsageError(f"config key {key!r} needs true or false")
            value = low in ("true", "1", "yes")
            if isinstance(action, argparse._StoreFalseAction):
                value = not value
        else:
            try:
                value = action.type(text) if action.type else text
            except (TypeError, ValueError) as exc:
                raise UsageError(f"config key {key!r}: {exc}") from None
            if action.choices is not None and value not in action.choices:
                raise UsageError(f"config key {key!r} must be one of {sorted(action.choices)}")
        defaults[action.dest] = value
    subparser.set_defaults(**defaults)


def parse_args(argv):
    parser = _build_parser()
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    if known.config:
        command = next((a for a in argv if not a.startswith("-")), None)
        subparsers = parser._subparsers._group_actions[0].choices
        if command not in subparsers:
            raise UsageError("--config needs a subcommand")
        try:
            config = read_config(known.config)
        except OSError as exc:
            raise UsageError(f"cannot read config: {exc}") from None
        _apply_config(subparsers[command], config)
    return parser.parse_args(argv)


def options_from_args(args) -> AnalysisOptions:
    fields = AnalysisOptions.__dataclass_fields__
    return AnalysisOptions(**{k: v for k, v in vars(args).items() if k in fields})


def semantic_flags(args) -> dict:
    return {k: v for k, v in sorted(vars(args).items()) if k not in _NON_SEMANTIC}


def _emit(obj, path=None):
    text = json.dumps(obj, sort_keys=True, indent=2) + "\n"
    if path:
        Path(path).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)


def _cmd_validate(args, threads):
    tables = load_tables(args.input, args.mapping, n_threads=threads)
    report = validate_tables(tables)
    _emit(report.as_dict(), args.out)
    return EXIT_OK if report.ok else EXIT_VALIDATION


def _cmd_clean(args, threads):
    loaded = load_raw(args.input, options_from_args(args), args.mapping, threads)
    if args.summary_out:
        keys = list(loaded.condition_summary[0]) if loaded.condition_summary else []
        with open(args.summary_out, "w", newline="", encoding="utf-8") as fh:
            w = csv.DictWriter(fh, keys, lineterminator="\n")
            w.writeheader()
            w.writerows(loaded.condition_summary)
    if args.emit_analysis_table:
        write_analysis_csv(loaded.dataset, args.emit_analysis_table)
    _emit({"cleaning": loaded.cleaning, "condition_summary": loaded.condition_summary,
           "students_retained": len(loaded.dataset)}, args.out)
    return EXIT_OK


def _cmd_balance(args, threads):
    loaded = load_input(args.input, options_from_args(args), args.mapping, threads)
    res = classification_permutation_test(loaded.dataset, args.permutations, args.seed,
                                          n_trees=args.trees, n_threads=threads)
    _emit(res.as_dict())
    return EXIT_OK


def _cmd_select(args, threads):
    loaded = load_input(args.input, options_from_args(args), args.mapping, threads)
    res = select_features(loaded.dataset, args.var_threshold, args.cor_threshold)
    res.write_csv(args.out if args.out else sys.stdout)
    return EXIT_OK


def _cmd_estimate(args, threads):
    options = options_from_args(args)
    loaded = load_input(args.input, options, args.mapping, threads)
    estimators = _ESTIMATOR_FLAGS[args.estimator]
    reg_covs = ()
    if "regression" in estimators:
        reg_covs = select_features(loaded.dataset, args.var_threshold, args.cor_threshold).kept
    results, skipped = estimate_all(loaded.dataset, options, estimators,
                                    _OUTCOME_FLAGS[args.outcome], reg_covs, threads)
    rows = [r.as_dict() for r in results]
    if args.out and args.out.endswith(".json"):
        _emit({"estimates": rows, "skipped": skipped, "flags": semantic_flags(args)}, args.out)
        return EXIT_OK
    fh = open(args.out, "w", newline="", encoding="utf-8") if args.out else sys.stdout
    try:
        cols = list(rows[0]) if rows else ["estimator"]
        w = csv.DictWriter(fh, cols, lineterminator="\n")
        w.writeheader()
        w.writerows({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()} for r in rows)
    finally:
        if fh is not sys.stdout:
            fh.close()
    return EXIT_OK


def _cmd_simulate(args, threads):
    config = SimulationConfig(n=args.n, q=args.q, n_clusters=args.clusters, tau=args.tau,
                              kind=args.kind, noise_sd=args.noise_sd, p=args.p, signal=args.signal,
                              cluster_sd=args.cluster_sd, n_levels=args.levels,
                              distal_tau=args.distal_tau)
    trial = generate(config, args.seed)
    out = Path(args.out)
    write_analysis_csv(trial.dataset, out)
    truth = Path(args.truth_out) if args.truth_out else out.with_name(out.stem + "_truth.csv")
    write_truth_csv(trial, truth)
    return EXIT_OK


def _cmd_report(args, threads):
    options = options_from_args(args)
    loaded = load_input(args.input, options, args.mapping, threads)
    report = run_report(loaded, options, threads)
    write_report(report, args.out_dir, semantic_flags(args))
    return EXIT_OK


_COMMANDS = {"validate": _cmd_validate, "clean": _cmd_clean, "balance": _cmd_balance,
             "select-features": _cmd_select, "estimate": _cmd_estimate,
             "simulate": _cmd_simulate, "report": _cmd_report}


def _fail(kind, message, code):
    sys.stderr.write(json.dumps({"error": kind, "message": str(message), "exit_code": code},
                                sort_keys=True) + "\n")
    return code


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = parse_args(argv)
    except UsageError as exc:
        return _fail("UsageError", exc, EXIT_USAGE)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    threads = args.threads if args.threads is not None else default_threads()
    if threads < 1:
        return _fail("UsageError", "--threads must be at least 1", EXIT_USAGE)
    try:
        return _COMMANDS[args.command](args, threads)
    except UsageError as exc:
        return _fail("UsageError", exc, EXIT_USAGE)
    except EtrialsError as exc:
        return _fail(type(exc).__name__, exc, exc.exit_code)
    except (ValueError, FileNotFoundError, OSError) as exc:
        code = EXIT_VALIDATION if isinstance(exc, OSError) else EXIT_ESTIMATION
        return _fail(type(exc).__name__, exc, code)


if __name__ == "__main__":
    sys.exit(main())
