"""Average-treatment-effect estimators.

* :func:`difference_in_means` - two-sample Student (or Welch) t-test.
* :func:`regression_estimate` - treatment coefficient of a random-intercept
  mixed model with class as the cluster.
* :func:`loop_estimate` - leave-one-out potential outcomes: for every unit,
  both potential outcomes are imputed from the other ``N - 1`` units and the
  unit's inverse-probability-weighted residual is averaged.
"""
from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import stats

from .data_model import TrialDataset
from .design import adjustment_columns, linear_features
from .errors import DomainError
from .imputation import ImputerSpec, arm_seed, assemble, fit_arm_model, fit_imputer
from .mixed_model import MixedModelFit, drop_collinear, fit_random_intercept

ESTIMATORS = ("t_test", "regression", "loop")
OUTCOMES = ("proximal", "distal")
THREADS_ENV = "ETRIALS_THREADS"


def default_threads() -> int:
    try:
        return max(1, int(os.environ.get(THREADS_ENV, "1")))
    except ValueError:
        return 1


@dataclass(frozen=True)
class EstimateResult:
    estimator: str
    outcome: str
    estimate: float
    std_error: float
    p_value: float
    ci_low: float
    ci_high: float
    n_treated: int
    n_control: int
    level: float = 0.95
    reference: str = "normal"
    details: dict = field(default_factory=dict, compare=False, repr=False)

    def as_dict(self) -> dict:
        d = asdict(self)
        d.pop("details")
        return d


def _interval(estimate, se, level, reference="normal", df=None):
    alpha = 1.0 - level
    if reference == "t":
        crit = stats.t.ppf(1 - alpha / 2, df)
    else:
        crit = stats.norm.ppf(1 - alpha / 2)
    if se > 0:
        z = estimate / se
        p = 2 * (stats.t.sf(abs(z), df) if reference == "t" else stats.norm.sf(abs(z)))
    else:
        p = 1.0 if estimate == 0 else 0.0
    return float(min(p, 1.0)), float(estimate - crit * se), float(estimate + crit * se)


def _analysis_sample(dataset: TrialDataset, outcome: str):
    if outcome not in OUTCOMES:
        raise ValueError(f"outcome must be one of {OUTCOMES}")
    y = dataset.outcome(outcome)
    keep = ~np.isnan(y)
    t = dataset.arm[keep]
    if not ((t == 1).any() and (t == 0).any()):
        raise DomainError(f"an arm has no observed {outcome} outcome")
    return keep, int((~keep).sum())


def difference_in_means(dataset: TrialDataset, outcome: str = "proximal", welch: bool = False,
                        level: float = 0.95) -> EstimateResult:
    """Treated mean minus control mean, with a two-sided t-test.

    Pooled variance by default; ``welch=True`` uses unequal variances and
    Welch-Satterthwaite degrees of freedom. The interval uses the same t
    reference as the p-value.
    """
    keep, n_missing = _analysis_sample(dataset, outcome)
    y = dataset.outcome(outcome)[keep]
    t = dataset.arm[keep]
    y1, y0 = y[t == 1], y[t == 0]
    n1, n0 = len(y1), len(y0)
    est = float(y1.mean() - y0.mean())
    v1 = y1.var(ddof=1) if n1 > 1 else 0.0
    v0 = y0.var(ddof=1) if n0 > 1 else 0.0
    if welch:
        a, b = v1 / n1, v0 / n0
        se = float(np.sqrt(a + b))
        denom = (a * a / (n1 - 1) if n1 > 1 else 0.0) + (b * b / (n0 - 1) if n0 > 1 else 0.0)
        df = (a + b) ** 2 / denom if denom > 0 else float(n1 + n0 - 2)
    else:
        df = n1 + n0 - 2
        if df < 1:
            raise DomainError("pooled t-test needs at least three observations")
        pooled = ((n1 - 1) * v1 + (n0 - 1) * v0) / df
        se = float(np.sqrt(pooled * (1.0 / n1 + 1.0 / n0)))
    p, lo, hi = _interval(est, se, level, "t", df)
    return EstimateResult("t_test", outcome, est, se, p, lo, hi, n1, n0, level, "t",
                          {"df": float(df), "welch": welch, "n_missing_outcome": n_missing})


def fit_mixed_model(dataset: TrialDataset, outcome: str = "proximal", covariates=(),
                    proximal_covariate: bool = True) -> MixedModelFit:
    """Fit ``Y = a + tau*T + X'b + u[class] + e`` by REML.

    ``covariates`` are dataset covariate names (categoricals are one-hot
    encoded, missing cells median-filled with an indicator). Columns that
    are collinear with earlier ones are dropped and reported.
    """
    keep, _ = _analysis_sample(dataset, outcome)
    if len(set(dataset.cluster_id[keep])) < 2:
        raise DomainError("mixed model needs at least two clusters")
    sub = dataset.subset(keep)
    raw, names, cats, categories = adjustment_columns(sub, outcome, covariates, proximal_covariate)
    Z, znames = linear_features(raw, names, cats, categories)
    X = np.column_stack([np.ones(len(sub)), sub.arm.astype(float), Z])
    all_names = ("(Intercept)", "treatment") + tuple(znames)
    X, kept, dropped = drop_collinear(X, all_names)
    return fit_random_intercept(sub.outcome(outcome), X, sub.cluster_id, kept, dropped=dropped)


def regression_estimate(dataset: TrialDataset, outcome: str = "proximal", covariates=(),
                        level: float = 0.95, proximal_covariate: bool = True) -> EstimateResult:
    keep, n_missing = _analysis_sample(dataset, outcome)
    fit = fit_mixed_model(dataset, outcome, covariates, proximal_covariate)
    est = fit.fixed_effects["treatment"]
    se = fit.std_errors["treatment"]
    p, lo, hi = _interval(est, se, level)
    t = dataset.arm[keep]
    return EstimateResult("regression", outcome, est, se, p, lo, hi, int((t == 1).sum()),
                          int((t == 0).sum()), level, "normal",
                          {"fit": fit, "n_missing_outcome": n_missing, "converged": fit.converged})


def impute_held_out(i: int, X, T, Y, spec: ImputerSpec, categorical=None):
    """Reference path: fit on every unit except ``i`` and impute ``(t_i, c_i)``."""
    train = np.ones(len(Y), dtype=bool)
    train[i] = False
    imp = fit_imputer(spec, X[train], T[train], Y[train], categorical)
    x = X[i:i + 1]
    return float(imp.predict_t(x)[0]), float(imp.predict_c(x)[0])


def loo_potential_outcomes(X, T, Y, spec: ImputerSpec, categorical=None, n_threads: int = 1):
    """Leave-one-out imputations ``(t_hat, c_hat)`` for every unit.

    Equal to calling :func:`impute_held_out` for each unit, but an arm's
    model is fitted once on the whole arm and reused for every unit outside
    that arm, since those units' training sets agree on it. Only the
    in-arm refits (one per unit) are spread over ``n_threads`` workers.
    """
    X = np.ascontiguousarray(X, dtype=float)
    T = np.asarray(T)
    Y = np.asarray(Y, dtype=float)
    n = len(Y)
    X = X.reshape(n, -1)
    hat = {1: np.empty(n), 0: np.empty(n)}
    members = {a: np.flatnonzero(T == a) for a in (1, 0)}
    full = {a: fit_arm_model(spec, X[members[a]], Y[members[a]], arm_seed(spec.seed, a), categorical)
            for a in (1, 0)}

    def fallback(i):
        return float(np.mean(np.delete(Y, i)))

    for a in (1, 0):
        others = np.flatnonzero(T != a)
        if len(others) == 0:
            continue
        if full[a] is not None:
            hat[a][others] = full[a](X[others])
        else:
            hat[a][others] = [fallback(i) for i in others]

    tasks = [(a, int(i)) for a in (1, 0) for i in members[a]]

    def refit(task):
        a, i = task
        rows = members[a][members[a] != i]
        model = fit_arm_model(spec, X[rows], Y[rows], arm_seed(spec.seed, a), categorical)
        if model is None:
            return fallback(i)
        return float(model(X[i:i + 1])[0])

    if n_threads > 1 and len(tasks) > 1:
        with ThreadPoolExecutor(max_workers=n_threads) as pool:
            values = list(pool.map(refit, tasks))
    else:
        values = [refit(task) for task in tasks]
    for (a, i), v in zip(tasks, values):
        hat[a][i] = v
    return hat[1], hat[0]


def loop_from_arrays(Y, T, p, X=None, spec: ImputerSpec | None = None, categorical=None,
                     n_threads: int = 1) -> dict:
    """LOOP point estimate and plug-in variance on raw arrays.

    Returns a dict with ``estimate``, ``variance``, ``t_hat``, ``c_hat``,
    ``m_hat`` and the per-unit contributions ``tau_i``.
    """
    spec = spec or ImputerSpec()
    Y = np.asarray(Y, dtype=float)
    T = np.asarray(T).astype(int)
    n = len(Y)
    p = np.broadcast_to(np.asarray(p, dtype=float), (n,))
    if not ((p > 0) & (p < 1)).all():
        raise DomainError("assignment probabilities must lie strictly between 0 and 1")
    if not ((T == 1).any() and (T == 0).any()):
        raise DomainError("both arms must be nonempty")
    X = np.zeros((n, 0)) if X is None else np.asarray(X, dtype=float).reshape(n, -1)
    t_hat, c_hat = loo_potential_outcomes(X, T, Y, spec, categorical, n_threads)
    m_hat = (1 - p) * t_hat + p * c_hat
    U = np.where(T == 1, 1.0 / p, -1.0 / (1.0 - p))
    tau_i = (Y - m_hat) * U
    variance = float(np.sum((Y - m_hat) ** 2 / (p * (1 - p))) / n ** 2)
    return {"estimate": float(np.mean(tau_i)), "variance": variance, "t_hat": t_hat,
            "c_hat": c_hat, "m_hat": m_hat, "tau_i": tau_i}


def loop_features(dataset: TrialDataset, outcome: str, spec: ImputerSpec, covariates=None,
                  proximal_covariate: bool = True, cluster_covariate: bool = False):
    """Imputer input matrix for ``dataset`` (rows as given)."""
    raw, names, cats, categories = adjustment_columns(dataset, outcome, covariates, proximal_covariate)
    if cluster_covariate:
        labels = sorted(set(dataset.cluster_id))
        lookup = {c: k for k, c in enumerate(labels)}
        codes = np.array([lookup[c] for c in dataset.cluster_id], dtype=float)
        raw = np.column_stack([raw, codes])
        names = names + ("cluster_id",)
        cats = cats + ("cluster_id",)
        categories = {**categories, "cluster_id": tuple(labels)}
    return spec.features(raw, names, cats, categories)


def loop_estimate(dataset: TrialDataset, outcome: str = "proximal",
                  imputer: ImputerSpec | None = None, seed: int = 0, covariates=None,
                  level: float = 0.95, n_threads: int | None = None,
                  proximal_covariate: bool = True, cluster_covariate: bool = False) -> EstimateResult:
    """Leave-one-out potential outcomes estimate of the ATE.

    ``covariates=None`` uses every dataset covariate. The imputer's seed is
    replaced by ``seed``; each arm model draws from a stream derived from
    ``(seed, arm)`` so results do not depend on ``n_threads``.
    """
    spec = (imputer or ImputerSpec()).with_seed(seed)
    keep, n_missing = _analysis_sample(dataset, outcome)
    sub = dataset.subset(keep) if n_missing else dataset
    X, cat_mask = loop_features(sub, outcome, spec, covariates, proximal_covariate, cluster_covariate)
    res = loop_from_arrays(sub.outcome(outcome), sub.arm, sub.assigned_prob, X, spec,
                           cat_mask if cat_mask.any() else None,
                           default_threads() if n_threads is None else n_threads)
    est = res["estimate"]
    se = float(np.sqrt(res["variance"]))
    p, lo, hi = _interval(est, se, level)
    res["n_missing_outcome"] = n_missing
    res["imputer"] = spec
    return EstimateResult("loop", outcome, est, se, p, lo, hi, sub.n_treated, sub.n_control,
                          level, "normal", res)
