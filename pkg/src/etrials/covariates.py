"""Covariate balance (classification permutation test) and feature selection."""
from __future__ import annotations

import csv
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .data_model import TrialDataset
from .design import forest_features
from .errors import DomainError
from .forest import ForestParams, derive_seed, forest_train

log = logging.getLogger(__name__)

DEFAULT_PERMUTATIONS = 199
DEFAULT_VARIANCE_THRESHOLD = 1e-8
DEFAULT_CORRELATION_THRESHOLD = 0.9


@dataclass(frozen=True)
class BalanceResult:
    observed_statistic: float
    permutation_statistics: tuple
    p_value: float
    n_permutations: int
    seed: int = 0

    def as_dict(self) -> dict:
        return {"observed_statistic": self.observed_statistic, "p_value": self.p_value,
                "n_permutations": self.n_permutations, "seed": self.seed}


def oob_accuracy(M, labels, cat_mask, params: ForestParams, seed: int) -> float:
    """Out-of-bag accuracy of a forest classifier predicting ``labels``.

    Rows that are never out of bag count as misclassified; with 100 trees
    this happens with probability about 1e-19 per row.
    """
    forest = forest_train(M, labels.astype(float), params, seed=seed,
                          categorical=cat_mask if cat_mask.any() else None)
    prob = forest.oob_predict(M)
    pred = np.where(np.isnan(prob), -1, (prob > 0.5).astype(int))
    return float(np.mean(pred == labels))


def classification_permutation_test(dataset: TrialDataset, n_permutations: int = DEFAULT_PERMUTATIONS,
                                    seed: int = 0, n_trees: int = 100, n_threads: int = 1,
                                    covariates=None) -> BalanceResult:
    """Can a forest tell the arms apart from covariates better than chance?

    The statistic is the out-of-bag accuracy of a forest predicting the arm.
    Each permutation shuffles the arm labels with a generator seeded from
    ``(seed, b)`` and refits with the same forest seed as the observed fit,
    so the observed and permuted statistics are exchangeable under the null.
    """
    if n_permutations < 99:
        raise DomainError("n_permutations must be at least 99")
    labels = dataset.arm.astype(np.int64)
    if min((labels == 1).sum(), (labels == 0).sum()) < 2:
        raise DomainError("each arm needs at least two records")
    names = tuple(dataset.covariate_names if covariates is None else covariates)
    idx = [dataset.covariate_names.index(n) for n in names]
    cats = tuple(n for n in names if n in dataset.categorical)
    M, cat_mask, _ = forest_features(dataset.covariates[:, idx], names, cats,
                                     {n: dataset.categories[n] for n in cats})
    q = M.shape[1]
    params = ForestParams(n_trees=n_trees, mtry=max(1, math.isqrt(q)) if q else None,
                          min_leaf=1, classification=True)
    forest_seed = derive_seed(seed, 0xC0DE)
    observed = oob_accuracy(M, labels, cat_mask, params, forest_seed)

    def one(b):
        perm = np.random.default_rng(derive_seed(seed, b)).permutation(labels)
        return oob_accuracy(M, perm, cat_mask, params, forest_seed)

    if n_threads > 1:
        with ThreadPoolExecutor(max_workers=n_threads) as pool:
            stats = list(pool.map(one, range(n_permutations)))
    else:
        stats = [one(b) for b in range(n_permutations)]
    exceed = sum(s >= observed for s in stats)
    return BalanceResult(observed, tuple(stats), (1 + exceed) / (1 + n_permutations),
                         n_permutations, seed)


@dataclass(frozen=True)
class FeatureSelectionResult:
    kept: tuple
    dropped_near_zero_variance: tuple
    dropped_high_correlation: tuple  # (name, partner, |r|)
    warnings: tuple = field(default=(), compare=False)

    def rows(self):
        out = [{"covariate": n, "status": "kept", "partner": "", "abs_r": ""} for n in self.kept]
        out += [{"covariate": n, "status": "near_zero_variance", "partner": "", "abs_r": ""}
                for n in self.dropped_near_zero_variance]
        out += [{"covariate": n, "status": "high_correlation", "partner": p, "abs_r": repr(r)}
                for n, p, r in self.dropped_high_correlation]
        return out

    def write_csv(self, path_or_buf):
        fields = ["covariate", "status", "partner", "abs_r"]
        if hasattr(path_or_buf, "write"):
            w = csv.DictWriter(path_or_buf, fields, lineterminator="\n")
            w.writeheader()
            w.writerows(self.rows())
            return
        with open(path_or_buf, "w", newline="", encoding="utf-8") as fh:
            self.write_csv(fh)


def pairwise_abs_correlation(X):
    """Pearson |r| on pairwise-complete rows; NaN where undefined."""
    q = X.shape[1]
    R = np.full((q, q), np.nan)
    ok = ~np.isnan(X)
    for a in range(q):
        R[a, a] = 1.0
        for b in range(a + 1, q):
            both = ok[:, a] & ok[:, b]
            if both.sum() < 2:
                continue
            x, y = X[both, a], X[both, b]
            dx, dy = x - x.mean(), y - y.mean()
            den = math.sqrt(float(dx @ dx) * float(dy @ dy))
            if den > 0:
                R[a, b] = R[b, a] = min(abs(float(dx @ dy)) / den, 1.0)
    return R


def select_features(dataset: TrialDataset, variance_threshold: float = DEFAULT_VARIANCE_THRESHOLD,
                    correlation_threshold: float = DEFAULT_CORRELATION_THRESHOLD,
                    covariates=None) -> FeatureSelectionResult:
    """Drop near-constant numeric covariates, then thin out highly correlated pairs.

    Stage 2 repeatedly takes the remaining pair with the largest |r| above
    the threshold and drops whichever member has the larger mean |r| to the
    other remaining columns (the later column on a tie). Categorical
    covariates skip the correlation stage; a categorical with one observed
    level counts as zero variance.
    """
    if not 0 <= variance_threshold < 1:
        raise DomainError("variance_threshold must lie in [0, 1)")
    if not 0 < correlation_threshold <= 1:
        raise DomainError("correlation_threshold must lie in (0, 1]")
    names = list(dataset.covariate_names if covariates is None else covariates)
    warnings = []
    low_var, numeric = [], []
    for name in names:
        col = dataset.column(name)
        obs = col[~np.isnan(col)]
        if name in dataset.categorical:
            if len(np.unique(obs)) < 2:
                low_var.append(name)
            continue
        var = float(np.var(obs, ddof=1)) if len(obs) > 1 else 0.0
        if var < variance_threshold:
            low_var.append(name)
        else:
            numeric.append(name)

    dropped = []
    if len(numeric) > 1:
        X = np.column_stack([dataset.column(n) for n in numeric])
        R = pairwise_abs_correlation(X)
        for a in range(len(numeric)):
            for b in range(a + 1, len(numeric)):
                if np.isnan(R[a, b]):
                    msg = f"correlation of {numeric[a]!r} and {numeric[b]!r} undefined; pair skipped"
                    warnings.append(msg)
                    log.warning(msg)
        alive = list(range(len(numeric)))
        while True:
            best = None
            for ia, a in enumerate(alive):
                for b in alive[ia + 1:]:
                    r = R[a, b]
                    if not np.isnan(r) and r > correlation_threshold and (best is None or r > best[0]):
                        best = (r, a, b)
            if best is None:
                break
            r, a, b = best

            def mean_r(j):
                vals = [R[j, k] for k in alive if k != j and not np.isnan(R[j, k])]
                return sum(vals) / len(vals)

            ma, mb = mean_r(a), mean_r(b)
            loser, partner = (a, b) if ma > mb else (b, a)
            dropped.append((numeric[loser], numeric[partner], float(r)))
            alive.remove(loser)

    gone = set(low_var) | {d[0] for d in dropped}
    kept = tuple(n for n in names if n not in gone)
    return FeatureSelectionResult(kept, tuple(low_var), tuple(dropped), tuple(warnings))
