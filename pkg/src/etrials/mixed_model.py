"""Random-intercept linear mixed model fitted by REML.

Model: ``y = X b + u[cluster] + e`` with ``u ~ N(0, s_u2)`` and
``e ~ N(0, s2)``. Writing ``lam = s_u2 / s2``, the fixed effects and ``s2``
have closed forms given ``lam``; the restricted likelihood is profiled and
maximised over ``lam >= 0`` with a log-scale grid followed by a bounded
one-dimensional search. Every quantity is built from per-cluster sums, so a
likelihood evaluation costs O(n + J p^2).
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg, optimize

log = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class MixedModelFit:
    fixed_effects: dict
    std_errors: dict
    sigma_u2: float
    sigma2: float
    log_likelihood: float
    converged: bool
    cov_fixed: np.ndarray
    variance_ratio: float
    n_obs: int
    n_groups: int
    dropped_columns: tuple = ()
    diagnostics: dict = field(default_factory=dict)

    @property
    def names(self):
        return tuple(self.fixed_effects)


def drop_collinear(X, names, keep_first: int = 2, tol: float = 1e-10):
    """Greedily keep columns that raise the rank; the first ``keep_first`` are forced."""
    kept, dropped = [], []
    basis = np.empty((X.shape[0], 0))
    for j in range(X.shape[1]):
        col = X[:, j]
        norm = np.linalg.norm(col)
        if basis.shape[1]:
            q, _ = np.linalg.qr(basis)
            resid = col - q @ (q.T @ col)
        else:
            resid = col
        if norm > 0 and np.linalg.norm(resid) > tol * max(norm, 1.0):
            kept.append(j)
            basis = np.column_stack([basis, col])
        elif j < keep_first:
            raise ValueError(f"column {names[j]!r} is collinear with earlier columns")
        else:
            dropped.append(names[j])
    return X[:, kept], tuple(names[j] for j in kept), tuple(dropped)


class _Profile:
    def __init__(self, y, X, groups):
        self.y = y
        self.X = X
        self.g = groups
        self.n, self.p = X.shape
        self.J = int(groups.max()) + 1
        self.nj = np.bincount(groups, minlength=self.J).astype(float)
        self.Sx = np.zeros((self.J, self.p))
        np.add.at(self.Sx, groups, X)
        self.Sy = np.bincount(groups, weights=y, minlength=self.J)
        self.XtX = X.T @ X
        self.Xty = X.T @ y
        self.floor = 1e-12 * max(1.0, float(np.mean(y * y)))

    def solve(self, lam):
        w = lam / (1.0 + lam * self.nj)
        A = self.XtX - (self.Sx * w[:, None]).T @ self.Sx
        b = self.Xty - self.Sx.T @ (w * self.Sy)
        factor = linalg.cho_factor(A)
        beta = linalg.cho_solve(factor, b)
        r = self.y - self.X @ beta
        rsum = np.bincount(self.g, weights=r, minlength=self.J)
        rss = float(r @ r - np.sum(w * rsum * rsum))
        sigma2 = max(rss / (self.n - self.p), self.floor)
        logdet_A = 2.0 * float(np.sum(np.log(np.diag(factor[0]))))
        return beta, sigma2, factor, logdet_A

    def reml(self, lam):
        _, sigma2, _, logdet_A = self.solve(lam)
        logdet_H = float(np.sum(np.log1p(lam * self.nj)))
        dof = self.n - self.p
        return -0.5 * (dof * (math.log(2 * math.pi * sigma2) + 1.0) + logdet_H + logdet_A)


def fit_random_intercept(y, X, groups, names, log_lam_bounds=(-10.0, 8.0), grid=73,
                         dropped=()) -> MixedModelFit:
    """REML fit on a full-column-rank design ``X`` with integer ``groups``."""
    y = np.asarray(y, dtype=float)
    X = np.asarray(X, dtype=float)
    groups = np.asarray(groups)
    _, groups = np.unique(groups, return_inverse=True)
    n, p = X.shape
    if n <= p:
        raise ValueError("need more observations than fixed effects")
    prof = _Profile(y, X, groups)
    if prof.J < 2:
        raise ValueError("need at least two clusters")

    lo, hi = log_lam_bounds
    grid_pts = np.linspace(lo, hi, grid)
    values = np.array([prof.reml(math.exp(t)) for t in grid_pts])
    k = int(np.argmax(values))
    a = grid_pts[max(k - 1, 0)]
    b = grid_pts[min(k + 1, grid - 1)]
    res = optimize.minimize_scalar(lambda t: -prof.reml(math.exp(t)), bounds=(a, b),
                                   method="bounded", options={"xatol": 1e-10})
    converged = bool(res.success)
    t_best, l_best = (float(res.x), -float(res.fun)) if -res.fun >= values[k] else (grid_pts[k], values[k])
    lam = math.exp(t_best)
    l_zero = prof.reml(0.0)
    at_upper = t_best >= hi - 1e-6
    if l_zero >= l_best - 1e-9:
        lam, l_best = 0.0, l_zero
    if at_upper:
        converged = False
        log.warning("variance ratio search hit its upper bound (%g)", math.exp(hi))

    beta, sigma2, factor, _ = prof.solve(lam)
    cov = sigma2 * linalg.cho_solve(factor, np.eye(p))
    se = np.sqrt(np.clip(np.diag(cov), 0.0, None))
    return MixedModelFit(
        fixed_effects=dict(zip(names, beta.tolist())),
        std_errors=dict(zip(names, se.tolist())),
        sigma_u2=lam * sigma2,
        sigma2=sigma2,
        log_likelihood=l_best,
        converged=converged,
        cov_fixed=cov,
        variance_ratio=lam,
        n_obs=n,
        n_groups=prof.J,
        dropped_columns=tuple(dropped),
        diagnostics={"optimizer_success": bool(res.success), "optimizer_message": str(res.message),
                     "log_lam_bounds": tuple(log_lam_bounds), "reml_at_zero": l_zero},
    )
