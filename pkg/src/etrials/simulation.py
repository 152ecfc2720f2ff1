"""Synthetic randomized trials with known potential outcomes.

Covariates are ``q`` independent U(0, 1) columns ``u1..uq`` plus, when
``n_levels > 0``, one categorical ``group`` with uniformly drawn levels.
Students are spread over ``n_clusters`` classes, each with a N(0, cluster_sd^2)
intercept. Control outcomes are ``c = f(X) + class intercept + noise`` and
treated outcomes ``t = c + tau``, so every unit effect equals ``tau``.

Outcome functions (``signal`` scales all of them):

* ``constant``: 0
* ``linear``: ``sum_k w_k u_k`` with ``w = (1, -1, 0.5, -0.5, 0.25, ...)``
* ``nonlinear``: ``2 sin(pi u1 u2) + 4 (u3 - 0.5)^2 + 1.5 [u4 > 0.5]`` plus
  a +-0.5 effect by level parity of ``group``; needs ``q >= 4``.

A second (distal) outcome is ``c + N(0, distal_noise_sd^2)`` with effect
``distal_tau``; it is what the report treats as the distal score.
"""
from __future__ import annotations

import csv
from dataclasses import asdict, dataclass, replace

import numpy as np

from .data_model import TrialDataset
from .errors import DomainError

KINDS = ("constant", "linear", "nonlinear")


@dataclass(frozen=True)
class SimulationConfig:
    n: int = 200
    q: int = 5
    n_clusters: int = 10
    tau: float = 0.3
    kind: str = "nonlinear"
    noise_sd: float = 0.5
    p: float = 0.5
    signal: float = 1.0
    cluster_sd: float = 0.0
    n_levels: int = 0
    distal_tau: float | None = None
    distal_noise_sd: float = 0.25

    def __post_init__(self):
        if self.n < 4:
            raise DomainError("need n >= 4")
        if not 0 < self.p < 1:
            raise DomainError("p must lie strictly between 0 and 1")
        if self.kind not in KINDS:
            raise DomainError(f"kind must be one of {KINDS}")
        if self.q < 0 or (self.kind == "nonlinear" and self.q < 4):
            raise DomainError("nonlinear outcomes need q >= 4")
        if self.kind == "linear" and self.q < 1:
            raise DomainError("linear outcomes need q >= 1")
        if self.n_clusters < 1 or self.n_clusters > self.n:
            raise DomainError("n_clusters must lie in [1, n]")
        if self.noise_sd < 0 or self.cluster_sd < 0 or self.distal_noise_sd < 0:
            raise DomainError("standard deviations must be non-negative")
        if self.n_levels < 0:
            raise DomainError("n_levels must be non-negative")


def linear_weights(q: int) -> np.ndarray:
    return np.array([(1.0 if k % 2 == 0 else -1.0) * 0.5 ** (k // 2) for k in range(q)])


def outcome_function(config: SimulationConfig, U: np.ndarray, group: np.ndarray | None) -> np.ndarray:
    n = U.shape[0]
    if config.kind == "constant":
        f = np.zeros(n)
    elif config.kind == "linear":
        f = U @ linear_weights(config.q)
    else:
        f = (2.0 * np.sin(np.pi * U[:, 0] * U[:, 1]) + 4.0 * (U[:, 2] - 0.5) ** 2
             + 1.5 * (U[:, 3] > 0.5))
        if group is not None:
            f = f + np.where(group % 2 == 0, 0.5, -0.5)
    return config.signal * f


@dataclass(frozen=True, eq=False)
class SyntheticTrial:
    dataset: TrialDataset
    true_t: np.ndarray
    true_c: np.ndarray
    true_t_distal: np.ndarray
    true_c_distal: np.ndarray
    config: SimulationConfig
    seed: int

    @property
    def true_ate(self) -> float:
        return float(np.mean(self.true_t - self.true_c))

    @property
    def true_ate_distal(self) -> float:
        return float(np.mean(self.true_t_distal - self.true_c_distal))

    @property
    def records(self):
        return self.dataset.records

    @property
    def assignment(self) -> np.ndarray:
        return self.dataset.arm


def _draw_assignment(rng, n, p):
    # redraw the (probability <= 2 max(p,1-p)^n) all-one-arm outcome
    while True:
        T = (rng.random(n) < p).astype(np.int64)
        if 0 < T.sum() < n:
            return T


def _observed(T, t, c):
    return np.where(T == 1, t, c)


def _assemble(config, seed, T, U, group, cluster, t, c, td, cd):
    covs = {f"u{k + 1}": U[:, k] for k in range(config.q)}
    categorical = ()
    if group is not None:
        covs["group"] = [f"g{int(v):03d}" for v in group]
        categorical = ("group",)
    ids = [f"s{k:05d}" for k in range(config.n)]
    prov = {"simulation": {**asdict(config), "seed": int(seed)}}
    ds = TrialDataset.from_columns(
        ids, T, config.p, _observed(T, t, c), [f"c{int(k):03d}" for k in cluster], covs,
        distal_outcome=_observed(T, td, cd), categorical=categorical, provenance=prov)
    return SyntheticTrial(ds, t, c, td, cd, config, seed)


def generate(config: SimulationConfig | None = None, seed: int = 0) -> SyntheticTrial:
    """Draw covariates, potential outcomes and a Bernoulli(p) assignment."""
    config = config or SimulationConfig()
    rng = np.random.default_rng(seed)
    n = config.n
    U = rng.random((n, config.q))
    group = rng.integers(0, config.n_levels, n) if config.n_levels > 0 else None
    cluster = rng.permutation(np.arange(n) % config.n_clusters)
    intercepts = rng.normal(0.0, 1.0, config.n_clusters) * config.cluster_sd
    noise = rng.normal(0.0, 1.0, n) * config.noise_sd
    c = outcome_function(config, U, group) + intercepts[cluster] + noise
    t = c + config.tau
    cd = c + rng.normal(0.0, 1.0, n) * config.distal_noise_sd
    distal_tau = config.tau if config.distal_tau is None else config.distal_tau
    td = cd + distal_tau
    T = _draw_assignment(rng, n, config.p)
    return _assemble(config, seed, T, U, group, cluster, t, c, td, cd)


def rerandomize(trial: SyntheticTrial, seed: int) -> SyntheticTrial:
    """Same units and potential outcomes, fresh independent assignment."""
    rng = np.random.default_rng([int(seed), 0x5EED])
    T = _draw_assignment(rng, trial.config.n, trial.config.p)
    ds = trial.dataset
    return SyntheticTrial(
        ds.replace(arm=T, proximal_outcome=_observed(T, trial.true_t, trial.true_c),
                   distal_outcome=_observed(T, trial.true_t_distal, trial.true_c_distal)),
        trial.true_t, trial.true_c, trial.true_t_distal, trial.true_c_distal,
        trial.config, trial.seed)


TRUTH_COLUMNS = ("student_id", "t", "c", "t_distal", "c_distal", "true_ate", "true_ate_distal")


def truth_table(trial: SyntheticTrial):
    """Rows for the truth sidecar CSV; the ATE columns repeat on every row."""
    ds = trial.dataset
    ate, ate_d = repr(trial.true_ate), repr(trial.true_ate_distal)
    return [{"student_id": ds.student_id[k], "t": repr(float(trial.true_t[k])),
             "c": repr(float(trial.true_c[k])), "t_distal": repr(float(trial.true_t_distal[k])),
             "c_distal": repr(float(trial.true_c_distal[k])), "true_ate": ate,
             "true_ate_distal": ate_d}
            for k in range(len(ds))]


def write_truth_csv(trial: SyntheticTrial, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, TRUTH_COLUMNS, lineterminator="\n")
        w.writeheader()
        w.writerows(truth_table(trial))


def with_config(config: SimulationConfig, **changes) -> SimulationConfig:
    return replace(config, **changes)
