"""Potential-outcome imputers: arm means, per-arm least squares, per-arm forests."""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .design import forest_features, linear_features
from .forest import Forest, ForestParams, derive_seed, forest_train

IMPUTER_KINDS = ("mean", "linear", "forest")


@dataclass(frozen=True)
class ImputerSpec:
    kind: str = "forest"
    n_trees: int = 100
    mtry: int | None = None
    min_leaf: int = 5
    max_depth: int | None = None
    seed: int = 0

    def __post_init__(self):
        if self.kind not in IMPUTER_KINDS:
            raise ValueError(f"kind must be one of {IMPUTER_KINDS}")
        # validates the forest fields
        self.forest_params()

    def forest_params(self) -> ForestParams:
        return ForestParams(n_trees=self.n_trees, mtry=self.mtry, min_leaf=self.min_leaf,
                            max_depth=self.max_depth)

    def with_seed(self, seed: int) -> "ImputerSpec":
        return replace(self, seed=seed)

    def features(self, X, names, categorical=(), categories=None):
        """Build the model matrix this imputer expects.

        Returns ``(matrix, is_categorical)``; only forests keep categorical
        columns as codes.
        """
        if self.kind == "forest":
            M, mask, _ = forest_features(X, names, categorical, categories)
            return M, mask
        M, _ = linear_features(X, names, categorical, categories)
        return M, np.zeros(M.shape[1], dtype=bool)


class _Constant:
    def __init__(self, value):
        self.value = float(value)

    def __call__(self, X):
        return np.full(np.asarray(X).reshape(len(X), -1).shape[0], self.value)


class _Linear:
    def __init__(self, X, y):
        A = np.column_stack([np.ones(len(y)), X])
        self.coef = np.linalg.lstsq(A, y, rcond=None)[0]

    def __call__(self, X):
        X = np.asarray(X, dtype=float).reshape(len(X), -1)
        # row-wise reduction: a row's prediction must not depend on its batch
        return self.coef[0] + (X * self.coef[1:]).sum(axis=1)


class _ForestModel:
    def __init__(self, forest: Forest):
        self.forest = forest

    def __call__(self, X):
        return self.forest.predict(X)


def fit_arm_model(spec: ImputerSpec, X, y, seed: int, categorical=None):
    """Fit one arm's outcome model, or return None when the arm is too small.

    The mean model needs one row, the linear and forest models two.
    """
    y = np.asarray(y, dtype=float)
    n = len(y)
    if spec.kind == "mean":
        return _Constant(y.mean()) if n >= 1 else None
    if n < 2:
        return None
    if spec.kind == "linear":
        return _Linear(np.asarray(X, dtype=float).reshape(n, -1), y)
    return _ForestModel(forest_train(X, y, spec.forest_params(), seed=seed,
                                     categorical=categorical))


def arm_seed(seed: int, arm: int) -> int:
    return derive_seed(seed, arm)


@dataclass(eq=False)
class FittedImputer:
    t_model: object
    c_model: object
    fallback: dict = field(default_factory=dict)

    def predict_t(self, X) -> np.ndarray:
        return self.t_model(X)

    def predict_c(self, X) -> np.ndarray:
        return self.c_model(X)


def assemble(t_model, c_model, y_train) -> FittedImputer:
    """Combine arm models, substituting the pooled training mean for a missing one."""
    fallback = {}
    if t_model is None or c_model is None:
        overall = _Constant(np.mean(y_train))
        if t_model is None:
            t_model, fallback["t"] = overall, "overall training mean"
        if c_model is None:
            c_model, fallback["c"] = overall, "overall training mean"
    return FittedImputer(t_model, c_model, fallback)


def fit_imputer(spec: ImputerSpec, X, T, Y, categorical=None) -> FittedImputer:
    """Fit treated and control outcome models on training rows.

    The held-out unit is never passed in; callers exclude it. Each arm's
    model is seeded from ``(spec.seed, arm)`` only, so two training sets
    that agree on an arm produce the same model for it.
    """
    T = np.asarray(T)
    Y = np.asarray(Y, dtype=float)
    if len(Y) == 0:
        raise ValueError("training set is empty")
    X = np.asarray(X, dtype=float).reshape(len(Y), -1)
    models = {}
    for arm in (1, 0):
        m = T == arm
        models[arm] = fit_arm_model(spec, X[m], Y[m], arm_seed(spec.seed, arm), categorical)
    return assemble(models[1], models[0], Y)
