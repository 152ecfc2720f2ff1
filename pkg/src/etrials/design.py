"""Covariate matrices for the forest and the linear models.

Missing numeric cells are replaced by the column median and flagged with an
extra ``<name>__missing`` indicator column. Only pre-treatment covariates go
through here, so the fill values never depend on assignment or outcomes.
"""
from __future__ import annotations

import numpy as np

from .data_model import TrialDataset

PROXIMAL_COVARIATE = "proximal_outcome"


def adjustment_columns(dataset: TrialDataset, outcome: str, covariates=None,
                       proximal_covariate: bool = True):
    """Raw covariate block used to adjust ``outcome``.

    Returns ``(matrix, names, categorical_names, categories)``. For the
    distal outcome the proximal outcome is appended as one more numeric
    column when ``proximal_covariate`` is set.
    """
    names = list(dataset.covariate_names if covariates is None else covariates)
    idx = [dataset.covariate_names.index(n) for n in names]
    X = dataset.covariates[:, idx]
    cats = tuple(n for n in names if n in dataset.categorical)
    categories = {n: dataset.categories[n] for n in cats}
    if outcome == "distal" and proximal_covariate:
        X = np.column_stack([X, dataset.proximal_outcome])
        names.append(PROXIMAL_COVARIATE)
    return X, tuple(names), cats, categories


def _median_fill(col):
    miss = np.isnan(col)
    if not miss.any():
        return col, None
    fill = np.median(col[~miss]) if (~miss).any() else 0.0
    out = col.copy()
    out[miss] = fill
    return out, miss.astype(float)


def forest_features(X, names, categorical=(), categories=None):
    """Matrix for the in-repo forest.

    Categorical columns keep their integer codes; a missing categorical cell
    gets its own extra level. Returns ``(matrix, is_categorical, names)``.
    """
    categories = categories or {}
    X = np.asarray(X, dtype=float)
    cols, cat_mask, out_names = [], [], []
    extra, extra_names = [], []
    for j, name in enumerate(names):
        col = X[:, j]
        if name in categorical:
            k = len(categories.get(name, ())) or (int(np.nanmax(col)) + 1 if (~np.isnan(col)).any() else 0)
            col = np.where(np.isnan(col), k, col)
            cols.append(col)
            cat_mask.append(True)
            out_names.append(name)
            continue
        filled, ind = _median_fill(col)
        cols.append(filled)
        cat_mask.append(False)
        out_names.append(name)
        if ind is not None:
            extra.append(ind)
            extra_names.append(f"{name}__missing")
    cols += extra
    cat_mask += [False] * len(extra)
    out_names += extra_names
    M = np.column_stack(cols) if cols else np.empty((X.shape[0], 0))
    return M, np.asarray(cat_mask, dtype=bool), tuple(out_names)


def linear_features(X, names, categorical=(), categories=None):
    """Numeric matrix for least squares: categoricals one-hot, first level dropped."""
    categories = categories or {}
    X = np.asarray(X, dtype=float)
    cols, out_names, extra, extra_names = [], [], [], []
    for j, name in enumerate(names):
        col = X[:, j]
        if name in categorical:
            codes = np.where(np.isnan(col), -1, col).astype(int)
            levels = sorted(set(codes.tolist()))
            labels = categories.get(name, ())
            for lv in levels[1:]:
                cols.append((codes == lv).astype(float))
                tag = "NA" if lv < 0 else (labels[lv] if lv < len(labels) else str(lv))
                out_names.append(f"{name}[{tag}]")
            continue
        filled, ind = _median_fill(col)
        cols.append(filled)
        out_names.append(name)
        if ind is not None:
            extra.append(ind)
            extra_names.append(f"{name}__missing")
    cols += extra
    out_names += extra_names
    M = np.column_stack(cols) if cols else np.empty((X.shape[0], 0))
    return M, tuple(out_names)
