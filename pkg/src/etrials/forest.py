"""CART regression forest compiled with numba.

Trees are grown on bootstrap resamples (stored as per-sample multiplicities),
sample ``mtry`` candidate features per node and choose the split that
minimises the weighted squared error of the two children. Numeric features
split on midpoints between consecutive distinct values; categorical features
(integer codes ``0..K-1``) split on a prefix of their levels ordered by the
node's target mean, so the number of levels is unbounded.

A binary 0/1 target makes the squared-error criterion identical to the Gini
criterion, which is how the balance test reuses this code as a classifier.

All randomness comes from SplitMix64 streams so a given ``seed`` yields the
same forest on every platform.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numba as nb
import numpy as np

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_S30 = np.uint64(30)
_S27 = np.uint64(27)
_S31 = np.uint64(31)
_S11 = np.uint64(11)
_INV53 = 1.0 / 9007199254740992.0


@nb.njit(cache=True, nogil=True)
def _splitmix_next(state):
    state[0] += _GOLDEN
    z = state[0]
    z = (z ^ (z >> _S30)) * _MIX1
    z = (z ^ (z >> _S27)) * _MIX2
    return z ^ (z >> _S31)


@nb.njit(cache=True, nogil=True)
def _uniform_int(state, n):
    u = np.float64(_splitmix_next(state) >> _S11) * _INV53
    k = np.int64(u * n)
    if k >= n:
        k = n - 1
    return k


def derive_seed(*parts: int) -> int:
    """Mix integers into a 63-bit seed with SplitMix64 finalisation."""
    mask = (1 << 64) - 1
    z = 0
    for part in parts:
        z = (z + 0x9E3779B97F4A7C15 + (int(part) & mask)) & mask
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & mask
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & mask
        z ^= z >> 31
    return z & ((1 << 63) - 1)


@nb.njit(cache=True, nogil=True)
def _grow_i32(a, need):
    if need <= a.shape[0]:
        return a
    b = np.empty(max(need, 2 * a.shape[0]), dtype=a.dtype)
    b[: a.shape[0]] = a
    return b


@nb.njit(cache=True, nogil=True)
def _grow_f64(a, need):
    if need <= a.shape[0]:
        return a
    b = np.empty(max(need, 2 * a.shape[0]), dtype=a.dtype)
    b[: a.shape[0]] = a
    return b


@nb.njit(cache=True, nogil=True)
def _grow_u8(a, need):
    if need <= a.shape[0]:
        return a
    b = np.zeros(max(need, 2 * a.shape[0]), dtype=a.dtype)
    b[: a.shape[0]] = a
    return b


@nb.njit(cache=True, nogil=True)
def _stable_order(vals, m, out):
    # stable insertion sort of positions 0..m-1 by vals; nodes are small
    for k in range(m):
        v = vals[k]
        j = k - 1
        while j >= 0 and vals[out[j]] > v:
            out[j + 1] = out[j]
            j -= 1
        out[j + 1] = k


@nb.njit(cache=True, nogil=True)
def _insertion_sort_int(a, m):
    for k in range(1, m):
        v = a[k]
        j = k - 1
        while j >= 0 and a[j] > v:
            a[j + 1] = a[j]
            j -= 1
        a[j + 1] = v


@nb.njit(cache=True, nogil=True)
def _grow_forest(X, y, is_cat, n_levels, n_trees, mtry, min_leaf, max_depth,
                 bootstrap, seed):
    n, q = X.shape
    max_levels = 1
    for f in range(q):
        if is_cat[f] and n_levels[f] > max_levels:
            max_levels = n_levels[f]

    cap = n_trees * 8 + 16
    feature = np.empty(cap, dtype=np.int32)
    threshold = np.empty(cap, dtype=np.float64)
    left = np.empty(cap, dtype=np.int32)
    right = np.empty(cap, dtype=np.int32)
    value = np.empty(cap, dtype=np.float64)
    cat_offset = np.empty(cap, dtype=np.int32)
    cat_table = np.zeros(64, dtype=np.uint8)
    n_cat = 0
    tree_start = np.empty(n_trees + 1, dtype=np.int32)
    inbag = np.zeros((n_trees, n), dtype=np.int32)
    n_nodes = 0

    master = np.empty(1, dtype=np.uint64)
    master[0] = np.uint64(seed)

    idx = np.empty(n, dtype=np.int64)
    w = np.empty(n, dtype=np.float64)
    feats = np.empty(q, dtype=np.int64)
    vals = np.empty(n, dtype=np.float64)
    lvl_w = np.zeros(max_levels, dtype=np.float64)
    lvl_s = np.zeros(max_levels, dtype=np.float64)
    lvl_rank = np.zeros(max_levels, dtype=np.int64)
    lvl_mean = np.zeros(max_levels, dtype=np.float64)
    best_set = np.zeros(max_levels, dtype=np.uint8)
    cand_set = np.zeros(max_levels, dtype=np.uint8)
    # stack entries: node id, start, end, depth
    st_node = np.empty(2 * n + 2, dtype=np.int64)
    st_start = np.empty(2 * n + 2, dtype=np.int64)
    st_end = np.empty(2 * n + 2, dtype=np.int64)
    st_depth = np.empty(2 * n + 2, dtype=np.int64)
    tmp_idx = np.empty(n, dtype=np.int64)
    order_buf = np.empty(n, dtype=np.int64)
    chosen = np.empty(q, dtype=np.int64)
    tmp_w = np.empty(n, dtype=np.float64)

    for t in range(n_trees):
        tstate = np.empty(1, dtype=np.uint64)
        tstate[0] = _splitmix_next(master)
        tree_start[t] = n_nodes

        if bootstrap:
            for k in range(n):
                inbag[t, _uniform_int(tstate, n)] += 1
        else:
            for k in range(n):
                inbag[t, k] = 1
        m = 0
        for k in range(n):
            if inbag[t, k] > 0:
                idx[m] = k
                w[m] = inbag[t, k]
                m += 1

        root = n_nodes
        n_nodes += 1
        need = n_nodes
        feature = _grow_i32(feature, need)
        threshold = _grow_f64(threshold, need)
        left = _grow_i32(left, need)
        right = _grow_i32(right, need)
        value = _grow_f64(value, need)
        cat_offset = _grow_i32(cat_offset, need)

        sp = 0
        st_node[0] = root
        st_start[0] = 0
        st_end[0] = m
        st_depth[0] = 0
        sp = 1
        while sp > 0:
            sp -= 1
            node = st_node[sp]
            s0 = st_start[sp]
            s1 = st_end[sp]
            depth = st_depth[sp]

            tw = 0.0
            ts = 0.0
            tss = 0.0
            for k in range(s0, s1):
                tw += w[k]
                ts += w[k] * y[idx[k]]
                tss += w[k] * y[idx[k]] * y[idx[k]]
            pure = True
            y0 = y[idx[s0]]
            for k in range(s0 + 1, s1):
                if y[idx[k]] != y0:
                    pure = False
                    break
            # a pure node stores its target exactly, not a rounded weighted mean
            value[node] = y0 if pure else ts / tw
            feature[node] = -1
            threshold[node] = 0.0
            left[node] = -1
            right[node] = -1
            cat_offset[node] = -1

            if pure or tw < 2.0 * min_leaf:
                continue
            if max_depth >= 0 and depth >= max_depth:
                continue

            # sample mtry features without replacement, then visit them in index order
            for f in range(q):
                feats[f] = f
            for j in range(mtry):
                r = j + _uniform_int(tstate, q - j)
                tmpf = feats[j]
                feats[j] = feats[r]
                feats[r] = tmpf
            for j in range(mtry):
                chosen[j] = feats[j]
            _insertion_sort_int(chosen, mtry)

            parent_score = ts * ts / tw
            best_gain = 1e-12 * (abs(tss) + 1.0)
            best_f = -1
            best_thr = 0.0
            best_is_cat = False
            best_k_levels = 0

            for jj in range(mtry):
                f = chosen[jj]
                if is_cat[f]:
                    K = n_levels[f]
                    for lv in range(K):
                        lvl_w[lv] = 0.0
                        lvl_s[lv] = 0.0
                    for k in range(s0, s1):
                        lv = np.int64(X[idx[k], f])
                        lvl_w[lv] += w[k]
                        lvl_s[lv] += w[k] * y[idx[k]]
                    npres = 0
                    for lv in range(K):
                        if lvl_w[lv] > 0.0:
                            lvl_rank[npres] = lv
                            lvl_mean[npres] = lvl_s[lv] / lvl_w[lv]
                            npres += 1
                    if npres < 2:
                        continue
                    order = np.argsort(lvl_mean[:npres], kind="mergesort")
                    lw = 0.0
                    ls = 0.0
                    for r in range(npres - 1):
                        lv = lvl_rank[order[r]]
                        lw += lvl_w[lv]
                        ls += lvl_s[lv]
                        rw = tw - lw
                        if lw < min_leaf or rw < min_leaf:
                            continue
                        rs = ts - ls
                        gain = ls * ls / lw + rs * rs / rw - parent_score
                        if gain > best_gain:
                            best_gain = gain
                            best_f = f
                            best_is_cat = True
                            best_k_levels = r + 1
                            for lv2 in range(K):
                                best_set[lv2] = 0
                            for r2 in range(r + 1):
                                best_set[lvl_rank[order[r2]]] = 1
                else:
                    mm = s1 - s0
                    for k in range(mm):
                        vals[k] = X[idx[s0 + k], f]
                    if mm <= 48:
                        _stable_order(vals, mm, order_buf)
                        order = order_buf
                    else:
                        order = np.argsort(vals[:mm], kind="mergesort")
                    lw = 0.0
                    ls = 0.0
                    for r in range(mm - 1):
                        k = s0 + order[r]
                        lw += w[k]
                        ls += w[k] * y[idx[k]]
                        v0 = vals[order[r]]
                        v1 = vals[order[r + 1]]
                        if v1 <= v0:
                            continue
                        rw = tw - lw
                        if lw < min_leaf or rw < min_leaf:
                            continue
                        rs = ts - ls
                        gain = ls * ls / lw + rs * rs / rw - parent_score
                        if gain > best_gain:
                            best_gain = gain
                            best_f = f
                            best_is_cat = False
                            best_thr = 0.5 * (v0 + v1)
                            if best_thr >= v1:
                                best_thr = v0

            if best_f < 0:
                continue

            # partition [s0, s1) into left then right
            nl = 0
            nr = 0
            for k in range(s0, s1):
                xv = X[idx[k], best_f]
                if best_is_cat:
                    go_left = best_set[np.int64(xv)] == 1
                else:
                    go_left = xv <= best_thr
                if go_left:
                    idx[s0 + nl] = idx[k]
                    w[s0 + nl] = w[k]
                    nl += 1
                else:
                    tmp_idx[nr] = idx[k]
                    tmp_w[nr] = w[k]
                    nr += 1
            for k in range(nr):
                idx[s0 + nl + k] = tmp_idx[k]
                w[s0 + nl + k] = tmp_w[k]

            feature[node] = best_f
            threshold[node] = best_thr
            if best_is_cat:
                K = n_levels[best_f]
                cat_table = _grow_u8(cat_table, n_cat + K)
                cat_offset[node] = n_cat
                for lv in range(K):
                    cat_table[n_cat + lv] = best_set[lv]
                n_cat += K
            lnode = n_nodes
            rnode = n_nodes + 1
            n_nodes += 2
            need = n_nodes
            feature = _grow_i32(feature, need)
            threshold = _grow_f64(threshold, need)
            left = _grow_i32(left, need)
            right = _grow_i32(right, need)
            value = _grow_f64(value, need)
            cat_offset = _grow_i32(cat_offset, need)
            left[node] = lnode
            right[node] = rnode

            st_node[sp] = rnode
            st_start[sp] = s0 + nl
            st_end[sp] = s1
            st_depth[sp] = depth + 1
            sp += 1
            st_node[sp] = lnode
            st_start[sp] = s0
            st_end[sp] = s0 + nl
            st_depth[sp] = depth + 1
            sp += 1

    tree_start[n_trees] = n_nodes
    return (feature[:n_nodes].copy(), threshold[:n_nodes].copy(),
            left[:n_nodes].copy(), right[:n_nodes].copy(),
            value[:n_nodes].copy(), cat_offset[:n_nodes].copy(),
            cat_table[:n_cat].copy(), tree_start, inbag)


@nb.njit(cache=True, nogil=True)
def _leaf_values(feature, threshold, left, right, value, cat_offset, cat_table,
                 n_levels, tree_start, X):
    n = X.shape[0]
    n_trees = tree_start.shape[0] - 1
    out = np.empty((n, n_trees), dtype=np.float64)
    for i in range(n):
        for t in range(n_trees):
            node = tree_start[t]
            while feature[node] >= 0:
                f = feature[node]
                xv = X[i, f]
                if cat_offset[node] >= 0:
                    lv = np.int64(xv) if xv >= 0 else -1
                    go_left = (0 <= lv < n_levels[f]
                               and cat_table[cat_offset[node] + lv] == 1)
                else:
                    go_left = xv <= threshold[node]
                node = left[node] if go_left else right[node]
            out[i, t] = value[node]
    return out


@dataclass(frozen=True)
class ForestParams:
    """Hyperparameters for :func:`forest_train`.

    ``mtry=None`` resolves to ``ceil(q/3)`` for regression and
    ``floor(sqrt(q))`` when ``classification`` is set.
    ``max_depth=None`` means unlimited.
    """

    n_trees: int = 100
    mtry: int | None = None
    min_leaf: int = 5
    max_depth: int | None = None
    bootstrap: bool = True
    classification: bool = False

    def __post_init__(self):
        if self.n_trees < 1:
            raise ValueError("n_trees must be >= 1")
        if self.min_leaf < 1:
            raise ValueError("min_leaf must be >= 1")
        if self.mtry is not None and self.mtry < 1:
            raise ValueError("mtry must be >= 1")
        if self.max_depth is not None and self.max_depth < 0:
            raise ValueError("max_depth must be >= 0")

    def resolve_mtry(self, q: int) -> int:
        if q < 1:
            return 0
        if self.mtry is not None:
            return min(self.mtry, q)
        if self.classification:
            return max(1, int(math.floor(math.sqrt(q))))
        return max(1, math.ceil(q / 3))


@dataclass(frozen=True, eq=False)
class Forest:
    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray
    cat_offset: np.ndarray
    cat_table: np.ndarray
    tree_start: np.ndarray
    inbag: np.ndarray
    n_levels: np.ndarray
    categorical: np.ndarray
    params: ForestParams
    featureless: bool = False

    @property
    def n_trees(self) -> int:
        return len(self.tree_start) - 1

    @property
    def n_features(self) -> int:
        return 0 if self.featureless else len(self.categorical)

    @property
    def oob_mask(self) -> np.ndarray:
        """Boolean ``(n_trees, n_train)``; True where the sample was left out."""
        return self.inbag == 0

    def tree_predictions(self, X) -> np.ndarray:
        X = _as_matrix(X, self.n_features)
        if self.featureless:
            X = np.zeros((X.shape[0], 1))
        return _leaf_values(self.feature, self.threshold, self.left, self.right,
                            self.value, self.cat_offset, self.cat_table,
                            self.n_levels, self.tree_start, X)

    def predict(self, X) -> np.ndarray:
        per_tree = self.tree_predictions(X)
        # centring on the first tree keeps agreeing trees exact
        base = per_tree[:, :1]
        return base[:, 0] + (per_tree - base).mean(axis=1)

    def oob_predict(self, X_train) -> np.ndarray:
        """Average over trees that did not see each training row; NaN if none."""
        per_tree = self.tree_predictions(X_train)
        mask = self.oob_mask.T
        counts = mask.sum(axis=1)
        sums = np.where(mask, per_tree, 0.0).sum(axis=1)
        out = np.full(len(counts), np.nan)
        np.divide(sums, counts, out=out, where=counts > 0)
        return out


def _as_matrix(X, q=None) -> np.ndarray:
    X = np.ascontiguousarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X.reshape(-1, 1) if q in (None, 1) else X.reshape(1, -1)
    if q == 0 and X.ndim == 2 and X.shape[1] == 0:
        return X
    if q is not None and X.shape[1] != q:
        raise ValueError(f"expected {q} features, got {X.shape[1]}")
    return X


def forest_train(X, y, params: ForestParams | None = None, seed: int = 0,
                 categorical=None) -> Forest:
    """Grow a forest on rows ``X`` and targets ``y``.

    Parameters
    ----------
    X : array_like, shape (n, q)
        Feature matrix. Categorical columns must hold integer codes >= 0.
    y : array_like, shape (n,)
        Finite targets.
    params : ForestParams
    seed : int
        Seed of the SplitMix64 stream; tree ``t`` draws from the ``t``-th
        output of that stream.
    categorical : array_like of bool, shape (q,), optional
    """
    params = params or ForestParams()
    X = np.ascontiguousarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X.reshape(-1, 1)
    y = np.ascontiguousarray(y, dtype=np.float64)
    n, q = X.shape
    if n < 1:
        raise ValueError("forest_train needs at least one row")
    if y.shape != (n,):
        raise ValueError("y must have one target per row")
    if not np.all(np.isfinite(y)):
        raise ValueError("targets must be finite")
    if np.isnan(X).any():
        raise ValueError("features contain NaN; impute before training")
    cat = np.zeros(q, dtype=np.bool_) if categorical is None else np.asarray(categorical, dtype=np.bool_)
    n_levels = np.zeros(q, dtype=np.int64)
    for f in np.flatnonzero(cat):
        col = X[:, f]
        if np.any(col < 0) or np.any(col != np.floor(col)):
            raise ValueError(f"categorical column {f} must hold non-negative integer codes")
        n_levels[f] = int(col.max()) + 1 if n else 1

    mtry = params.resolve_mtry(q)
    max_depth = -1 if params.max_depth is None else params.max_depth
    if q == 0:
        # no features: each tree is a root leaf
        X = np.zeros((n, 1))
        cat = np.zeros(1, dtype=np.bool_)
        n_levels = np.zeros(1, dtype=np.int64)
        mtry = 1
        max_depth = 0
    arrays = _grow_forest(X, y, cat, n_levels, params.n_trees, mtry,
                          float(params.min_leaf), max_depth, params.bootstrap,
                          np.uint64(seed & ((1 << 64) - 1)))
    return Forest(*arrays, n_levels=n_levels, categorical=cat, params=params,
                  featureless=q == 0)


def forest_predict(forest: Forest, X) -> np.ndarray:
    return forest.predict(X)
