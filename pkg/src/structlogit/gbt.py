"""Gradient-boosted regression trees for the biased logistic oracle.

Stochastic gradient boosting in the classic mold: each round draws a
row subsample, grows one least-squares tree per label on the softmax
residuals, then replaces every leaf value by a line-searched Newton
step on the actual biased logistic loss restricted to that leaf's rows
and shrinks it.  Because each leaf's 1-d problem is concave and the
guarded step never decreases it, a round can only improve the training
objective.

Leaf-size floor: every leaf must hold at least ``ceil(min_leaf_frac *
K)`` subsampled rows, with K the full row count, so each leaf also
covers at least that many of all rows.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .oracle import (BiasedLogRegProblem, FitConfig, ZeroClassifier,
                     _log_softmax_rows, logistic_objective)

__all__ = ["RegressionTree", "BoostedTreesClassifier", "fit_gbt"]


@dataclass
class RegressionTree:
    """Binary tree in preorder parallel arrays; feature -1 marks a leaf.

    Internal node i sends rows with ``x[feature[i]] <= threshold[i]`` to
    ``left[i]``, the rest to ``right[i]``.  ``value`` is the additive
    score at leaves (zero elsewhere).
    """

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray

    def leaf_of(self, X: np.ndarray) -> np.ndarray:
        """Leaf node index for every row, by masked descent."""
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        node = np.zeros(X.shape[0], dtype=np.int64)
        # depth is tiny; iterate until every row sits at a leaf
        while True:
            f = self.feature[node]
            active = f >= 0
            if not active.any():
                return node
            rows = np.nonzero(active)[0]
            nd = node[rows]
            goes_left = X[rows, f[rows]] <= self.threshold[nd]
            node[rows] = np.where(goes_left, self.left[nd], self.right[nd])

    def apply(self, X: np.ndarray) -> np.ndarray:
        return self.value[self.leaf_of(X)]

    @property
    def num_leaves(self) -> int:
        return int((self.feature < 0).sum())


class _TreeBuilder:
    def __init__(self):
        self.feature = []
        self.threshold = []
        self.left = []
        self.right = []
        self.value = []

    def add(self, feature, threshold, value):
        i = len(self.feature)
        self.feature.append(feature)
        self.threshold.append(threshold)
        self.left.append(-1)
        self.right.append(-1)
        self.value.append(value)
        return i

    def build(self) -> RegressionTree:
        return RegressionTree(np.asarray(self.feature, dtype=np.int32),
                              np.asarray(self.threshold, dtype=np.float64),
                              np.asarray(self.left, dtype=np.int32),
                              np.asarray(self.right, dtype=np.int32),
                              np.asarray(self.value, dtype=np.float64))


def _grow_tree(X: np.ndarray, r: np.ndarray, max_depth: int,
               min_leaf: int) -> RegressionTree:
    """Greedy least-squares tree on residuals ``r``; deterministic ties."""
    b = _TreeBuilder()

    def best_split(rows):
        n = rows.shape[0]
        if n < 2 * min_leaf:
            return None
        best = None
        for f in range(X.shape[1]):
            xv = X[rows, f]
            order = np.argsort(xv, kind="stable")
            xs = xv[order]
            rs = r[rows[order]]
            csum = np.cumsum(rs)
            total = csum[-1]
            # candidate boundaries after position k (1-indexed counts)
            ks = np.arange(min_leaf, n - min_leaf + 1)
            if ks.size == 0:
                continue
            distinct = xs[ks - 1] < xs[ks]
            ks = ks[distinct]
            if ks.size == 0:
                continue
            sl = csum[ks - 1]
            gain = sl * sl / ks + (total - sl) ** 2 / (n - ks)
            j = int(np.argmax(gain))
            cand = (float(gain[j]), f, 0.5 * (xs[ks[j] - 1] + xs[ks[j]]),
                    rows[order[:ks[j]]], rows[order[ks[j]:]])
            if best is None or cand[0] > best[0] + 1e-15:
                best = cand
        return best

    def grow(rows, depth):
        mean = float(r[rows].mean())
        if depth >= max_depth:
            return b.add(-1, 0.0, mean)
        split = best_split(rows)
        if split is None:
            return b.add(-1, 0.0, mean)
        _, f, thr, lrows, rrows = split
        node = b.add(f, thr, 0.0)
        li = grow(lrows, depth + 1)
        ri = grow(rrows, depth + 1)
        b.left[node] = li
        b.right[node] = ri
        return node

    grow(np.arange(X.shape[0]), 0)
    return b.build()


class BoostedTreesClassifier:
    """Sum of regression trees per label."""

    kind = "boost"

    def __init__(self, num_labels: int, dim: int, trees=None):
        self.num_labels = int(num_labels)
        self.dim = int(dim)
        self.trees: list[list[RegressionTree]] = \
            trees if trees is not None else [[] for _ in range(num_labels)]

    def scores(self, X: np.ndarray) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        out = np.zeros((X.shape[0], self.num_labels))
        for c, per_class in enumerate(self.trees):
            for tree in per_class:
                out[:, c] += tree.apply(X)
        return out

    @property
    def num_trees(self) -> int:
        return sum(len(t) for t in self.trees)


def _leaf_newton(scores_c, other_lse, is_gold, max_step):
    """Maximize sum[ t*is_gold - log(exp(scores_c + t) + exp_other) ]
    over the scalar t for one leaf, one class.  Concave; guarded Newton
    with halving so the result never falls below t = 0."""

    def split_val(t):
        a = scores_c + t
        m = np.maximum(a, other_lse)
        lse = m + np.log(np.exp(a - m) + np.exp(other_lse - m))
        return float(t * is_gold.sum() - lse.sum())

    t = 0.0
    v0 = split_val(0.0)
    for _ in range(5):
        a = scores_c + t
        m = np.maximum(a, other_lse)
        pc = np.exp(a - m) / (np.exp(a - m) + np.exp(other_lse - m))
        g = float(is_gold.sum() - pc.sum())
        h = float((pc * (1.0 - pc)).sum())
        if h < 1e-12:
            break
        step = g / h
        t_new = float(np.clip(t + step, -max_step, max_step))
        if abs(t_new - t) < 1e-12:
            t = t_new
            break
        t = t_new
    # never leave the leaf worse than before
    for _ in range(40):
        if split_val(t) >= v0:
            break
        t *= 0.5
    else:
        t = 0.0
    return t


def fit_gbt(problem: BiasedLogRegProblem,
            config: FitConfig | None = None,
            init=None) -> BoostedTreesClassifier:
    """Add ``gbt_rounds`` boosting rounds, warm-starting from ``init``.

    Needs at least 20 rows so the leaf-size floor leaves room to split.
    """
    config = config or FitConfig()
    K, L = problem.num_rows, problem.num_labels
    if K < 20:
        raise ValueError(f"boosting needs at least 20 rows, got {K}")
    rng = np.random.default_rng(config.seed)

    if init is not None and init.kind == "boost" and config.warm_start:
        trees = [list(per_class) for per_class in init.trees]
        clf = BoostedTreesClassifier(L, problem.dim, trees)
        scores = clf.scores(problem.features)
    else:
        clf = BoostedTreesClassifier(L, problem.dim)
        scores = np.zeros((K, L))

    X = problem.features
    min_leaf = int(np.ceil(config.gbt_min_leaf_frac * K))
    n_sub = max(2 * min_leaf, int(round(config.gbt_subsample * K)))
    n_sub = min(n_sub, K)
    gold_onehot = np.zeros((K, L), dtype=bool)
    gold_onehot[np.arange(K), problem.gold] = True

    for _ in range(config.gbt_rounds):
        sub = rng.choice(K, size=n_sub, replace=False)
        z = scores + problem.biases
        p = np.exp(_log_softmax_rows(z))
        resid = gold_onehot.astype(np.float64) - p
        round_trees = [
            _grow_tree(X[sub], resid[sub, c], config.gbt_max_depth, min_leaf)
            for c in range(L)
        ]
        # apply sequentially so every leaf optimization sees the scores
        # produced by the classes already updated this round
        for c, tree in enumerate(round_trees):
            leaf_ids = tree.leaf_of(X)
            z = scores + problem.biases
            mx = z.max(axis=1, keepdims=True)
            ez = np.exp(z - mx)
            other = ez.sum(axis=1) - ez[:, c]
            other_lse = mx[:, 0] + np.log(np.maximum(other, 1e-300))
            values = np.zeros(tree.value.shape[0])
            for leaf in np.unique(leaf_ids):
                rows = leaf_ids == leaf
                t = _leaf_newton(z[rows, c], other_lse[rows],
                                 gold_onehot[rows, c],
                                 config.gbt_max_leaf_value)
                values[leaf] = config.gbt_shrinkage * t
            tree.value[:] = values
            scores[:, c] += values[leaf_ids]
            clf.trees[c].append(tree)
    return clf
