"""CART classification trees and a bagged random forest, written from scratch.

Trees split greedily on weighted Gini impurity, ``x[feature] <= threshold``
going left, with thresholds at midpoints between consecutive distinct values.
Leaves keep the class-count vector of the training rows that reached them;
forest probabilities average the per-tree leaf frequencies.

The growing and prediction kernels are compiled with numba: per-participant
cross-validation fits thousands of small trees.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numba
import numpy as np

logger = logging.getLogger(__name__)

_EPS = 1e-12


def gini(counts: Sequence[float]) -> float:
    counts = np.asarray(counts, dtype=float)
    n = counts.sum()
    if n == 0:
        return 0.0
    p = counts / n
    return float(1.0 - np.sum(p * p))


def weighted_gini(left_counts: Sequence[float], right_counts: Sequence[float]) -> float:
    nl, nr = float(np.sum(left_counts)), float(np.sum(right_counts))
    return (nl * gini(left_counts) + nr * gini(right_counts)) / (nl + nr)


@numba.njit(cache=True)
def _gini_from(counts, n):
    if n == 0:
        return 0.0
    s = 0.0
    for c in range(counts.shape[0]):
        p = counts[c] / n
        s += p * p
    return 1.0 - s


@numba.njit(cache=True)
def _best_split(X, y, idx, n_classes, features, min_leaf):
    """Best (feature, threshold, impurity) over ``features`` for rows ``idx``.

    Returns feature -1 when no admissible split exists. Ties keep the first
    candidate in ``features`` order, then the smallest threshold.
    """
    n = idx.shape[0]
    best_f = -1
    best_thr = 0.0
    best_imp = np.inf
    total = np.zeros(n_classes)
    for i in range(n):
        total[y[idx[i]]] += 1.0
    vals = np.empty(n)
    for fi in range(features.shape[0]):
        f = features[fi]
        for i in range(n):
            vals[i] = X[idx[i], f]
        order = np.argsort(vals, kind="mergesort")
        left = np.zeros(n_classes)
        for k in range(n - 1):
            left[y[idx[order[k]]]] += 1.0
            v0 = vals[order[k]]
            v1 = vals[order[k + 1]]
            if v1 <= v0:
                continue
            nl = k + 1
            nr = n - nl
            if nl < min_leaf or nr < min_leaf:
                continue
            right = total - left
            imp = (nl * _gini_from(left, nl) + nr * _gini_from(right, nr)) / n
            if imp < best_imp - 1e-12:
                best_imp = imp
                best_f = f
                best_thr = 0.5 * (v0 + v1)
    return best_f, best_thr, best_imp


@numba.njit(cache=True)
def _grow(X, y, idx, n_classes, max_depth, min_leaf, k_features, feature_keys):
    """Grow one tree depth-first; nodes are numbered in creation order.

    ``feature_keys[node]`` holds one random key per feature; the node samples
    the ``k_features`` features with the smallest keys. ``max_depth < 0``
    means unlimited.
    """
    d = X.shape[1]
    cap = 2 * idx.shape[0] + 1
    feat = np.full(cap, -1, dtype=np.int64)
    thr = np.zeros(cap)
    left = np.full(cap, -1, dtype=np.int64)
    right = np.full(cap, -1, dtype=np.int64)
    value = np.zeros((cap, n_classes))

    stack_rows = [idx]
    stack_node = [0]
    stack_depth = [0]
    n_nodes = 1
    while len(stack_node) > 0:
        rows = stack_rows.pop()
        node = stack_node.pop()
        depth = stack_depth.pop()
        n = rows.shape[0]
        for i in range(n):
            value[node, y[rows[i]]] += 1.0
        if n < 2 * min_leaf or (max_depth >= 0 and depth >= max_depth):
            continue
        if _gini_from(value[node], n) <= 1e-12:
            continue
        if k_features >= d:
            features = np.arange(d)
        else:
            features = np.sort(np.argsort(feature_keys[node % feature_keys.shape[0]])[:k_features])
        f, t, _ = _best_split(X, y, rows, n_classes, features, min_leaf)
        if f < 0:
            continue
        mask = np.empty(n, dtype=np.bool_)
        for i in range(n):
            mask[i] = X[rows[i], f] <= t
        feat[node] = f
        thr[node] = t
        lnode = n_nodes
        rnode = n_nodes + 1
        n_nodes += 2
        left[node] = lnode
        right[node] = rnode
        # push right first so the left subtree is expanded first
        stack_rows.append(rows[~mask])
        stack_node.append(rnode)
        stack_depth.append(depth + 1)
        stack_rows.append(rows[mask])
        stack_node.append(lnode)
        stack_depth.append(depth + 1)
    return feat[:n_nodes], thr[:n_nodes], left[:n_nodes], right[:n_nodes], value[:n_nodes]


@numba.njit(cache=True)
def _leaf_freqs(feat, thr, left, right, value, X):
    out = np.empty((X.shape[0], value.shape[1]))
    for i in range(X.shape[0]):
        node = 0
        while feat[node] >= 0:
            if X[i, feat[node]] <= thr[node]:
                node = left[node]
            else:
                node = right[node]
        total = value[node].sum()
        for c in range(value.shape[1]):
            out[i, c] = value[node, c] / total
    return out


@dataclass(frozen=True)
class TreeParams:
    max_depth: int | None = None
    min_leaf: int = 1
    feature_subset_size: int | None = None  # None: all features
    rng_seed: int = 0


@dataclass
class DecisionTree:
    """Flat node arrays; ``feature[i] == -1`` marks a leaf."""

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray

    @property
    def n_nodes(self) -> int:
        return int(self.feature.shape[0])

    @property
    def n_classes(self) -> int:
        return int(self.value.shape[1])

    def predict_proba(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        return _leaf_freqs(self.feature, self.threshold, self.left, self.right, self.value, X)

    def leaf_of(self, x) -> int:
        node = 0
        while self.feature[node] >= 0:
            node = self.left[node] if x[self.feature[node]] <= self.threshold[node] else self.right[node]
        return int(node)

    def depth(self) -> int:
        def walk(node: int) -> int:
            if self.feature[node] < 0:
                return 0
            return 1 + max(walk(int(self.left[node])), walk(int(self.right[node])))
        return walk(0)

    def to_nodes(self) -> list[list]:
        return [
            [int(self.feature[i]), float(self.threshold[i]), int(self.left[i]),
             int(self.right[i]), [float(v) for v in self.value[i]]]
            for i in range(self.n_nodes)
        ]

    @classmethod
    def from_nodes(cls, nodes: list[list]) -> DecisionTree:
        return cls(
            feature=np.array([n[0] for n in nodes], dtype=np.int64),
            threshold=np.array([n[1] for n in nodes], dtype=np.float64),
            left=np.array([n[2] for n in nodes], dtype=np.int64),
            right=np.array([n[3] for n in nodes], dtype=np.int64),
            value=np.array([n[4] for n in nodes], dtype=np.float64),
        )

    @classmethod
    def constant(cls, n_classes: int, label: int, count: float = 1.0) -> DecisionTree:
        value = np.zeros((1, n_classes))
        value[0, label] = count
        return cls(np.array([-1]), np.zeros(1), np.array([-1]), np.array([-1]), value)


def _as_arrays(X, y) -> tuple[np.ndarray, np.ndarray]:
    X = np.ascontiguousarray(np.asarray(X, dtype=np.float64))
    y = np.ascontiguousarray(np.asarray(y, dtype=np.int64))
    if X.ndim != 2 or y.shape != (X.shape[0],):
        raise ValueError("X must be (n, d) and y must be (n,)")
    return X, y


def _fit_tree(X, y, n_classes, idx, params: TreeParams, rng: np.random.Generator) -> DecisionTree:
    d = X.shape[1]
    k = d if params.feature_subset_size is None else max(1, min(d, params.feature_subset_size))
    cap = 2 * idx.shape[0] + 1
    keys = rng.random((cap, d)) if k < d else np.zeros((1, d))
    max_depth = -1 if params.max_depth is None else params.max_depth
    arrays = _grow(X, y, idx, n_classes, max_depth, params.min_leaf, k, keys)
    return DecisionTree(*arrays)


def train_tree(X, y, params: TreeParams = TreeParams(), n_classes: int | None = None) -> DecisionTree:
    """Fit a single CART tree on all rows (no bootstrap)."""
    X, y = _as_arrays(X, y)
    if X.shape[0] == 0:
        raise ValueError("cannot train on zero rows")
    n_classes = int(y.max()) + 1 if n_classes is None else n_classes
    rng = np.random.default_rng(params.rng_seed)
    return _fit_tree(X, y, n_classes, np.arange(X.shape[0], dtype=np.int64), params, rng)


@dataclass
class RandomForest:
    trees: list[DecisionTree]
    n_classes: int

    def predict_proba(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        total = np.zeros((X.shape[0], self.n_classes))
        for tree in self.trees:
            total += tree.predict_proba(X)
        return total / len(self.trees)

    def predict(self, X) -> np.ndarray:
        return np.argmax(self.predict_proba(X), axis=1)


def fit_forest(
    X, y, n_classes: int, n_trees: int, params: TreeParams, bootstrap: bool = True
) -> RandomForest:
    """Bagged forest; tree ``i`` draws from its own child seed, so the first
    ``m`` trees of an ``n``-tree forest equal an ``m``-tree forest."""
    X, y = _as_arrays(X, y)
    n = X.shape[0]
    children = np.random.SeedSequence(params.rng_seed).spawn(n_trees)
    trees = []
    for seq in children:
        rng = np.random.default_rng(seq)
        if bootstrap:
            idx = np.sort(rng.integers(0, n, size=n)).astype(np.int64)
        else:
            idx = np.arange(n, dtype=np.int64)
        trees.append(_fit_tree(X, y, n_classes, idx, params, rng))
    return RandomForest(trees, n_classes)


@dataclass(frozen=True)
class ForestParams:
    n_trees: int
    max_depth: int | None
    min_leaf: int = 1
    feature_subset_size: int | None = None

    def simplicity(self) -> tuple[float, int]:
        depth = math.inf if self.max_depth is None else self.max_depth
        return (depth, self.n_trees)

    def to_dict(self) -> dict:
        return {
            "n_trees": self.n_trees,
            "max_depth": self.max_depth,
            "min_leaf": self.min_leaf,
            "feature_subset_size": self.feature_subset_size,
        }


def default_grid(n_features: int) -> list[ForestParams]:
    k = math.ceil(math.sqrt(n_features))
    return [
        ForestParams(n_trees=t, max_depth=depth, min_leaf=1, feature_subset_size=k)
        for depth in (2, 4, None)
        for t in (25, 100)
    ]


def stratified_folds(y: np.ndarray, k: int, rng: np.random.Generator) -> list[np.ndarray]:
    """Split row indices into ``k`` folds, dealing each class round-robin.

    Falls back to plain shuffled folds when some class has fewer than ``k``
    rows; with fewer than ``k`` rows overall this becomes leave-one-out.
    """
    n = y.shape[0]
    if n < k:
        logger.info("only %d rows; using leave-one-out instead of %d folds", n, k)
        return [np.array([i], dtype=np.int64) for i in range(n)]
    classes, counts = np.unique(y, return_counts=True)
    folds: list[list[int]] = [[] for _ in range(k)]
    if counts.min() < k:
        logger.warning("class with fewer than %d rows; using unstratified folds", k)
        for pos, i in enumerate(rng.permutation(n)):
            folds[pos % k].append(int(i))
    else:
        pos = 0
        for c in classes:
            for i in rng.permutation(np.flatnonzero(y == c)):
                folds[pos % k].append(int(i))
                pos += 1
    return [np.array(sorted(f), dtype=np.int64) for f in folds]


@dataclass
class CVResult:
    params: ForestParams
    accuracy: float
    scores: list[tuple[ForestParams, float]] = field(default_factory=list)


def cross_validate(
    X, y, n_classes: int, grid: Sequence[ForestParams], k: int = 3, seed: int = 0
) -> CVResult:
    """Mean ``k``-fold accuracy per grid point; best wins, ties go to the simplest
    setting (smallest depth, then fewest trees)."""
    X, y = _as_arrays(X, y)
    folds = stratified_folds(y, k, np.random.default_rng(seed))
    all_idx = np.arange(X.shape[0])
    # forests sharing everything but n_trees reuse one fit: tree i is identical
    by_shape: dict[tuple, list[ForestParams]] = {}
    for p in grid:
        by_shape.setdefault((p.max_depth, p.min_leaf, p.feature_subset_size), []).append(p)
    acc: dict[ForestParams, list[float]] = {p: [] for p in grid}
    for fold_no, test in enumerate(folds):
        train = np.setdiff1d(all_idx, test)
        if train.shape[0] == 0:
            continue
        for (depth, min_leaf, k_feat), members in by_shape.items():
            most = max(p.n_trees for p in members)
            forest = fit_forest(
                X[train], y[train], n_classes, most,
                TreeParams(depth, min_leaf, k_feat, rng_seed=seed + 1000 * (fold_no + 1)),
            )
            per_tree = [t.predict_proba(X[test]) for t in forest.trees]
            for p in members:
                proba = np.mean(per_tree[: p.n_trees], axis=0)
                acc[p].append(float(np.mean(np.argmax(proba, axis=1) == y[test])))
    scores = [(p, float(np.mean(acc[p])) if acc[p] else 0.0) for p in grid]
    best_p, best_a = scores[0]
    for p, a in scores[1:]:
        if a > best_a + _EPS or (abs(a - best_a) <= _EPS and p.simplicity() < best_p.simplicity()):
            best_p, best_a = p, a
    return CVResult(best_p, best_a, scores)
