"""Random forest classifier: Gini-impurity trees over bootstrap resamples.

Trees split on threshold midpoints scanned over a per-node random feature
subset, so fitted structure depends only on feature orderings; thresholds
are scale-dependent but the induced partitions are not.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .base import BaseEstimator, check_array, check_X_y, check_is_fitted


@dataclass
class TreeNode:
    """Internal node (feature, threshold, children) or leaf (prob set)."""

    feature: int = -1
    threshold: float = 0.0
    left: Optional["TreeNode"] = None
    right: Optional["TreeNode"] = None
    prob: float = -1.0  # anomaly probability at a leaf

    @property
    def is_leaf(self) -> bool:
        return self.left is None

    def as_dict(self) -> dict:
        if self.is_leaf:
            return {"prob": self.prob}
        return {
            "feature": self.feature,
            "threshold": self.threshold,
            "left": self.left.as_dict(),
            "right": self.right.as_dict(),
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "TreeNode":
        if "prob" in obj:
            return cls(prob=float(obj["prob"]))
        return cls(feature=int(obj["feature"]), threshold=float(obj["threshold"]),
                   left=cls.from_dict(obj["left"]), right=cls.from_dict(obj["right"]))


def _best_split(X: np.ndarray, y: np.ndarray, features: np.ndarray,
                min_leaf: int):
    """Exhaustive threshold scan; returns (score, feature, threshold) or None."""
    n = len(y)
    best = None
    for f in features:
        vals = X[:, f]
        order = np.argsort(vals, kind="mergesort")
        v_sorted = vals[order]
        y_sorted = y[order]
        # cumulative positives let every candidate split be scored in O(1)
        cum_pos = np.cumsum(y_sorted)
        total_pos = cum_pos[-1]
        for i in range(min_leaf, n - min_leaf + 1):
            if v_sorted[i] == v_sorted[i - 1]:
                continue
            left_pos = cum_pos[i - 1]
            right_pos = total_pos - left_pos
            pl = left_pos / i
            pr = right_pos / (n - i)
            gini_l = 1.0 - pl * pl - (1.0 - pl) ** 2
            gini_r = 1.0 - pr * pr - (1.0 - pr) ** 2
            score = (i * gini_l + (n - i) * gini_r) / n
            if best is None or score < best[0] - 1e-15:
                thr = 0.5 * (v_sorted[i - 1] + v_sorted[i])
                best = (score, int(f), float(thr), i)
    return best


def _grow(X: np.ndarray, y: np.ndarray, depth: int, max_depth: Optional[int],
          min_leaf: int, k_features: int, rng: np.random.Generator) -> TreeNode:
    n, m = X.shape
    pos = float(y.sum())
    if (pos == 0 or pos == n or n < 2 * min_leaf
            or (max_depth is not None and depth >= max_depth)):
        return TreeNode(prob=pos / n)
    if k_features >= m:
        features = np.arange(m)
    else:
        features = np.sort(rng.choice(m, size=k_features, replace=False))
    found = _best_split(X, y, features, min_leaf)
    if found is None:
        return TreeNode(prob=pos / n)
    _, feature, threshold, _ = found
    mask = X[:, feature] <= threshold
    return TreeNode(
        feature=feature,
        threshold=threshold,
        left=_grow(X[mask], y[mask], depth + 1, max_depth, min_leaf,
                   k_features, rng),
        right=_grow(X[~mask], y[~mask], depth + 1, max_depth, min_leaf,
                    k_features, rng),
    )


def _tree_scores(node: TreeNode, X: np.ndarray, idx: np.ndarray,
                 out: np.ndarray) -> None:
    if node.is_leaf:
        out[idx] = node.prob
        return
    mask = X[idx, node.feature] <= node.threshold
    _tree_scores(node.left, X, idx[mask], out)
    _tree_scores(node.right, X, idx[~mask], out)


class ForestClassifier(BaseEstimator):
    """Bagged Gini trees; score is the mean leaf anomaly probability.

    ``max_depth=None`` grows unbounded trees. ``features_per_split=None``
    uses ceil(sqrt(n_features)). Fitting is deterministic under ``seed``
    and independent of tree scheduling (each tree owns a spawned seed).
    """

    def __init__(self, n_trees: int = 100, max_depth: Optional[int] = 8,
                 min_leaf: int = 2, features_per_split: Optional[int] = None,
                 seed: int = 0):
        self.n_trees = n_trees
        self.max_depth = max_depth
        self.min_leaf = min_leaf
        self.features_per_split = features_per_split
        self.seed = seed
        self.trees_: Optional[list] = None

    def fit(self, X, y) -> "ForestClassifier":
        X, y = check_X_y(X, y)
        if self.n_trees < 1 or self.min_leaf < 1:
            raise ValueError("ForestClassifier: n_trees and min_leaf must be >= 1")
        if self.max_depth is not None and self.max_depth < 1:
            raise ValueError("ForestClassifier: max_depth must be >= 1 or None")
        if y.sum() == 0 or y.sum() == len(y):
            raise ValueError("ForestClassifier: both classes must be present")
        n, m = X.shape
        k = (self.features_per_split if self.features_per_split is not None
             else int(math.ceil(math.sqrt(m))))
        if not 1 <= k <= m:
            raise ValueError(
                f"ForestClassifier: features_per_split must be in [1, {m}], got {k}")
        seeds = np.random.SeedSequence(self.seed).spawn(self.n_trees)
        trees = []
        for ss in seeds:
            rng = np.random.default_rng(ss)
            boot = rng.integers(0, n, size=n)
            trees.append(_grow(X[boot], y[boot], 0, self.max_depth,
                               self.min_leaf, k, rng))
        self.trees_ = trees
        self.n_features_ = m
        return self

    def anomaly_score(self, X) -> np.ndarray:
        """Mean anomaly probability over trees, in [0, 1]."""
        check_is_fitted(self, "trees_")
        X = check_array(X)
        scores = np.zeros(len(X))
        idx = np.arange(len(X))
        buf = np.empty(len(X))
        for tree in self.trees_:
            _tree_scores(tree, X, idx, buf)
            scores += buf
        return scores / len(self.trees_)

    def predict_proba(self, X) -> np.ndarray:
        s = self.anomaly_score(X)
        return np.stack([1.0 - s, s], axis=1)

    def predict(self, X) -> np.ndarray:
        # a score meeting the threshold counts as anomaly: in screening the
        # tie goes to the sensitive side
        return (self.anomaly_score(X) >= 0.5).astype(np.int64)

    def to_dict(self) -> dict:
        check_is_fitted(self, "trees_")
        return {
            "kind": "forest",
            "n_trees": self.n_trees,
            "max_depth": self.max_depth,
            "min_leaf": self.min_leaf,
            "features_per_split": self.features_per_split,
            "seed": self.seed,
            "trees": [t.as_dict() for t in self.trees_],
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "ForestClassifier":
        model = cls(n_trees=obj["n_trees"], max_depth=obj["max_depth"],
                    min_leaf=obj["min_leaf"],
                    features_per_split=obj["features_per_split"],
                    seed=obj["seed"])
        model.trees_ = [TreeNode.from_dict(t) for t in obj["trees"]]
        return model
