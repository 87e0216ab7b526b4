"""Bagged regression trees (CART with variance-reduction splits).

Targets are kernel runtimes in microseconds. The ensemble is deliberately
plain: bootstrap sampling per tree, exact split search over every feature,
mean-of-leaves prediction. Everything is seeded through counter-based
Philox streams, so refitting with the same data and seed reproduces the
ensemble bit for bit.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class ForestHyperparams:
    n_trees: int = 100
    max_depth: int = 12
    min_leaf: int = 2
    max_features: int | None = None  # None: consider every feature at each split

    def validate(self) -> None:
        if self.n_trees < 1 or self.max_depth < 1 or self.min_leaf < 1:
            raise ValueError("hyperparams must be positive")

    def to_dict(self) -> dict:
        return {
            "n_trees": self.n_trees,
            "max_depth": self.max_depth,
            "min_leaf": self.min_leaf,
            "max_features": self.max_features,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ForestHyperparams":
        return cls(
            n_trees=d["n_trees"],
            max_depth=d["max_depth"],
            min_leaf=d["min_leaf"],
            max_features=d.get("max_features"),
        )


class RegressionTree:
    """One CART regressor stored as flat node arrays.

    Internal nodes route `x[feature] <= threshold` to the left child; leaves
    carry the mean target of their training rows.
    """

    def __init__(
        self,
        feature: np.ndarray,
        threshold: np.ndarray,
        left: np.ndarray,
        right: np.ndarray,
        value: np.ndarray,
    ) -> None:
        self.feature = feature      # -1 marks a leaf
        self.threshold = threshold
        self.left = left
        self.right = right
        self.value = value

    def predict(self, X: np.ndarray) -> np.ndarray:
        node = np.zeros(len(X), dtype=np.int64)
        while True:
            feat = self.feature[node]
            live = feat >= 0
            if not live.any():
                break
            idx = np.flatnonzero(live)
            f = feat[idx]
            go_left = X[idx, f] <= self.threshold[node[idx]]
            node[idx] = np.where(go_left, self.left[node[idx]], self.right[node[idx]])
        return self.value[node]

    def node_documents(self) -> list[dict]:
        nodes = []
        for i in range(len(self.feature)):
            if self.feature[i] < 0:
                nodes.append({"value_us": float(self.value[i])})
            else:
                nodes.append(
                    {
                        "feature_index": int(self.feature[i]),
                        "threshold": float(self.threshold[i]),
                        "left": int(self.left[i]),
                        "right": int(self.right[i]),
                    }
                )
        return nodes

    @classmethod
    def from_node_documents(cls, nodes: list[dict]) -> "RegressionTree":
        n = len(nodes)
        feature = np.full(n, -1, dtype=np.int64)
        threshold = np.zeros(n, dtype=np.float64)
        left = np.zeros(n, dtype=np.int64)
        right = np.zeros(n, dtype=np.int64)
        value = np.zeros(n, dtype=np.float64)
        for i, node in enumerate(nodes):
            if "value_us" in node:
                value[i] = node["value_us"]
            else:
                feature[i] = node["feature_index"]
                threshold[i] = node["threshold"]
                left[i] = node["left"]
                right[i] = node["right"]
        return cls(feature, threshold, left, right, value)


def _best_split(
    X: np.ndarray, y: np.ndarray, feature_ids: np.ndarray, min_leaf: int
) -> tuple[int, float] | None:
    """Exact variance-reduction search over the given features.

    Returns (feature_index, threshold) for the split with the lowest summed
    child SSE, or None when no split satisfies the min_leaf constraint. Ties
    resolve to the smallest split position, then the smallest feature id.
    """
    n = len(y)
    if n < 2 * min_leaf:
        return None
    Xf = X[:, feature_ids]
    order = np.argsort(Xf, axis=0, kind="stable")
    Xs = np.take_along_axis(Xf, order, axis=0)
    ys = y[order]  # (n, f): y reordered per feature
    csum = np.cumsum(ys, axis=0)
    csq = np.cumsum(ys * ys, axis=0)
    total_sum = csum[-1]
    total_sq = csq[-1]
    left_n = np.arange(1, n, dtype=np.float64)[:, None]
    right_n = n - left_n
    ls, lq = csum[:-1], csq[:-1]
    rs, rq = total_sum - ls, total_sq - lq
    sse = (lq - ls * ls / left_n) + (rq - rs * rs / right_n)
    sse[Xs[1:] == Xs[:-1]] = np.inf  # cannot split between equal values
    if min_leaf > 1:
        sse[: min_leaf - 1] = np.inf
        sse[n - min_leaf :] = np.inf
    flat = np.argmin(sse)
    pos, fcol = np.unravel_index(flat, sse.shape)
    if not np.isfinite(sse[pos, fcol]):
        return None
    threshold = (Xs[pos, fcol] + Xs[pos + 1, fcol]) / 2.0
    return int(feature_ids[fcol]), float(threshold)


def _grow_tree(
    X: np.ndarray,
    y: np.ndarray,
    hp: ForestHyperparams,
    rng: np.random.Generator,
) -> RegressionTree:
    feature: list[int] = []
    threshold: list[float] = []
    left: list[int] = []
    right: list[int] = []
    value: list[float] = []

    def new_node() -> int:
        feature.append(-1)
        threshold.append(0.0)
        left.append(0)
        right.append(0)
        value.append(0.0)
        return len(feature) - 1

    n_features = X.shape[1]
    root = new_node()
    stack: list[tuple[int, np.ndarray, int]] = [(root, np.arange(len(y)), 0)]
    while stack:
        node, rows, depth = stack.pop()
        y_node = y[rows]
        value[node] = float(y_node.mean())
        if depth >= hp.max_depth or len(rows) < 2 * hp.min_leaf:
            continue
        if y_node.max() == y_node.min():
            continue  # pure node
        if hp.max_features is not None and hp.max_features < n_features:
            feats = np.sort(rng.choice(n_features, size=hp.max_features, replace=False))
        else:
            feats = np.arange(n_features)
        split = _best_split(X[rows], y_node, feats, hp.min_leaf)
        if split is None:
            continue
        fid, thr = split
        mask = X[rows, fid] <= thr
        feature[node] = fid
        threshold[node] = thr
        lchild, rchild = new_node(), new_node()
        left[node], right[node] = lchild, rchild
        # Push right first so the left subtree is laid out first (stable ids).
        stack.append((rchild, rows[~mask], depth + 1))
        stack.append((lchild, rows[mask], depth + 1))
    return RegressionTree(
        np.array(feature, dtype=np.int64),
        np.array(threshold, dtype=np.float64),
        np.array(left, dtype=np.int64),
        np.array(right, dtype=np.int64),
        np.array(value, dtype=np.float64),
    )


class BaggedForest:
    """Mean-of-trees regressor over bootstrap resamples."""

    def __init__(self, trees: list[RegressionTree], hyperparams: ForestHyperparams, seed: int) -> None:
        self.trees = trees
        self.hyperparams = hyperparams
        self.seed = seed

    @classmethod
    def fit(
        cls, X: np.ndarray, y: np.ndarray, hyperparams: ForestHyperparams | None = None, seed: int = 0
    ) -> "BaggedForest":
        hp = hyperparams or ForestHyperparams()
        hp.validate()
        X = np.asarray(X, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
        n = len(y)
        trees = []
        for t in range(hp.n_trees):
            rng = np.random.Generator(
                np.random.Philox(np.random.SeedSequence([seed, t]).generate_state(2, np.uint64))
            )
            rows = rng.integers(0, n, size=n)
            trees.append(_grow_tree(X[rows], y[rows], hp, rng))
        return cls(trees, hp, seed)

    def predict(self, X: np.ndarray) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        per_tree = np.stack([tree.predict(X) for tree in self.trees], axis=1)
        # Sorting canonicalizes the summation order: tree order never affects
        # the prediction, even at float precision.
        return np.sort(per_tree, axis=1).mean(axis=1)

    def predict_one(self, x: np.ndarray) -> float:
        return float(self.predict(x.reshape(1, -1))[0])
