"""Isolation Forest built from random axis-aligned splits.

Trees are stored as flat preorder node arrays so that scoring is a handful of
vectorised descents and serialization is a straight array dump.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

EULER_GAMMA = 0.5772156649


def c_factor(n):
    """Average unsuccessful-search path length in a BST of n points."""
    n = np.asarray(n, dtype=np.float64)
    out = np.zeros_like(n)
    big = n > 1
    m = n[big]
    out[big] = 2.0 * (np.log(m - 1.0) + EULER_GAMMA) - 2.0 * (m - 1.0) / m
    return out if out.ndim else float(out)


@dataclass
class IsolationTree:
    feature: np.ndarray  # -1 marks an external node
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    size: np.ndarray

    @property
    def n_nodes(self) -> int:
        return len(self.feature)


def build_tree(x: np.ndarray, height_limit: int, rng: np.random.Generator) -> IsolationTree:
    feature, threshold, left, right, size = [], [], [], [], []

    def grow(rows: np.ndarray, depth: int) -> int:
        node = len(feature)
        feature.append(-1)
        threshold.append(0.0)
        left.append(-1)
        right.append(-1)
        size.append(len(rows))
        if depth >= height_limit or len(rows) <= 1:
            return node
        sub = x[rows]
        lo, hi = sub.min(axis=0), sub.max(axis=0)
        candidates = np.flatnonzero(hi > lo)
        if len(candidates) == 0:
            return node
        q = int(candidates[rng.integers(len(candidates))])
        v = lo[q]
        while not lo[q] < v < hi[q]:
            v = rng.uniform(lo[q], hi[q])
        go_left = sub[:, q] < v
        feature[node] = q
        threshold[node] = float(v)
        left[node] = grow(rows[go_left], depth + 1)
        right[node] = grow(rows[~go_left], depth + 1)
        return node

    grow(np.arange(len(x)), 0)
    return IsolationTree(
        np.array(feature, dtype=np.int64),
        np.array(threshold, dtype=np.float64),
        np.array(left, dtype=np.int64),
        np.array(right, dtype=np.int64),
        np.array(size, dtype=np.int64),
    )


def path_length(tree: IsolationTree, rows: np.ndarray) -> np.ndarray:
    """Edges to the external node plus c(size) at that node, for each row."""
    rows = np.atleast_2d(np.asarray(rows, dtype=np.float64))
    node = np.zeros(len(rows), dtype=np.int64)
    depth = np.zeros(len(rows), dtype=np.float64)
    active = tree.feature[node] >= 0
    while active.any():
        idx = np.flatnonzero(active)
        nd = node[idx]
        goes_left = rows[idx, tree.feature[nd]] < tree.threshold[nd]
        node[idx] = np.where(goes_left, tree.left[nd], tree.right[nd])
        depth[idx] += 1.0
        active = tree.feature[node] >= 0
    return depth + c_factor(tree.size[node])


class IsolationForestModel:
    def __init__(self, trees, psi, n_features, contamination, offset):
        self.trees = list(trees)
        self.psi = int(psi)
        self.n_features = int(n_features)
        self.contamination = float(contamination)
        self.offset = float(offset)

    def mean_path_length(self, rows) -> np.ndarray:
        rows = np.atleast_2d(np.asarray(rows, dtype=np.float64))
        if rows.shape[1] != self.n_features:
            raise ValueError(f"expected {self.n_features} features, got {rows.shape[1]}")
        return np.mean([path_length(t, rows) for t in self.trees], axis=0)

    def score(self, rows) -> np.ndarray:
        """Anomaly score in (0, 1); larger is more anomalous."""
        return 2.0 ** (-self.mean_path_length(rows) / c_factor(self.psi))

    def decision(self, rows) -> np.ndarray:
        """offset - score; negative values are anomalies."""
        return self.offset - self.score(rows)

    def predict(self, rows) -> np.ndarray:
        """+1 normal, -1 anomaly."""
        return np.where(self.decision(rows) < 0, -1, 1)

    # -- persistence ----------------------------------------------------------
    def to_arrays(self, prefix: str = "") -> tuple[dict, dict]:
        sizes = [t.n_nodes for t in self.trees]
        arrays = {
            f"{prefix}feature": np.concatenate([t.feature for t in self.trees]),
            f"{prefix}threshold": np.concatenate([t.threshold for t in self.trees]),
            f"{prefix}left": np.concatenate([t.left for t in self.trees]),
            f"{prefix}right": np.concatenate([t.right for t in self.trees]),
            f"{prefix}size": np.concatenate([t.size for t in self.trees]),
            f"{prefix}tree_nodes": np.array(sizes, dtype=np.int64),
        }
        meta = {"psi": self.psi, "n_features": self.n_features,
                "contamination": self.contamination, "offset": self.offset}
        return meta, arrays

    @classmethod
    def from_arrays(cls, meta: dict, arrays: dict, prefix: str = "") -> "IsolationForestModel":
        trees = []
        start = 0
        for n in arrays[f"{prefix}tree_nodes"]:
            sl = slice(start, start + int(n))
            trees.append(IsolationTree(*(np.asarray(arrays[f"{prefix}{k}"][sl]) for k in
                                         ("feature", "threshold", "left", "right", "size"))))
            start += int(n)
        return cls(trees, meta["psi"], meta["n_features"], meta["contamination"], meta["offset"])


def fit(rows, contamination=0.1, n_trees=100, psi=256, seed=0) -> IsolationForestModel:
    x = np.asarray(rows, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2 or x.shape[1] < 1:
        raise ValueError("fit needs an (n >= 2, d >= 1) matrix")
    if not 0.0 < contamination <= 0.5:
        raise ValueError("contamination must lie in (0, 0.5]")
    if np.all(x == x[0]):
        raise ValueError("degenerate data: all rows are identical")
    psi = min(int(psi), len(x))
    height_limit = math.ceil(math.log2(psi)) if psi > 1 else 0
    children = np.random.SeedSequence(seed).spawn(n_trees)
    trees = []
    for ss in children:
        rng = np.random.default_rng(ss)
        sub = x[rng.choice(len(x), size=psi, replace=False)]
        trees.append(build_tree(sub, height_limit, rng))
    model = IsolationForestModel(trees, psi, x.shape[1], contamination, 0.0)
    scores = model.score(x)
    model.offset = float(np.quantile(scores, 1.0 - contamination))
    return model
