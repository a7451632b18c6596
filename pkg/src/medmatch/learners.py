"""Conditional-mean regressors used by the GPS model.

``GradientBoostedTrees`` is least-squares boosting over depth-limited
regression trees. Splits are found by an exact scan over the sorted values of
every feature; all features and all nodes of one tree level are scanned in a
single vectorised pass. ``LinearRegressor`` is an ordinary least-squares
alternative with the same interface.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Protocol

import numpy as np

from .errors import ParameterError

__all__ = [
    "Regressor",
    "RegressorSpec",
    "RegressionTree",
    "GradientBoostedTrees",
    "LinearRegressor",
    "make_regressor",
    "regressor_from_dict",
]


class Regressor(Protocol):
    def fit(self, X: np.ndarray, y: np.ndarray) -> "Regressor": ...

    def predict(self, X: np.ndarray) -> np.ndarray: ...

    def to_dict(self) -> dict: ...


@dataclass(frozen=True)
class RegressorSpec:
    kind: str = "gbm"
    n_rounds: int = 100
    max_depth: int = 2
    learning_rate: float = 0.1
    subsample: float = 1.0
    min_samples_leaf: int = 5
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("gbm", "linear"):
            raise ParameterError(f"unknown learner kind {self.kind!r}")
        if self.n_rounds < 1 or self.max_depth < 1 or self.min_samples_leaf < 1:
            raise ParameterError("n_rounds, max_depth and min_samples_leaf must be positive")
        if not 0 < self.learning_rate <= 1:
            raise ParameterError(f"learning_rate must lie in (0, 1], got {self.learning_rate}")
        if not 0 < self.subsample <= 1:
            raise ParameterError(f"subsample must lie in (0, 1], got {self.subsample}")

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass
class RegressionTree:
    """Binary tree stored as parallel arrays; leaves have ``feature == -1``."""

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray

    def apply(self, X: np.ndarray) -> np.ndarray:
        node = np.zeros(len(X), dtype=np.int64)
        while True:
            f = self.feature[node]
            inner = f >= 0
            if not inner.any():
                return node
            rows = np.nonzero(inner)[0]
            go_left = X[rows, f[inner]] <= self.threshold[node[inner]]
            node[rows] = np.where(go_left, self.left[node[inner]], self.right[node[inner]])

    def predict(self, X: np.ndarray) -> np.ndarray:
        return self.value[self.apply(X)]

    def to_dict(self, node: int = 0) -> dict:
        if self.feature[node] < 0:
            return {"value": float(self.value[node])}
        return {
            "feature": int(self.feature[node]),
            "threshold": float(self.threshold[node]),
            "left": self.to_dict(int(self.left[node])),
            "right": self.to_dict(int(self.right[node])),
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "RegressionTree":
        feature, threshold, left, right, value = [], [], [], [], []

        def visit(d):
            i = len(feature)
            feature.append(-1)
            threshold.append(0.0)
            left.append(-1)
            right.append(-1)
            value.append(0.0)
            if "value" in d:
                value[i] = d["value"]
            else:
                feature[i] = d["feature"]
                threshold[i] = d["threshold"]
                left[i] = visit(d["left"])
                right[i] = visit(d["right"])
            return i

        visit(doc)
        return cls(np.array(feature), np.array(threshold), np.array(left), np.array(right),
                   np.array(value, dtype=float))


def _grow_tree(X, Xs, order, r, rows_mask, max_depth, min_leaf):
    """Grow one least-squares tree on the rows flagged by ``rows_mask``.

    ``order[f]`` lists all training rows sorted by feature ``f`` and
    ``Xs[f]`` holds the matching sorted values.
    """
    n_features, n = order.shape
    feature, threshold, left, right, value = [-1], [0.0], [-1], [-1], [0.0]
    node_of = np.where(rows_mask, 0, -1)
    frontier = [0]
    value[0] = float(r[rows_mask].mean())

    for _ in range(max_depth):
        if not frontier:
            break
        # relabel frontier nodes 0..K-1 so rows of one node are contiguous after sorting
        label = np.full(len(feature), -1)
        label[frontier] = np.arange(len(frontier))
        lab = np.where(node_of >= 0, label[np.maximum(node_of, 0)], -1)
        lab_sorted = lab[order]
        perm = np.argsort(lab_sorted, axis=1, kind="stable")
        lab_g = np.take_along_axis(lab_sorted, perm, axis=1)
        skip = int(np.count_nonzero(lab_g[0] < 0))
        perm = perm[:, skip:]
        lab_g = lab_g[0, skip:]
        if lab_g.size == 0:
            break
        idx = np.take_along_axis(order, perm, axis=1)
        xv = np.take_along_axis(Xs, perm, axis=1)
        rv = r[idx]
        cs = np.cumsum(rv, axis=1)

        counts = np.bincount(lab_g, minlength=len(frontier))
        ends = np.cumsum(counts)
        starts = ends - counts
        pos = np.arange(lab_g.size)
        g_start = starts[lab_g]
        g_end = ends[lab_g]
        base = np.where(g_start > 0, cs[:, np.maximum(g_start - 1, 0)], 0.0)
        left_sum = cs - base
        total = cs[:, g_end - 1] - base
        n_left = (pos - g_start + 1).astype(float)
        n_right = (g_end - pos - 1).astype(float)
        with np.errstate(divide="ignore", invalid="ignore"):
            gain = left_sum**2 / n_left + (total - left_sum) ** 2 / n_right
        valid = (n_left >= min_leaf) & (n_right >= min_leaf)
        nxt = np.empty_like(xv)
        nxt[:, :-1] = xv[:, 1:]
        nxt[:, -1] = xv[:, -1]
        valid = valid[None, :] & (xv < nxt)
        gain = np.where(valid, gain, -np.inf)

        new_frontier = []
        split_pos = {}
        for g, node in enumerate(frontier):
            s, e = starts[g], ends[g]
            if e - s < 2 * min_leaf:
                continue
            block = gain[:, s:e]
            flat = int(np.argmax(block))
            f, p = divmod(flat, e - s)
            t_sum = total[f, s]
            parent = t_sum * t_sum / counts[g]
            if not np.isfinite(block[f, p]) or block[f, p] - parent <= 1e-12 * max(abs(parent), 1.0):
                continue
            thr = 0.5 * (xv[f, s + p] + xv[f, s + p + 1])
            # midpoint may round onto the upper value; fall back to the lower one
            if not thr < xv[f, s + p + 1]:
                thr = xv[f, s + p]
            feature[node] = f
            threshold[node] = float(thr)
            kids = []
            for part in (slice(s, s + p + 1), slice(s + p + 1, e)):
                k = len(feature)
                feature.append(-1)
                threshold.append(0.0)
                left.append(-1)
                right.append(-1)
                value.append(float(rv[f, part].mean()))
                kids.append(k)
            left[node], right[node] = kids
            split_pos[node] = (f, s, p, e, kids)
            new_frontier.extend(kids)
        for node, (f, s, p, e, kids) in split_pos.items():
            node_of[idx[f, s:s + p + 1]] = kids[0]
            node_of[idx[f, s + p + 1:e]] = kids[1]
        frontier = new_frontier

    return RegressionTree(np.array(feature), np.array(threshold), np.array(left),
                          np.array(right), np.array(value, dtype=float))


class GradientBoostedTrees:
    """Least-squares gradient boosting with depth-limited trees."""

    def __init__(self, n_rounds=100, max_depth=2, learning_rate=0.1, subsample=1.0,
                 min_samples_leaf=5, seed=0):
        self.n_rounds = n_rounds
        self.max_depth = max_depth
        self.learning_rate = learning_rate
        self.subsample = subsample
        self.min_samples_leaf = min_samples_leaf
        self.seed = seed
        self.init_ = 0.0
        self.trees_: list[RegressionTree] = []

    def fit(self, X, y):
        X = np.asarray(X, dtype=float)
        y = np.asarray(y, dtype=float)
        n = len(y)
        rng = np.random.default_rng(self.seed)
        order = np.argsort(X, axis=0, kind="stable").T.copy()
        Xs = np.take_along_axis(X.T, order, axis=1)
        self.init_ = float(y.mean())
        pred = np.full(n, self.init_)
        self.trees_ = []
        n_sub = max(2 * self.min_samples_leaf, int(round(self.subsample * n)))
        for _ in range(self.n_rounds):
            if n_sub >= n:
                mask = np.ones(n, dtype=bool)
            else:
                mask = np.zeros(n, dtype=bool)
                mask[rng.choice(n, size=n_sub, replace=False)] = True
            tree = _grow_tree(X, Xs, order, y - pred, mask, self.max_depth, self.min_samples_leaf)
            self.trees_.append(tree)
            pred = pred + self.learning_rate * tree.predict(X)
        return self

    def predict(self, X):
        X = np.asarray(X, dtype=float)
        if X.ndim == 1:
            X = X.reshape(1, -1)
        pred = np.full(len(X), self.init_)
        for tree in self.trees_:
            pred = pred + self.learning_rate * tree.predict(X)
        return pred

    def to_dict(self):
        return {
            "kind": "gbm",
            "learning_rate": self.learning_rate,
            "init": self.init_,
            "params": {"n_rounds": self.n_rounds, "max_depth": self.max_depth,
                       "subsample": self.subsample, "min_samples_leaf": self.min_samples_leaf,
                       "seed": self.seed},
            "trees": [t.to_dict() for t in self.trees_],
        }

    @classmethod
    def from_dict(cls, doc):
        model = cls(learning_rate=doc["learning_rate"], **doc.get("params", {}))
        model.init_ = float(doc["init"])
        model.trees_ = [RegressionTree.from_dict(t) for t in doc["trees"]]
        return model


class LinearRegressor:
    """Ordinary least squares with an intercept."""

    def __init__(self):
        self.coef_ = np.zeros(0)
        self.intercept_ = 0.0

    def fit(self, X, y):
        X = np.asarray(X, dtype=float)
        design = np.column_stack([np.ones(len(X)), X])
        beta, *_ = np.linalg.lstsq(design, np.asarray(y, dtype=float), rcond=None)
        self.intercept_ = float(beta[0])
        self.coef_ = beta[1:]
        return self

    def predict(self, X):
        X = np.asarray(X, dtype=float)
        if X.ndim == 1:
            X = X.reshape(1, -1)
        return self.intercept_ + X @ self.coef_

    def to_dict(self):
        return {"kind": "linear", "intercept": self.intercept_, "coef": self.coef_.tolist()}

    @classmethod
    def from_dict(cls, doc):
        model = cls()
        model.intercept_ = float(doc["intercept"])
        model.coef_ = np.asarray(doc["coef"], dtype=float)
        return model


def make_regressor(spec: RegressorSpec) -> Regressor:
    if spec.kind == "linear":
        return LinearRegressor()
    return GradientBoostedTrees(n_rounds=spec.n_rounds, max_depth=spec.max_depth,
                                learning_rate=spec.learning_rate, subsample=spec.subsample,
                                min_samples_leaf=spec.min_samples_leaf, seed=spec.seed)


def regressor_from_dict(doc: dict) -> Regressor:
    kind = doc.get("kind")
    if kind == "gbm":
        return GradientBoostedTrees.from_dict(doc)
    if kind == "linear":
        return LinearRegressor.from_dict(doc)
    raise ParameterError(f"unknown regressor kind {kind!r}")
