"""Gradient-boosted regression trees with exact greedy CART splits (squared loss)."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ShapeMismatch, TooFewSamples


@dataclass
class RegressionTree:
    """Flat node list; node 0 is the root.

    Internal nodes carry ``feature``, ``threshold``, ``left``, ``right``;
    leaves carry ``value``. Every node records its training count ``n``.
    """

    nodes: list[dict]
    max_depth: int
    min_leaf: int

    def predict(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        out = np.empty(len(X))
        stack = [(0, np.arange(len(X)))]
        while stack:
            i, rows = stack.pop()
            node = self.nodes[i]
            if "value" in node:
                out[rows] = node["value"]
                continue
            go_left = X[rows, node["feature"]] <= node["threshold"]
            stack.append((node["left"], rows[go_left]))
            stack.append((node["right"], rows[~go_left]))
        return out

    @property
    def depth(self) -> int:
        def d(i):
            node = self.nodes[i]
            return 0 if "value" in node else 1 + max(d(node["left"]), d(node["right"]))
        return d(0)

    def leaves(self) -> list[dict]:
        return [n for n in self.nodes if "value" in n]


@dataclass
class GbtModel:
    trees: list[RegressionTree]
    learning_rate: float
    base_score: float
    n_features: int
    train_rmse_trace: list[float] = field(default_factory=list)
    val_rmse_trace: list[float] = field(default_factory=list)
    best_round: int = 0

    def to_json(self) -> dict:
        return {
            "learning_rate": self.learning_rate,
            "base_score": self.base_score,
            "n_features": self.n_features,
            "best_round": self.best_round,
            "trees": [{"max_depth": t.max_depth, "min_leaf": t.min_leaf, "nodes": t.nodes} for t in self.trees],
        }

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json()))

    @classmethod
    def load(cls, path: str | Path) -> "GbtModel":
        d = json.loads(Path(path).read_text())
        trees = [RegressionTree(t["nodes"], t["max_depth"], t["min_leaf"]) for t in d["trees"]]
        return cls(trees, d["learning_rate"], d["base_score"], d["n_features"], best_round=d["best_round"])


def best_split(X: np.ndarray, r: np.ndarray, min_leaf: int):
    """Exact search for the SSE-minimizing split.

    Returns (gain, feature, threshold) or None. Ties go to the lowest feature
    index, then the lowest threshold.
    """
    n, m = X.shape
    rc = r - r.mean()
    total = float(rc @ rc)
    if n < 2 * min_leaf or np.ptp(r) == 0.0:
        return None
    best = None
    k = np.arange(1, n)
    valid_k = (k >= min_leaf) & (k <= n - min_leaf)
    for j in range(m):
        order = np.argsort(X[:, j], kind="stable")
        xs, rs = X[order, j], rc[order]
        cs = np.cumsum(rs)[:-1]
        left_sum, right_sum = cs, -cs  # centered: total sum is 0
        gain = left_sum**2 / k + right_sum**2 / (n - k)
        ok = valid_k & (xs[1:] > xs[:-1])
        if not ok.any():
            continue
        gain = np.where(ok, gain, -np.inf)
        pos = int(np.argmax(gain))
        g = float(gain[pos])
        if best is None or g > best[0]:
            best = (g, j, 0.5 * (xs[pos] + xs[pos + 1]))
    if best is None or best[0] <= 1e-12 * total:
        return None
    return best


def fit_tree(X, residuals, max_depth: int = 3, min_leaf: int = 20) -> RegressionTree:
    X = np.asarray(X, dtype=np.float64)
    r = np.asarray(residuals, dtype=np.float64)
    if len(X) != len(r):
        raise ShapeMismatch("X and residuals differ in length")
    if len(r) < max(2 * min_leaf, 1):
        raise TooFewSamples(f"need at least {2 * min_leaf} samples, got {len(r)}")
    nodes: list[dict] = []

    def grow(rows: np.ndarray, depth: int) -> int:
        i = len(nodes)
        nodes.append({})
        split = best_split(X[rows], r[rows], min_leaf) if depth < max_depth else None
        if split is None:
            nodes[i] = {"value": float(r[rows].mean()), "n": int(len(rows))}
            return i
        _, j, thr = split
        go_left = X[rows, j] <= thr
        left = grow(rows[go_left], depth + 1)
        right = grow(rows[~go_left], depth + 1)
        nodes[i] = {"feature": int(j), "threshold": float(thr), "left": left, "right": right, "n": int(len(rows))}
        return i

    grow(np.arange(len(r)), 0)
    return RegressionTree(nodes, max_depth, min_leaf)


def _rmse(a, b) -> float:
    return float(np.sqrt(np.mean((a - b) ** 2)))


def fit_gbt(X, y, X_val=None, y_val=None, n_trees: int = 200, learning_rate: float = 0.05,
            max_depth: int = 3, min_leaf: int = 20, early_stop_rounds: int = 20) -> GbtModel:
    """Stagewise boosting on residuals; keeps the round with the best validation RMSE."""
    if not 0 < learning_rate <= 1:
        raise ValueError("learning_rate must lie in (0, 1]")
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    base = float(y.mean())
    pred = np.full(len(y), base)
    use_val = X_val is not None and y_val is not None and len(y_val) > 0
    if use_val:
        X_val = np.asarray(X_val, dtype=np.float64)
        val_pred = np.full(len(y_val), base)
        best_val, best_round = _rmse(val_pred, y_val), 0
    model = GbtModel([], learning_rate, base, X.shape[1], [_rmse(pred, y)])
    if use_val:
        model.val_rmse_trace.append(best_val)
    since_best = 0
    for rnd in range(1, n_trees + 1):
        tree = fit_tree(X, y - pred, max_depth, min_leaf)
        model.trees.append(tree)
        pred = pred + learning_rate * tree.predict(X)
        model.train_rmse_trace.append(_rmse(pred, y))
        if use_val:
            val_pred = val_pred + learning_rate * tree.predict(X_val)
            v = _rmse(val_pred, y_val)
            model.val_rmse_trace.append(v)
            if v < best_val:
                best_val, best_round, since_best = v, rnd, 0
            else:
                since_best += 1
                if since_best >= early_stop_rounds:
                    break
    if use_val:
        model.trees = model.trees[:best_round]
        model.best_round = best_round
    else:
        model.best_round = len(model.trees)
    return model


def predict_gbt(model: GbtModel, X) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != model.n_features:
        raise ShapeMismatch(f"model expects {model.n_features} features, got shape {X.shape}")
    out = np.full(len(X), model.base_score)
    for t in model.trees:
        out += model.learning_rate * t.predict(X)
    return out
