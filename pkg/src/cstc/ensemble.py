"""Gradient boosted regression trees and the feature map they induce.

A fitted ensemble of T depth-limited CART regression trees provides the
non-linear feature map ``phi(x) = [h_1(x), ..., h_T(x)]``.  Each component
already includes the boosting shrinkage, so the stage-wise prediction is
``base_score + phi(x).sum()``.  Alongside the trees the ensemble carries the
d x T binary feature-usage matrix F (``F[a, t] = 1`` iff learner t splits on
raw feature a) and a per-learner evaluation cost vector.

An "identity" ensemble is also provided for experiments that work directly
in raw feature space: ``phi(x) = x``, F is the identity and evaluation is
free.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "RegressionTree",
    "WeakLearnerEnsemble",
    "fit_gbrt",
    "identity_ensemble",
    "feature_map",
    "usage_matrix",
    "ensemble_predict",
    "ensemble_to_json_dict",
    "ensemble_from_json_dict",
    "ensemble_hash",
]

# Splits with squared-error gain below this (relative) level are treated as
# noise; keeps constant-label nodes from splitting on float dust.
_MIN_GAIN = 1e-12


@dataclass
class RegressionTree:
    """A depth-limited CART regression tree stored as parallel node arrays.

    Internal nodes have ``feature >= 0`` and route a sample left when
    ``x[feature] <= threshold``.  Leaves have ``feature == -1`` and carry
    their prediction in ``value``.  ``depth`` is the tree height in edges
    (0 for a single leaf).
    """

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray
    depth: int

    @property
    def num_nodes(self) -> int:
        return len(self.feature)

    def predict(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        idx = np.zeros(X.shape[0], dtype=np.int64)
        for _ in range(self.depth):
            node_feat = self.feature[idx]
            active = node_feat >= 0
            if not active.any():
                break
            rows = np.nonzero(active)[0]
            nodes = idx[rows]
            go_left = X[rows, self.feature[nodes]] <= self.threshold[nodes]
            idx[rows] = np.where(go_left, self.left[nodes], self.right[nodes])
        return self.value[idx]

    def used_features(self) -> np.ndarray:
        """Sorted raw-feature indices split on anywhere in the tree."""
        return np.unique(self.feature[self.feature >= 0])

    def validate(self, num_features: int, max_depth: int | None = None) -> None:
        internal = self.feature >= 0
        if internal.any():
            feats = self.feature[internal]
            if feats.min() < 0 or feats.max() >= num_features:
                raise ValueError("tree references an out-of-range feature index")
            children = np.concatenate([self.left[internal], self.right[internal]])
            if (children < 0).any() or (children >= self.num_nodes).any():
                raise ValueError("tree has dangling child pointers")
        if max_depth is not None and self.depth > max_depth:
            raise ValueError("tree exceeds the configured maximum depth")


def _best_split(X: np.ndarray, y: np.ndarray) -> tuple[int, float, float]:
    """Exact greedy squared-error split over all features.

    Ties are broken toward the lowest feature index, then the lowest
    threshold.  Returns ``(feature, threshold, gain)`` with ``feature == -1``
    when no split improves on the parent.
    """
    n = len(y)
    total = y.sum()
    total_sq = (y * y).sum()
    sse_parent = total_sq - total * total / n
    # any split must clear the noise floor; later features must strictly beat
    # the incumbent, so ties resolve to the lowest feature index
    best_feat, best_thr = -1, 0.0
    best_gain = _MIN_GAIN * max(1.0, sse_parent)
    for j in range(X.shape[1]):
        col = X[:, j]
        order = np.argsort(col, kind="stable")
        xs = col[order]
        ys = y[order]
        cut = np.nonzero(np.diff(xs) > 0)[0]
        if cut.size == 0:
            continue
        cum = np.cumsum(ys)
        cum_sq = np.cumsum(ys * ys)
        n_left = cut + 1.0
        n_right = n - n_left
        s_left = cum[cut]
        s_right = total - s_left
        sse_left = cum_sq[cut] - s_left * s_left / n_left
        sse_right = (total_sq - cum_sq[cut]) - s_right * s_right / n_right
        gains = sse_parent - (sse_left + sse_right)
        pos = int(np.argmax(gains))  # first max -> lowest threshold
        if gains[pos] > best_gain:
            best_feat = j
            best_thr = 0.5 * (xs[cut[pos]] + xs[cut[pos] + 1])
            best_gain = float(gains[pos])
    return best_feat, best_thr, best_gain if best_feat >= 0 else 0.0


def _grow_tree(X: np.ndarray, y: np.ndarray, max_depth: int) -> RegressionTree:
    feature: list[int] = []
    threshold: list[float] = []
    left: list[int] = []
    right: list[int] = []
    value: list[float] = []
    height = 0

    def build(rows: np.ndarray, depth: int) -> int:
        nonlocal height
        i = len(feature)
        feature.append(-1)
        threshold.append(0.0)
        left.append(-1)
        right.append(-1)
        value.append(float(y[rows].mean()))
        height = max(height, depth)
        if depth >= max_depth or rows.size < 2:
            return i
        feat, thr, gain = _best_split(X[rows], y[rows])
        if feat < 0 or gain <= 0.0:
            return i
        go_left = X[rows, feat] <= thr
        feature[i] = feat
        threshold[i] = float(thr)
        left[i] = build(rows[go_left], depth + 1)
        right[i] = build(rows[~go_left], depth + 1)
        return i

    build(np.arange(len(y)), 0)
    return RegressionTree(
        feature=np.asarray(feature, dtype=np.int64),
        threshold=np.asarray(threshold, dtype=float),
        left=np.asarray(left, dtype=np.int64),
        right=np.asarray(right, dtype=np.int64),
        value=np.asarray(value, dtype=float),
        depth=height,
    )


@dataclass
class WeakLearnerEnsemble:
    """T boosted regression trees plus the bookkeeping CSTC needs.

    ``usage`` is the d x T feature-usage matrix F and ``eval_costs`` the
    per-learner evaluation cost e_t.  ``identity`` marks the raw-feature
    bypass mode (``phi(x) = x``).
    """

    trees: list[RegressionTree]
    usage: np.ndarray
    eval_costs: np.ndarray
    n_features: int
    base_score: float = 0.0
    shrinkage: float = 1.0
    identity: bool = False
    train_mse: np.ndarray = field(default_factory=lambda: np.zeros(0))

    @property
    def size(self) -> int:
        """Number of weak learners T (the feature-map dimension)."""
        return self.n_features if self.identity else len(self.trees)

    def validate(self) -> None:
        T = self.size
        if T < 1:
            raise ValueError("ensemble must contain at least one weak learner")
        if self.usage.shape != (self.n_features, T):
            raise ValueError("usage matrix shape does not match (d, T)")
        if len(self.eval_costs) != T:
            raise ValueError("eval_costs length does not match T")
        if (self.eval_costs < 0).any():
            raise ValueError("eval costs must be non-negative")


def fit_gbrt(
    data: np.ndarray,
    labels: np.ndarray,
    rounds: int = 100,
    max_depth: int = 4,
    shrinkage: float = 0.1,
) -> WeakLearnerEnsemble:
    """Least-squares gradient boosting with depth-limited CART learners.

    The model is ``base_score + sum_t shrinkage * tree_t(x)``; each round fits
    the residual of the current prediction.  Fitting is deterministic: split
    ties go to the lowest feature index, then the lowest threshold.
    """
    X = np.asarray(data, dtype=float)
    y = np.asarray(labels, dtype=float)
    if X.ndim != 2 or X.shape[0] == 0 or X.shape[1] == 0:
        raise ValueError("data must be a non-empty n x d matrix")
    if y.shape != (X.shape[0],):
        raise ValueError("labels must align with data rows")
    if rounds < 1:
        raise ValueError("rounds must be >= 1")
    if max_depth < 1:
        raise ValueError("max_depth must be >= 1")
    if not 0.0 < shrinkage <= 1.0:
        raise ValueError("shrinkage must lie in (0, 1]")
    if not (np.isfinite(X).all() and np.isfinite(y).all()):
        raise ValueError("data and labels must be finite")

    n, d = X.shape
    base = float(y.mean())
    pred = np.full(n, base)
    trees: list[RegressionTree] = []
    mse = [float(((y - pred) ** 2).mean())]
    for _ in range(rounds):
        tree = _grow_tree(X, y - pred, max_depth)
        pred = pred + shrinkage * tree.predict(X)
        trees.append(tree)
        mse.append(float(((y - pred) ** 2).mean()))

    usage = np.zeros((d, rounds), dtype=np.int8)
    for t, tree in enumerate(trees):
        usage[tree.used_features(), t] = 1
    return WeakLearnerEnsemble(
        trees=trees,
        usage=usage,
        eval_costs=np.ones(rounds),
        n_features=d,
        base_score=base,
        shrinkage=shrinkage,
        train_mse=np.asarray(mse),
    )


def identity_ensemble(num_features: int) -> WeakLearnerEnsemble:
    """Raw-feature bypass: phi(x) = x, F = identity, evaluation is free."""
    if num_features < 1:
        raise ValueError("num_features must be >= 1")
    return WeakLearnerEnsemble(
        trees=[],
        usage=np.eye(num_features, dtype=np.int8),
        eval_costs=np.zeros(num_features),
        n_features=num_features,
        identity=True,
    )


def feature_map(ensemble: WeakLearnerEnsemble, x: np.ndarray) -> np.ndarray:
    """Map raw inputs to learner outputs: one column per weak learner.

    Accepts a single d-vector (returns a T-vector) or an n x d matrix
    (returns n x T).
    """
    arr = np.asarray(x, dtype=float)
    single = arr.ndim == 1
    if single:
        arr = arr[None, :]
    if arr.ndim != 2 or arr.shape[1] != ensemble.n_features:
        raise ValueError(
            f"expected {ensemble.n_features} features, got array of shape {np.shape(x)}"
        )
    if ensemble.identity:
        phi = arr.copy()
    else:
        phi = np.empty((arr.shape[0], ensemble.size))
        for t, tree in enumerate(ensemble.trees):
            phi[:, t] = ensemble.shrinkage * tree.predict(arr)
    return phi[0] if single else phi


def usage_matrix(ensemble: WeakLearnerEnsemble) -> np.ndarray:
    """The d x T binary matrix marking which raw features each learner reads."""
    return np.asarray(ensemble.usage, dtype=np.int8)


def ensemble_predict(ensemble: WeakLearnerEnsemble, x: np.ndarray) -> np.ndarray:
    """Stage-wise regression prediction: base score plus summed feature map."""
    phi = feature_map(ensemble, x)
    return ensemble.base_score + phi.sum(axis=-1)


def ensemble_to_json_dict(ensemble: WeakLearnerEnsemble) -> dict:
    ensemble.validate()
    usage_rows = [np.nonzero(ensemble.usage[a])[0].tolist() for a in range(ensemble.n_features)]
    return {
        "schema_version": 1,
        "kind": "identity" if ensemble.identity else "gbrt",
        "n_features": ensemble.n_features,
        "base_score": ensemble.base_score,
        "shrinkage": ensemble.shrinkage,
        "eval_costs": [float(v) for v in ensemble.eval_costs],
        "usage_rows": usage_rows,
        "train_mse": [float(v) for v in ensemble.train_mse],
        "trees": [
            {
                "feature": t.feature.tolist(),
                "threshold": t.threshold.tolist(),
                "left": t.left.tolist(),
                "right": t.right.tolist(),
                "value": t.value.tolist(),
                "depth": t.depth,
            }
            for t in ensemble.trees
        ],
    }


def ensemble_from_json_dict(doc: dict) -> WeakLearnerEnsemble:
    if doc.get("schema_version") != 1:
        raise ValueError(f"unsupported ensemble schema version: {doc.get('schema_version')!r}")
    d = int(doc["n_features"])
    trees = [
        RegressionTree(
            feature=np.asarray(t["feature"], dtype=np.int64),
            threshold=np.asarray(t["threshold"], dtype=float),
            left=np.asarray(t["left"], dtype=np.int64),
            right=np.asarray(t["right"], dtype=np.int64),
            value=np.asarray(t["value"], dtype=float),
            depth=int(t["depth"]),
        )
        for t in doc["trees"]
    ]
    T = d if doc["kind"] == "identity" else len(trees)
    usage = np.zeros((d, T), dtype=np.int8)
    for a, row in enumerate(doc["usage_rows"]):
        usage[a, row] = 1
    ens = WeakLearnerEnsemble(
        trees=trees,
        usage=usage,
        eval_costs=np.asarray(doc["eval_costs"], dtype=float),
        n_features=d,
        base_score=float(doc["base_score"]),
        shrinkage=float(doc["shrinkage"]),
        identity=doc["kind"] == "identity",
        train_mse=np.asarray(doc.get("train_mse", []), dtype=float),
    )
    ens.validate()
    return ens


def ensemble_hash(ensemble: WeakLearnerEnsemble) -> str:
    """Stable content hash used to bind saved models to their feature map."""
    payload = json.dumps(ensemble_to_json_dict(ensemble), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(payload.encode()).hexdigest()
