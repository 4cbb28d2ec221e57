"""Soft traversal probabilities (training) and hard routing (test time).

During training each instance reaches node k with probability ``p_i^k``:
the root has probability one and the transition from a node to its upper
child is ``sigmoid(phi(x)^T beta - theta)``.  At test time routing is hard:
go upper iff the node score strictly exceeds theta (ties go lower).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import NODE, TERMINAL, CstcTree

__all__ = [
    "TraversalState",
    "stable_sigmoid",
    "node_scores",
    "soft_probabilities",
    "soft_probabilities_from_scores",
    "hard_route",
    "route_batch",
    "predict",
    "predict_batch",
]


@dataclass
class TraversalState:
    """Per-instance reach probabilities for every node and terminal.

    ``p[i, k]`` is the probability instance i traverses classifier k,
    ``terminal_p[i, l]`` the probability it exits at terminal l, and
    ``marginals[l]`` the average of ``terminal_p[:, l]`` over instances.
    ``upper[i, k]`` caches the sigmoid transition toward the upper child.
    """

    p: np.ndarray
    terminal_p: np.ndarray
    marginals: np.ndarray
    upper: np.ndarray


def stable_sigmoid(a: np.ndarray) -> np.ndarray:
    """Logistic function evaluated branch-wise so exp never overflows."""
    a = np.asarray(a, dtype=float)
    out = np.empty_like(a)
    pos = a >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-a[pos]))
    ea = np.exp(a[~pos])
    out[~pos] = ea / (1.0 + ea)
    return out


def node_scores(tree: CstcTree, phi: np.ndarray) -> np.ndarray:
    """Linear score ``phi @ beta_k`` for every classifier: shape (n, V)."""
    phi = np.atleast_2d(np.asarray(phi, dtype=float))
    if phi.shape[1] != tree.num_weak:
        raise ValueError(f"phi has {phi.shape[1]} columns, tree expects {tree.num_weak}")
    return phi @ tree.beta_matrix().T


def soft_probabilities(tree: CstcTree, phi: np.ndarray) -> TraversalState:
    return soft_probabilities_from_scores(tree, node_scores(tree, phi))


def soft_probabilities_from_scores(tree: CstcTree, scores: np.ndarray) -> TraversalState:
    """Top-down recursion of reach probabilities from precomputed node scores."""
    n = scores.shape[0]
    upper = stable_sigmoid(scores - tree.thetas()[None, :])
    p = np.zeros((n, tree.num_nodes))
    tp = np.zeros((n, tree.num_terminals))
    p[:, 0] = 1.0
    for k in range(tree.num_nodes):
        for child, trans in ((tree.upper[k], upper[:, k]), (tree.lower[k], 1.0 - upper[:, k])):
            reach = p[:, k] * trans
            if child.kind == NODE:
                p[:, child.index] = reach
            else:
                tp[:, child.index] = reach
    return TraversalState(p=p, terminal_p=tp, marginals=tp.mean(axis=0), upper=upper)


def hard_route(tree: CstcTree, phi_row: np.ndarray) -> tuple[int, list[int]]:
    """Deterministic routing of one instance; returns (terminal, visited path)."""
    phi_row = np.asarray(phi_row, dtype=float)
    k = 0
    path = []
    while True:
        path.append(k)
        node = tree.nodes[k]
        child = tree.upper[k] if float(phi_row @ node.beta) > node.theta else tree.lower[k]
        if child.kind == TERMINAL:
            return child.index, path
        k = child.index


def route_batch(tree: CstcTree, phi: np.ndarray) -> np.ndarray:
    """Hard-routed terminal index for every row of ``phi``."""
    scores = node_scores(tree, phi)
    thetas = tree.thetas()
    out = np.full(scores.shape[0], -1, dtype=np.int64)
    stack: list[tuple[int, np.ndarray]] = [(0, np.arange(scores.shape[0]))]
    while stack:
        k, rows = stack.pop()
        if rows.size == 0:
            continue
        up = scores[rows, k] > thetas[k]
        for child, sel in ((tree.upper[k], rows[up]), (tree.lower[k], rows[~up])):
            if sel.size == 0:
                continue
            if child.kind == TERMINAL:
                out[sel] = child.index
            else:
                stack.append((child.index, sel))
    return out


def _prediction_weights(tree: CstcTree, k: int) -> np.ndarray:
    node = tree.nodes[k]
    return node.beta_ft if node.beta_ft is not None else node.beta


def predict(tree: CstcTree, phi_row: np.ndarray) -> float:
    """Hard-route one instance and return its parent classifier's prediction.

    Fine-tuned weights are used when present; routing always uses the
    original parameters.
    """
    terminal, _ = hard_route(tree, phi_row)
    parent = tree.terminal_parent[terminal]
    return float(np.asarray(phi_row, dtype=float) @ _prediction_weights(tree, parent))


def predict_batch(tree: CstcTree, phi: np.ndarray) -> np.ndarray:
    phi = np.atleast_2d(np.asarray(phi, dtype=float))
    terminals = route_batch(tree, phi)
    parents = np.asarray([tree.terminal_parent[l] for l in terminals], dtype=np.int64)
    out = np.empty(phi.shape[0])
    for k in np.unique(parents):
        rows = parents == k
        out[rows] = phi[rows] @ _prediction_weights(tree, int(k))
    return out
