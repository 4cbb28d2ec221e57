"""Validation-driven pruning and zero-clamped fine-tuning.

Pruning greedily removes deepest classifiers whose removal does not degrade
the validation metric.  Fine-tuning re-fits the prediction weights of every
predictive classifier with the zero coordinates of its trained weight vector
clamped to zero, undoing the shrinkage the mixed-norm penalty puts on the
surviving coordinates; routing parameters are never touched.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .model import TERMINAL, CstcTree
from .objective import ZERO_WEIGHT_TOL, LossConfig
from .optimizer import OptimizationError, OptimizerConfig, _cg_minimize, aux_closed_form
from .traversal import TraversalState, predict_batch, soft_probabilities

__all__ = [
    "ValidationMetric",
    "PruneReport",
    "FineTuneReport",
    "prune",
    "fine_tune_node",
    "fine_tune",
]


@dataclass
class ValidationMetric:
    """Model-selection metric; ``score`` is always higher-is-better."""

    kind: str = "mse"
    k: int = 5

    def __post_init__(self):
        if self.kind not in ("mse", "ndcg_at_k"):
            raise ValueError(f"unknown metric kind {self.kind!r}")
        if self.kind == "ndcg_at_k" and self.k < 1:
            raise ValueError("k must be >= 1 for ndcg_at_k")

    def score(self, predictions, labels, qid=None) -> float:
        predictions = np.asarray(predictions, dtype=float)
        labels = np.asarray(labels, dtype=float)
        if self.kind == "mse":
            return -float(((predictions - labels) ** 2).mean())
        from .evaluation import ndcg_at_k

        if qid is None:
            raise ValueError("ndcg_at_k needs query groups")
        return ndcg_at_k(predictions, labels, qid, self.k)


@dataclass
class PruneReport:
    removed_labels: list[int] = field(default_factory=list)
    scores: list[float] = field(default_factory=list)


def _prune_candidates(tree: CstcTree) -> list[int]:
    # deepest first, lower sibling before upper; the root is never a candidate
    cands = [
        k
        for k in range(1, tree.num_nodes)
        if tree.upper[k].kind == TERMINAL and tree.lower[k].kind == TERMINAL
    ]
    cands.sort(key=lambda k: (tree.node_depth[k], k), reverse=True)
    return cands


def prune(
    tree: CstcTree,
    phi_val: np.ndarray,
    y_val: np.ndarray,
    metric: ValidationMetric,
    qid_val=None,
    tolerance: float = 0.0,
) -> tuple[CstcTree, PruneReport]:
    """Greedy bottom-up removal of classifiers that do not help validation.

    A classifier whose children are both terminals is tentatively replaced by
    a terminal of its parent; the replacement is kept iff the validation
    score does not drop by more than ``tolerance`` (default: strict
    non-degradation).  Repeats until no replacement is accepted.
    """
    if len(y_val) == 0:
        raise ValueError("pruning needs a non-empty validation set")
    score = metric.score(predict_batch(tree, phi_val), y_val, qid_val)
    report = PruneReport(scores=[score])
    current = tree
    accepted = True
    while accepted:
        accepted = False
        for k in _prune_candidates(current):
            candidate = current.without_subtree(k)
            cand_score = metric.score(predict_batch(candidate, phi_val), y_val, qid_val)
            if cand_score >= score - tolerance:
                report.removed_labels.append(current.labels[k])
                report.scores.append(cand_score)
                current, score = candidate, cand_score
                accepted = True
                break
    return current, report


def fine_tune_node(
    tree: CstcTree,
    k: int,
    phi: np.ndarray,
    labels: np.ndarray,
    cfg: LossConfig,
    opt_cfg: OptimizerConfig,
    traversal: TraversalState | None = None,
) -> np.ndarray:
    """Re-fit prediction weights of node k on its soft instance mass.

    Minimizes ``sum_i p_i^k (phi_i . b - y_i)^2 + rho |b|`` over the support
    of the trained ``beta``; all other coordinates stay exactly zero.
    Traversal probabilities are held fixed at the current parameters.
    """
    phi = np.asarray(phi, dtype=float)
    labels = np.asarray(labels, dtype=float)
    node = tree.nodes[k]
    support = np.abs(node.beta) > ZERO_WEIGHT_TOL
    tuned = np.zeros_like(node.beta)
    if not support.any():
        return tuned
    if traversal is None:
        traversal = soft_probabilities(tree, phi)
    w = traversal.p[:, k]
    Xs = phi[:, support]
    b = node.beta[support].copy()
    z = aux_closed_form(b * b, cfg.epsilon_aux)

    def f(bv):
        r = Xs @ bv - labels
        val = float(w @ (r * r))
        if cfg.rho:
            val += cfg.rho * 0.5 * float((bv * bv / z + z).sum())
        return val

    def g(bv):
        r = Xs @ bv - labels
        grad = 2.0 * (Xs.T @ (w * r))
        if cfg.rho:
            grad += cfg.rho * bv / z
        return grad

    def on_error(fval, gval, xval):
        return OptimizationError(
            f"non-finite loss while fine-tuning node {tree.labels[k]}",
            {"node_label": tree.labels[k], "loss": float(fval)},
        )

    prev = f(b)
    for _ in range(opt_cfg.alternations):
        b, fb, _ = _cg_minimize(f, g, b, opt_cfg.cg_iters, opt_cfg.tol, on_error)
        z = aux_closed_form(b * b, cfg.epsilon_aux)
        fb = f(b)
        if prev - fb <= opt_cfg.tol * max(1.0, abs(prev)):
            break
        prev = fb
        if not cfg.rho:
            break  # no aux terms: a single CG block solves the problem
    tuned[support] = b
    return tuned


@dataclass
class FineTuneReport:
    tuned_labels: list[int] = field(default_factory=list)
    scores: list[float] = field(default_factory=list)
    stopped_early: bool = False


def fine_tune(
    tree: CstcTree,
    phi: np.ndarray,
    labels: np.ndarray,
    phi_val: np.ndarray,
    y_val: np.ndarray,
    metric: ValidationMetric,
    cfg: LossConfig,
    opt_cfg: OptimizerConfig,
    qid_val=None,
) -> tuple[CstcTree, FineTuneReport]:
    """Fine-tune predictive classifiers until the validation metric decreases.

    Nodes are processed breadth-first; a node whose tuned weights drop the
    validation score is reverted and tuning stops there.  Hard routes are
    unchanged by construction (routing still uses ``beta``/``theta``).
    """
    traversal = soft_probabilities(tree, phi)
    best = metric.score(predict_batch(tree, phi_val), y_val, qid_val)
    report = FineTuneReport(scores=[best])
    for k in tree.predictive_nodes():
        node = tree.nodes[k]
        previous = node.beta_ft
        node.beta_ft = fine_tune_node(tree, k, phi, labels, cfg, opt_cfg, traversal)
        score = metric.score(predict_batch(tree, phi_val), y_val, qid_val)
        if score < best:
            node.beta_ft = previous
            report.stopped_early = True
            break
        best = score
        report.tuned_labels.append(tree.labels[k])
        report.scores.append(score)
    return tree, report
