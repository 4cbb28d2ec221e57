"""Risk, exact test-time cost, relaxed cost penalties, and gradients.

The exact cost of a prediction path charges every active weak learner once
and every raw feature read by an active learner once (features and learner
outputs are cached along the path).  Training replaces the indicator in each
charge with the Euclidean norm of the weights grouped along the path, which
makes the penalty continuous; the square roots are in turn handled through
the variational identity ``sqrt(g) = min_{z>0} (g/z + z)/2`` so the
optimizer only sees smooth functions of the parameters.

Squared loss is the only shipped risk; the expected tree risk weighs each
node's per-instance loss by the soft traversal probability.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import TYPE_CHECKING

import numpy as np

from .model import CstcTree
from .traversal import TraversalState, soft_probabilities_from_scores

if TYPE_CHECKING:
    from .optimizer import AuxiliaryVars

__all__ = [
    "ZERO_WEIGHT_TOL",
    "CostSchedule",
    "LossConfig",
    "exact_node_cost",
    "exact_path_cost",
    "path_cost_parts",
    "expected_risk",
    "path_group_sums",
    "relaxed_cost_penalty",
    "global_loss",
    "substituted_cost_brackets",
    "substituted_loss",
    "loss_gradient",
]

# Mixed-norm optimization drives weights to numerically tiny values rather
# than exact zeros; anything at or below this magnitude counts as inactive.
ZERO_WEIGHT_TOL = 1e-8

# Guard inside reported square roots only (keeps d/dg finite at g = 0 for
# downstream consumers of the raw penalty; never used during optimization).
_REPORT_TINY = 1e-30


@dataclass
class CostSchedule:
    """Per-raw-feature extraction costs and per-learner evaluation costs.

    Extraction costs must be strictly positive; evaluation costs may be zero
    (the identity feature map evaluates for free).
    """

    feature_costs: np.ndarray
    learner_costs: np.ndarray
    units: str = "weak-learner evaluations"

    def __post_init__(self):
        self.feature_costs = np.asarray(self.feature_costs, dtype=float)
        self.learner_costs = np.asarray(self.learner_costs, dtype=float)
        if self.feature_costs.ndim != 1 or self.learner_costs.ndim != 1:
            raise ValueError("cost vectors must be one-dimensional")
        if not np.isfinite(self.feature_costs).all() or not np.isfinite(self.learner_costs).all():
            raise ValueError("costs must be finite")
        if (self.feature_costs <= 0).any():
            raise ValueError("feature extraction costs must be strictly positive")
        if (self.learner_costs < 0).any():
            raise ValueError("learner evaluation costs must be non-negative")

    @property
    def num_features(self) -> int:
        return len(self.feature_costs)

    @property
    def num_learners(self) -> int:
        return len(self.learner_costs)


@dataclass
class LossConfig:
    """Trade-off and regularization knobs of the global objective."""

    lam: float = 1.0
    rho: float = 0.0
    epsilon_aux: float = 1e-8

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lambda must be >= 0")
        if self.rho < 0:
            raise ValueError("rho must be >= 0")
        if self.epsilon_aux <= 0:
            raise ValueError("epsilon_aux must be > 0")


def _check_schedule(schedule: CostSchedule, F: np.ndarray) -> np.ndarray:
    F = np.asarray(F)
    if F.shape != (schedule.num_features, schedule.num_learners):
        raise ValueError(
            f"usage matrix shape {F.shape} does not match schedule "
            f"({schedule.num_features}, {schedule.num_learners})"
        )
    return F


def exact_node_cost(beta: np.ndarray, schedule: CostSchedule, F: np.ndarray) -> float:
    """Test-time cost of evaluating a single classifier.

    Charges e_t for every learner with non-zero weight and c_a for every raw
    feature read by at least one such learner.
    """
    F = _check_schedule(schedule, F)
    beta = np.asarray(beta, dtype=float)
    active = np.abs(beta) > ZERO_WEIGHT_TOL
    eval_cost = schedule.learner_costs[active].sum()
    used = (F[:, active] != 0).any(axis=1)
    return float(eval_cost + schedule.feature_costs[used].sum())


def path_cost_parts(
    tree: CstcTree, terminal: int, schedule: CostSchedule, F: np.ndarray
) -> tuple[float, float]:
    """(evaluation, extraction) cost of one root-to-terminal path.

    Each learner and each feature is charged once across the whole path:
    values computed by an earlier classifier are cached for its descendants.
    """
    F = _check_schedule(schedule, F)
    if not 0 <= terminal < tree.num_terminals:
        raise ValueError(f"unknown terminal {terminal}")
    active = np.zeros(schedule.num_learners, dtype=bool)
    for k in tree.paths[terminal]:
        active |= np.abs(tree.nodes[k].beta) > ZERO_WEIGHT_TOL
    used = (F[:, active] != 0).any(axis=1)
    return (
        float(schedule.learner_costs[active].sum()),
        float(schedule.feature_costs[used].sum()),
    )


def exact_path_cost(tree: CstcTree, terminal: int, schedule: CostSchedule, F: np.ndarray) -> float:
    ev, ex = path_cost_parts(tree, terminal, schedule, F)
    return ev + ex


def expected_risk(
    tree: CstcTree,
    phi: np.ndarray,
    labels: np.ndarray,
    traversal: TraversalState,
    node_scores: np.ndarray | None = None,
) -> float:
    """Traversal-weighted mean squared error summed over all classifiers."""
    phi = np.asarray(phi, dtype=float)
    labels = np.asarray(labels, dtype=float)
    if node_scores is None:
        node_scores = phi @ tree.beta_matrix().T
    resid = node_scores - labels[:, None]
    return float((traversal.p * resid * resid).sum() / len(labels))


def path_group_sums(tree: CstcTree, F: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Squared weights accumulated along each path.

    Returns ``(G_ev, G_ft)``: ``G_ev[l, t]`` sums ``beta_t^2`` over the
    classifiers on path l and ``G_ft[l, a] = sum_t F[a, t] * G_ev[l, t]``.
    """
    B2 = tree.beta_matrix() ** 2
    G_ev = tree.path_matrix() @ B2
    G_ft = G_ev @ np.asarray(F, dtype=float).T
    return G_ev, G_ft


def relaxed_cost_penalty(
    tree: CstcTree, traversal: TraversalState, schedule: CostSchedule, F: np.ndarray
) -> float:
    """Mixed-norm relaxation of the expected path cost (reporting form).

    Each indicator charge becomes the Euclidean norm of its weight group, so
    the penalty is ``sum_l p^l [sum_t e_t ||beta_t over path|| +
    sum_a c_a ||F-masked betas over path||]``.  Excludes the lambda factor.
    """
    F = _check_schedule(schedule, F)
    G_ev, G_ft = path_group_sums(tree, F)
    per_path = np.sqrt(G_ev + _REPORT_TINY) @ schedule.learner_costs
    per_path = per_path + np.sqrt(G_ft + _REPORT_TINY) @ schedule.feature_costs
    return float(traversal.marginals @ per_path)


def global_loss(
    tree: CstcTree,
    phi: np.ndarray,
    labels: np.ndarray,
    traversal: TraversalState,
    schedule: CostSchedule,
    F: np.ndarray,
    cfg: LossConfig,
) -> float:
    """Expected tree risk + per-node l1 penalty + lambda * relaxed cost."""
    total = expected_risk(tree, phi, labels, traversal)
    if cfg.rho:
        total += cfg.rho * float(np.abs(tree.beta_matrix()).sum())
    if cfg.lam:
        total += cfg.lam * relaxed_cost_penalty(tree, traversal, schedule, F)
    return float(total)


def substituted_cost_brackets(
    tree: CstcTree, schedule: CostSchedule, F: np.ndarray, aux: "AuxiliaryVars"
) -> np.ndarray:
    """Per-path cost bracket with every sqrt replaced by (g/z + z)/2."""
    G_ev, G_ft = path_group_sums(tree, F)
    ev = 0.5 * (G_ev / aux.z_ev + aux.z_ev) @ schedule.learner_costs
    ft = 0.5 * (G_ft / aux.z_ft + aux.z_ft) @ schedule.feature_costs
    return ev + ft


def substituted_loss(
    tree: CstcTree,
    phi: np.ndarray,
    labels: np.ndarray,
    schedule: CostSchedule,
    F: np.ndarray,
    cfg: LossConfig,
    aux: "AuxiliaryVars",
    traversal: TraversalState | None = None,
    node_scores: np.ndarray | None = None,
) -> float:
    """Global loss with fixed auxiliary variables (smooth in the parameters)."""
    phi = np.asarray(phi, dtype=float)
    labels = np.asarray(labels, dtype=float)
    if node_scores is None:
        node_scores = phi @ tree.beta_matrix().T
    if traversal is None:
        traversal = soft_probabilities_from_scores(tree, node_scores)
    total = expected_risk(tree, phi, labels, traversal, node_scores)
    if cfg.rho:
        B2 = tree.beta_matrix() ** 2
        total += cfg.rho * 0.5 * float((B2 / aux.z_l1 + aux.z_l1).sum())
    if cfg.lam:
        brackets = substituted_cost_brackets(tree, schedule, F, aux)
        total += cfg.lam * float(traversal.marginals @ brackets)
    return float(total)


def loss_gradient(
    tree: CstcTree,
    k: int,
    phi: np.ndarray,
    labels: np.ndarray,
    schedule: CostSchedule,
    F: np.ndarray,
    cfg: LossConfig,
    aux: "AuxiliaryVars",
    traversal: TraversalState | None = None,
    node_scores: np.ndarray | None = None,
) -> tuple[np.ndarray, float]:
    """Analytic gradient of the substituted loss w.r.t. ``(beta_k, theta_k)``.

    Includes the flow through the traversal probabilities: the sigmoid at
    node k scales every descendant's risk weight and every descendant
    terminal's share of the cost penalty.
    """
    phi = np.asarray(phi, dtype=float)
    labels = np.asarray(labels, dtype=float)
    F = _check_schedule(schedule, F)
    if node_scores is None:
        node_scores = phi @ tree.beta_matrix().T
    if traversal is None:
        traversal = soft_probabilities_from_scores(tree, node_scores)
    n = len(labels)
    node = tree.nodes[k]

    # direct risk at node k
    resid_k = node_scores[:, k] - labels
    g_beta = (2.0 / n) * (phi.T @ (traversal.p[:, k] * resid_k))
    g_theta = 0.0

    if cfg.rho:
        g_beta += cfg.rho * node.beta / aux.z_l1[k]

    up_nodes, up_terms, low_nodes, low_terms = tree.subtree_split(k)

    brackets = None
    if cfg.lam:
        brackets = substituted_cost_brackets(tree, schedule, F, aux)
        # groups containing beta_k: one per terminal below k
        coeff = np.zeros(tree.num_weak)
        for l in np.concatenate([up_terms, low_terms]):
            coeff += traversal.marginals[l] * (
                schedule.learner_costs / aux.z_ev[l] + F.T @ (schedule.feature_costs / aux.z_ft[l])
            )
        g_beta += cfg.lam * coeff * node.beta

    # flow through the sigmoid at node k
    resid = node_scores - labels[:, None]
    sq = resid * resid
    U = np.zeros(n)
    W = np.zeros(n)
    if up_nodes.size:
        U += (traversal.p[:, up_nodes] * sq[:, up_nodes]).sum(axis=1)
    if low_nodes.size:
        W += (traversal.p[:, low_nodes] * sq[:, low_nodes]).sum(axis=1)
    if cfg.lam:
        if up_terms.size:
            U += cfg.lam * (traversal.terminal_p[:, up_terms] @ brackets[up_terms])
        if low_terms.size:
            W += cfg.lam * (traversal.terminal_p[:, low_terms] @ brackets[low_terms])
    s = traversal.upper[:, k]
    m = ((1.0 - s) * U - s * W) / n
    g_beta += phi.T @ m
    g_theta -= float(m.sum())
    return g_beta, g_theta
