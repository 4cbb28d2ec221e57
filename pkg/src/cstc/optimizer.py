"""Block-coordinate training of the classifier tree.

One node at a time, the optimizer alternates between a closed-form update of
the auxiliary variables that stand in for every square-root/l1 term and
nonlinear conjugate-gradient steps on the node's ``(beta, theta)`` block
with those variables held fixed.  Both half-steps can only decrease the
substituted loss, so the recorded loss sequence is non-increasing.

Initialization runs top-to-bottom: each node is optimized on a view of the
tree where its descendants are cut off, which makes the subproblem convex.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .model import TERMINAL, CstcTree, build_full_tree
from .objective import (
    ZERO_WEIGHT_TOL,
    CostSchedule,
    LossConfig,
    loss_gradient,
    path_group_sums,
    substituted_loss,
)
from .traversal import soft_probabilities_from_scores

__all__ = [
    "AuxiliaryVars",
    "OptimizerConfig",
    "OptimizationError",
    "NodeUpdateResult",
    "aux_closed_form",
    "optimize_node",
    "initialize_tree",
    "train",
]


class OptimizationError(RuntimeError):
    """Raised when the loss or gradient turns non-finite during training.

    ``state`` carries a diagnostic snapshot (node, parameters, last values).
    """

    def __init__(self, message: str, state: dict | None = None):
        super().__init__(message)
        self.state = state or {}


def aux_closed_form(g_values, epsilon_aux: float):
    """Exact minimizer z = sqrt(g) of (g/z + z)/2, floored at epsilon_aux."""
    if epsilon_aux <= 0:
        raise ValueError("epsilon_aux must be > 0")
    g = np.asarray(g_values, dtype=float)
    if (g < 0).any():
        raise ValueError("group values must be non-negative")
    return np.maximum(np.sqrt(g), epsilon_aux)


@dataclass
class AuxiliaryVars:
    """One positive variable per substituted term.

    ``z_l1[k, t]`` for the l1 terms, ``z_ev[l, t]`` for the per-path
    evaluation-cost groups and ``z_ft[l, a]`` for the per-path feature-cost
    groups.
    """

    z_l1: np.ndarray
    z_ev: np.ndarray
    z_ft: np.ndarray

    @classmethod
    def for_tree(cls, tree: CstcTree, F: np.ndarray, epsilon_aux: float) -> "AuxiliaryVars":
        aux = cls(
            z_l1=np.full((tree.num_nodes, tree.num_weak), epsilon_aux),
            z_ev=np.full((tree.num_terminals, tree.num_weak), epsilon_aux),
            z_ft=np.full((tree.num_terminals, np.asarray(F).shape[0]), epsilon_aux),
        )
        aux.refresh(tree, F, epsilon_aux)
        return aux

    def refresh(self, tree: CstcTree, F: np.ndarray, epsilon_aux: float) -> None:
        """Closed-form update: every z snaps to sqrt of its current group."""
        self.z_l1 = np.maximum(np.abs(tree.beta_matrix()), epsilon_aux)
        G_ev, G_ft = path_group_sums(tree, F)
        self.z_ev = aux_closed_form(G_ev, epsilon_aux)
        self.z_ft = aux_closed_form(G_ft, epsilon_aux)


@dataclass
class OptimizerConfig:
    """Iteration caps and tolerances for block-coordinate training."""

    sweeps: int = 20
    cg_iters: int = 50
    tol: float = 1e-6
    alternations: int = 10
    seed: int = 0
    # probability of a finite-difference gradient audit per node update
    gradcheck_rate: float = 0.01

    def __post_init__(self):
        if self.sweeps < 0:
            raise ValueError("sweeps must be >= 0 (0 = initialization only)")
        if self.cg_iters < 1 or self.alternations < 1:
            raise ValueError("iteration caps must be >= 1")
        if not 0 < self.tol < 1:
            raise ValueError("tol must lie in (0, 1)")
        if not 0 <= self.gradcheck_rate <= 1:
            raise ValueError("gradcheck_rate must lie in [0, 1]")


@dataclass
class NodeUpdateResult:
    node_label: int
    loss_before: float
    loss_after: float
    losses: list[float] = field(default_factory=list)
    grad_norm: float = 0.0
    wall_time: float = 0.0


class _NodeProblem:
    """Loss/gradient of one node's block with cached scores for the others.

    Every evaluation writes the candidate parameters into the shared node
    object and refreshes only column k of the score matrix.
    """

    def __init__(self, tree, k, phi, labels, schedule, F, cfg, aux):
        self.tree = tree
        self.k = k
        self.phi = np.asarray(phi, dtype=float)
        self.labels = np.asarray(labels, dtype=float)
        self.schedule = schedule
        self.F = F
        self.cfg = cfg
        self.aux = aux
        self.scores = self.phi @ tree.beta_matrix().T

    def set_params(self, x: np.ndarray) -> None:
        node = self.tree.nodes[self.k]
        node.beta = np.array(x[:-1], dtype=float)
        node.theta = float(x[-1])
        self.scores[:, self.k] = self.phi @ node.beta

    def loss(self, x: np.ndarray) -> float:
        self.set_params(x)
        trav = soft_probabilities_from_scores(self.tree, self.scores)
        return substituted_loss(
            self.tree, self.phi, self.labels, self.schedule, self.F, self.cfg, self.aux,
            traversal=trav, node_scores=self.scores,
        )

    def grad(self, x: np.ndarray) -> np.ndarray:
        self.set_params(x)
        trav = soft_probabilities_from_scores(self.tree, self.scores)
        g_beta, g_theta = loss_gradient(
            self.tree, self.k, self.phi, self.labels, self.schedule, self.F, self.cfg, self.aux,
            traversal=trav, node_scores=self.scores,
        )
        return np.concatenate([g_beta, [g_theta]])

    def precond_diag(self) -> np.ndarray:
        """Diagonal curvature estimate of the substituted loss at node k.

        The penalty curvatures are exact given the current aux variables;
        the risk part uses the traversal-weighted feature second moments.
        Recomputed once per alternation (aux changes between alternations).
        """
        trav = soft_probabilities_from_scores(self.tree, self.scores)
        n = len(self.labels)
        risk = (2.0 / n) * ((self.phi * self.phi).T @ trav.p[:, self.k])
        diag = risk.copy()
        if self.cfg.rho:
            diag += self.cfg.rho / self.aux.z_l1[self.k]
        if self.cfg.lam:
            e = self.schedule.learner_costs
            c = self.schedule.feature_costs
            F = np.asarray(self.F, dtype=float)
            for l in self.tree.terminals_below(self.k):
                diag += self.cfg.lam * trav.marginals[l] * (
                    e / self.aux.z_ev[l] + F.T @ (c / self.aux.z_ft[l])
                )
        theta_curv = max(float(risk.mean()), 1e-6)
        return np.concatenate([np.maximum(diag, 1e-12), [theta_curv]])

    def state_dump(self, extra: dict | None = None) -> dict:
        node = self.tree.nodes[self.k]
        state = {
            "node_index": self.k,
            "node_label": self.tree.labels[self.k],
            "beta": node.beta.copy(),
            "theta": node.theta,
            "lam": self.cfg.lam,
            "rho": self.cfg.rho,
        }
        if extra:
            state.update(extra)
        return state


def _armijo(f, x, fx, gd, d, init_step, c=1e-4, max_halvings=60):
    """Backtracking line search with sufficient-decrease condition."""
    t = init_step
    for _ in range(max_halvings):
        fn = f(x + t * d)
        if np.isfinite(fn) and fn <= fx + c * t * gd:
            return t, fn
        t *= 0.5
    return None, fx


def _cg_minimize(f, grad, x0, max_iters, tol, on_error, precond=None):
    """Polak-Ribiere conjugate gradient with restart on non-descent.

    ``precond``, when given, is the diagonal of a fixed preconditioner: the
    mixed-norm substitution produces per-coordinate curvatures spanning many
    orders of magnitude as weights shrink, and plain CG stalls in the
    resulting ravine.  Returns ``(x, fx, trace)`` where ``trace`` records the
    loss after the initial point and every accepted step (non-increasing).
    """
    x = np.asarray(x0, dtype=float).copy()
    fx = f(x)
    gx = grad(x)
    if not np.isfinite(fx) or not np.isfinite(gx).all():
        raise on_error(fx, gx, x)
    inv_m = 1.0 if precond is None else 1.0 / np.maximum(precond, 1e-12)
    d = -(inv_m * gx)
    trace = [fx]
    last_step = 1.0
    for _ in range(max_iters):
        if np.abs(gx).max() <= 1e-14 * max(1.0, abs(fx)):
            break
        gd = float(gx @ d)
        if gd >= 0:  # restart along (preconditioned) steepest descent
            d = -(inv_m * gx)
            gd = float(gx @ d)
            if gd >= 0:
                break
        t, fn = _armijo(f, x, fx, gd, d, min(max(2.0 * last_step, 1e-12), 1e6))
        if t is None:
            if np.array_equal(d, -(inv_m * gx)):
                break
            d = -(inv_m * gx)
            gd = float(gx @ d)
            t, fn = _armijo(f, x, fx, gd, d, min(max(2.0 * last_step, 1e-12), 1e6))
            if t is None:
                break
        x = x + t * d
        last_step = t
        gnew = grad(x)
        if not np.isfinite(fn) or not np.isfinite(gnew).all():
            raise on_error(fn, gnew, x)
        y = inv_m * gnew
        beta_pr = max(0.0, float(y @ (gnew - gx)) / max(float((inv_m * gx) @ gx), 1e-300))
        d = -y + beta_pr * d
        decrease = fx - fn
        fx, gx = fn, gnew
        trace.append(fx)
        if decrease <= tol * max(1.0, abs(fx)):
            break
    return x, fx, trace


def _sampled_gradcheck(prob: _NodeProblem, x: np.ndarray, rng: np.random.Generator) -> None:
    """Audit a few coordinates of the analytic gradient against central differences."""
    g = prob.grad(x)
    coords = rng.permutation(len(x))[: min(12, len(x))]
    h = 1e-5
    for i in coords:
        e = np.zeros_like(x)
        e[i] = h
        fd = (prob.loss(x + e) - prob.loss(x - e)) / (2 * h)
        denom = max(abs(fd), abs(g[i]), 1e-6)
        if abs(fd - g[i]) / denom > 1e-3:
            raise OptimizationError(
                f"sampled gradient audit failed on coordinate {i}: analytic {g[i]!r} vs fd {fd!r}",
                prob.state_dump({"coordinate": int(i)}),
            )
    prob.set_params(x)


def _leaf_block_solve(tree, k, prob: _NodeProblem, x, opt_cfg) -> tuple[np.ndarray, list[float]]:
    """Exact alternation for a node whose children are both terminals.

    Given fixed aux variables such a block is a weighted ridge problem (its
    threshold does not enter the loss: the two sibling terminals share one
    path, so their reach probabilities always sum to the node's mass), so
    each alternation solves the normal equations instead of running CG.
    """
    cfg, aux, phi, labels = prob.cfg, prob.aux, prob.phi, prob.labels
    n = len(labels)
    trav = soft_probabilities_from_scores(tree, prob.scores)
    w = trav.p[:, k]
    mass = float(w.mean())
    A_risk = (2.0 / n) * (phi.T @ (w[:, None] * phi))
    b = (2.0 / n) * (phi.T @ (w * labels))
    e = prob.schedule.learner_costs
    c = prob.schedule.feature_costs
    F = np.asarray(prob.F, dtype=float)
    terms = tree.terminals_below(k)
    losses: list[float] = []
    prev = prob.loss(x)
    for _ in range(opt_cfg.alternations):
        diag = np.zeros(tree.num_weak)
        if cfg.rho:
            diag += cfg.rho / aux.z_l1[k]
        if cfg.lam:
            share = mass / len(terms)  # sibling terminals share one path
            for l in terms:
                diag += cfg.lam * share * (e / aux.z_ev[l] + F.T @ (c / aux.z_ft[l]))
        A = A_risk + np.diag(diag)
        try:
            beta = np.linalg.solve(A, b)
        except np.linalg.LinAlgError:
            beta = np.linalg.lstsq(A, b, rcond=None)[0]
        x = np.concatenate([beta, [x[-1]]])
        prob.set_params(x)
        aux.refresh(tree, prob.F, cfg.epsilon_aux)
        f_new = prob.loss(x)
        losses.append(f_new)
        if prev - f_new <= opt_cfg.tol * max(1.0, abs(prev)):
            break
        prev = f_new
    return x, losses


def optimize_node(
    tree: CstcTree,
    k: int,
    phi: np.ndarray,
    labels: np.ndarray,
    schedule: CostSchedule,
    F: np.ndarray,
    cfg: LossConfig,
    opt_cfg: OptimizerConfig,
    aux: AuxiliaryVars | None = None,
    rng: np.random.Generator | None = None,
) -> NodeUpdateResult:
    """Alternate CG on ``(beta_k, theta_k)`` with closed-form aux updates.

    The node is updated in place.  The substituted loss is non-increasing
    across every alternation; stops when its relative decrease falls below
    ``opt_cfg.tol``.  Blocks whose children are both terminals are quadratic
    given the aux variables and are solved exactly instead of by CG.
    """
    t0 = time.perf_counter()
    if aux is None:
        aux = AuxiliaryVars.for_tree(tree, F, cfg.epsilon_aux)
    else:
        aux.refresh(tree, F, cfg.epsilon_aux)
    prob = _NodeProblem(tree, k, phi, labels, schedule, F, cfg, aux)

    def on_error(fval, gval, xval):
        return OptimizationError(
            f"non-finite loss or gradient while optimizing node {tree.labels[k]}",
            prob.state_dump({"loss": float(fval), "grad": np.asarray(gval), "x": np.asarray(xval)}),
        )

    node = tree.nodes[k]
    x = np.concatenate([node.beta, [node.theta]])
    f0 = prob.loss(x)
    if not np.isfinite(f0):
        raise on_error(f0, np.zeros_like(x), x)
    losses = [f0]
    is_leaf_block = tree.upper[k].kind == TERMINAL and tree.lower[k].kind == TERMINAL
    if is_leaf_block:
        x, trace = _leaf_block_solve(tree, k, prob, x, opt_cfg)
        if not all(np.isfinite(v) for v in trace):
            raise on_error(trace[-1], np.zeros_like(x), x)
        losses.extend(trace)
        prev = losses[-1]
    else:
        prev = f0
        for _ in range(opt_cfg.alternations):
            x, _, trace = _cg_minimize(
                prob.loss, prob.grad, x, opt_cfg.cg_iters, opt_cfg.tol, on_error,
                precond=prob.precond_diag(),
            )
            prob.set_params(x)
            losses.extend(trace[1:])
            aux.refresh(tree, F, cfg.epsilon_aux)
            f_new = prob.loss(x)
            losses.append(f_new)
            if prev - f_new <= opt_cfg.tol * max(1.0, abs(prev)):
                prev = f_new
                break
            prev = f_new
    grad_norm = float(np.abs(prob.grad(x)).max())
    prob.set_params(x)
    if rng is not None and opt_cfg.gradcheck_rate > 0 and rng.random() < opt_cfg.gradcheck_rate:
        _sampled_gradcheck(prob, x, rng)
    return NodeUpdateResult(
        node_label=tree.labels[k],
        loss_before=f0,
        loss_after=prev,
        losses=losses,
        grad_norm=grad_norm,
        wall_time=time.perf_counter() - t0,
    )


def _log_record(log, phase, sweep, res: NodeUpdateResult):
    if log is not None:
        log.append(
            {
                "phase": phase,
                "sweep": sweep,
                "node": res.node_label,
                "loss_before": res.loss_before,
                "loss_after": res.loss_after,
                "grad_norm": res.grad_norm,
                "wall_time": res.wall_time,
                "losses": list(res.losses),
            }
        )


def _stump_threshold(scores: np.ndarray, labels: np.ndarray, weights: np.ndarray) -> float:
    """Weighted squared-error-optimal 1-D split of ``scores`` against ``labels``.

    Returns the midpoint between the two score values around the best split,
    so no sample ever sits exactly on the threshold; falls back to the single
    score value when there is nothing to split.
    """
    order = np.argsort(scores, kind="stable")
    v = scores[order]
    w = np.maximum(weights[order], 0.0)
    y = labels[order]
    cut = np.nonzero(np.diff(v) > 0)[0]
    if cut.size == 0 or w.sum() <= 0:
        return float(v[0])
    cw = np.cumsum(w)
    cwy = np.cumsum(w * y)
    cwyy = np.cumsum(w * y * y)
    wl, wr = cw[cut], cw[-1] - cw[cut]
    good = (wl > 0) & (wr > 0)
    if not good.any():
        return float(v[0])
    cut = cut[good]
    wl, wr = wl[good], wr[good]
    sl, sr = cwy[cut], cwy[-1] - cwy[cut]
    sse = (cwyy[cut] - sl * sl / wl) + ((cwyy[-1] - cwyy[cut]) - sr * sr / wr)
    j = cut[int(np.argmin(sse))]
    return float(0.5 * (v[j] + v[j + 1]))


def initialize_tree(
    tree: CstcTree,
    phi: np.ndarray,
    labels: np.ndarray,
    schedule: CostSchedule,
    F: np.ndarray,
    cfg: LossConfig,
    opt_cfg: OptimizerConfig,
    log: list | None = None,
    rng: np.random.Generator | None = None,
) -> CstcTree:
    """Top-down initialization: optimize each node as a leaf of its prefix tree.

    Nodes are visited breadth-first; when node k is optimized all of its
    descendants are cut off, which makes the subproblem convex.  Because a
    leaf's loss does not depend on its threshold, theta is then set to the
    best weighted stump split of the node's own scores against the labels, so
    both children start from an informative partition (the cyclic phase
    refines all thresholds jointly).
    """
    phi = np.asarray(phi, dtype=float)
    labels = np.asarray(labels, dtype=float)
    for k in range(tree.num_nodes):
        view, kv = tree.with_descendants_cut(k)
        res = optimize_node(view, kv, phi, labels, schedule, F, cfg, opt_cfg, rng=rng)
        # score with dead coordinates dropped so numerically-tiny weights do
        # not smear otherwise-discrete score clusters
        beta = tree.nodes[k].beta
        scores = phi @ np.where(np.abs(beta) > ZERO_WEIGHT_TOL, beta, 0.0)
        trav = soft_probabilities_from_scores(view, phi @ view.beta_matrix().T)
        tree.nodes[k].theta = _stump_threshold(scores, labels, trav.p[:, kv])
        _log_record(log, "init", None, res)
    return tree


def train(
    phi: np.ndarray,
    labels: np.ndarray,
    schedule: CostSchedule,
    F: np.ndarray,
    depth: int,
    cfg: LossConfig,
    opt_cfg: OptimizerConfig,
    tree: CstcTree | None = None,
    log: list | None = None,
) -> CstcTree:
    """Initialize then cyclically re-optimize every node until convergence.

    ``log``, when given, collects one JSON-serializable record per node
    update (phase, sweep, node label, loss before/after, gradient norm,
    wall time).
    """
    phi = np.asarray(phi, dtype=float)
    labels = np.asarray(labels, dtype=float)
    if phi.ndim != 2 or phi.shape[0] != len(labels):
        raise ValueError("phi must be n x T aligned with labels")
    if tree is None:
        tree = build_full_tree(depth, phi.shape[1])
    rng = np.random.default_rng(opt_cfg.seed)
    initialize_tree(tree, phi, labels, schedule, F, cfg, opt_cfg, log=log, rng=rng)

    aux = AuxiliaryVars.for_tree(tree, F, cfg.epsilon_aux)
    prev = substituted_loss(tree, phi, labels, schedule, F, cfg, aux)
    for sweep in range(opt_cfg.sweeps):
        last = prev
        for k in range(tree.num_nodes):
            res = optimize_node(
                tree, k, phi, labels, schedule, F, cfg, opt_cfg, aux=aux, rng=rng
            )
            _log_record(log, "sweep", sweep, res)
            last = res.loss_after
        if prev - last <= opt_cfg.tol * max(1.0, abs(prev)):
            break
        prev = last
    return tree
