"""Test-time metrics: exact cost metering, NDCG, overlap and depth reports.

Cost metering simulates what a deployed tree actually pays: each instance is
hard-routed, every weak learner it needs is evaluated once, and every raw
feature read by one of those learners is extracted once (later classifiers
on the path reuse cached values for free).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .ensemble import WeakLearnerEnsemble, feature_map, usage_matrix
from .model import CstcTree
from .objective import ZERO_WEIGHT_TOL, CostSchedule, LossConfig
from .traversal import predict_batch, route_batch

__all__ = [
    "PAPER_COST_LEVELS",
    "CostReport",
    "SweepRow",
    "SweepResult",
    "evaluate_cost",
    "ndcg_at_k",
    "jaccard_matrix",
    "node_mean_labels",
    "depth_feature_fractions",
    "sweep",
]

PAPER_COST_LEVELS = (1, 5, 20, 50, 100, 150, 200)


@dataclass
class CostReport:
    """Exact per-instance test-time cost decomposition."""

    terminals: np.ndarray
    evaluation_cost: np.ndarray
    extraction_cost: np.ndarray
    total: np.ndarray
    mean_total: float
    per_depth_feature_fractions: dict[str, dict[int, float]]

    def to_json_dict(self) -> dict:
        return {
            "mean_total": self.mean_total,
            "mean_evaluation": float(self.evaluation_cost.mean()),
            "mean_extraction": float(self.extraction_cost.mean()),
            "per_instance": [
                {
                    "terminal": int(t),
                    "evaluation_cost": float(ev),
                    "extraction_cost": float(ex),
                    "total": float(ev + ex),
                }
                for t, ev, ex in zip(self.terminals, self.evaluation_cost, self.extraction_cost)
            ],
            "per_depth_feature_fractions": {
                group: {str(d): frac for d, frac in depths.items()}
                for group, depths in self.per_depth_feature_fractions.items()
            },
        }


def _simulated_path_cost(
    tree: CstcTree, terminal: int, schedule: CostSchedule, F: np.ndarray
) -> tuple[float, float]:
    """Walk one path charging learners/features the first time they appear."""
    seen_learners: set[int] = set()
    seen_features: set[int] = set()
    ev = 0.0
    ex = 0.0
    for k in tree.paths[terminal]:
        active = np.nonzero(np.abs(tree.nodes[k].beta) > ZERO_WEIGHT_TOL)[0]
        for t in active:
            t = int(t)
            if t in seen_learners:
                continue
            seen_learners.add(t)
            ev += float(schedule.learner_costs[t])
            for a in np.nonzero(F[:, t])[0]:
                a = int(a)
                if a not in seen_features:
                    seen_features.add(a)
                    ex += float(schedule.feature_costs[a])
    return ev, ex


def evaluate_cost(
    tree: CstcTree,
    ensemble: WeakLearnerEnsemble,
    schedule: CostSchedule,
    data: np.ndarray,
) -> CostReport:
    """Hard-route every instance and meter its exact evaluation/extraction cost."""
    phi = feature_map(ensemble, np.atleast_2d(np.asarray(data, dtype=float)))
    F = usage_matrix(ensemble)
    terminals = route_batch(tree, phi)
    path_ev = np.zeros(tree.num_terminals)
    path_ex = np.zeros(tree.num_terminals)
    for l in range(tree.num_terminals):
        path_ev[l], path_ex[l] = _simulated_path_cost(tree, l, schedule, F)
    ev = path_ev[terminals]
    ex = path_ex[terminals]
    return CostReport(
        terminals=terminals,
        evaluation_cost=ev,
        extraction_cost=ex,
        total=ev + ex,
        mean_total=float((ev + ex).mean()),
        per_depth_feature_fractions=depth_feature_fractions(tree, F, schedule),
    )


def _query_groups(qid) -> list[np.ndarray]:
    qid = np.asarray(qid)
    groups: dict = {}
    for i, q in enumerate(qid):
        groups.setdefault(q.item() if hasattr(q, "item") else q, []).append(i)
    return [np.asarray(rows, dtype=np.int64) for rows in groups.values()]


def _dcg(ordered_labels: np.ndarray, k: int) -> float:
    top = np.asarray(ordered_labels, dtype=float)[:k]
    gains = 2.0**top - 1.0
    discounts = 1.0 / np.log2(np.arange(2, len(top) + 2))
    return float(gains @ discounts)


def ndcg_at_k(predictions, labels, query_groups, k: int) -> float:
    """Mean NDCG over queries with gain ``2^y - 1`` and log2 rank discount.

    Ranking ties are broken by input order (stable sort).  Queries whose
    ideal DCG is zero contribute 1.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    predictions = np.asarray(predictions, dtype=float)
    labels = np.asarray(labels, dtype=float)
    scores = []
    for rows in _query_groups(query_groups):
        if rows.size == 0:
            raise ValueError("every query group must be non-empty")
        order = np.argsort(-predictions[rows], kind="stable")
        dcg = _dcg(labels[rows][order], k)
        ideal = _dcg(np.sort(labels[rows])[::-1], k)
        scores.append(1.0 if ideal == 0.0 else dcg / ideal)
    if not scores:
        raise ValueError("need at least one query group")
    return float(np.mean(scores))


def _cumulative_feature_set(tree: CstcTree, k: int, F: np.ndarray) -> np.ndarray:
    """Raw features extracted by the time classifier k runs (path-cumulative)."""
    active = np.zeros(tree.num_weak, dtype=bool)
    for j in tree.node_path[k]:
        active |= np.abs(tree.nodes[j].beta) > ZERO_WEIGHT_TOL
    return (np.asarray(F)[:, active] != 0).any(axis=1)


def jaccard_matrix(tree: CstcTree, F: np.ndarray) -> tuple[np.ndarray, list[int]]:
    """Pairwise feature-set overlap of the predictive classifiers.

    Sets are path-cumulative; an entry for two empty sets is defined as 1.
    Returns the matrix and the node labels it is indexed by.
    """
    preds = tree.predictive_nodes()
    sets = [_cumulative_feature_set(tree, k, F) for k in preds]
    m = len(preds)
    out = np.ones((m, m))
    for a in range(m):
        for b in range(a + 1, m):
            union = (sets[a] | sets[b]).sum()
            inter = (sets[a] & sets[b]).sum()
            out[a, b] = out[b, a] = 1.0 if union == 0 else inter / union
    return out, [tree.labels[k] for k in preds]


def node_mean_labels(tree: CstcTree, phi: np.ndarray, labels) -> dict[int, float]:
    """Average label of the hard-routed instances passing through each node."""
    labels = np.asarray(labels, dtype=float)
    terminals = route_batch(tree, phi)
    sums = np.zeros(tree.num_nodes)
    counts = np.zeros(tree.num_nodes)
    for l in range(tree.num_terminals):
        rows = terminals == l
        if not rows.any():
            continue
        for k in tree.paths[l]:
            sums[k] += labels[rows].sum()
            counts[k] += rows.sum()
    return {
        tree.labels[k]: (float(sums[k] / counts[k]) if counts[k] else float("nan"))
        for k in range(tree.num_nodes)
    }


def _cost_groups(costs: np.ndarray) -> list[tuple[str, np.ndarray]]:
    costs = np.asarray(costs, dtype=float)
    values = np.unique(costs)
    if set(values.tolist()) <= set(float(v) for v in PAPER_COST_LEVELS) or len(values) <= 8:
        return [(f"c={v:g}", np.nonzero(costs == v)[0]) for v in values]
    edges = np.quantile(costs, np.linspace(0, 1, 11))
    groups = []
    for i in range(10):
        lo, hi = edges[i], edges[i + 1]
        rows = (
            np.nonzero((costs >= lo) & (costs <= hi))[0]
            if i == 9
            else np.nonzero((costs >= lo) & (costs < hi))[0]
        )
        if rows.size:
            groups.append((f"c in [{lo:g}, {hi:g}]", rows))
    return groups


def depth_feature_fractions(
    tree: CstcTree, F: np.ndarray, schedule: CostSchedule
) -> dict[str, dict[int, float]]:
    """Fraction of each cost group extracted by classifiers at each depth.

    A feature counts as extracted at depth j when some classifier at depth j
    has it in its path-cumulative feature set.
    """
    by_depth: dict[int, np.ndarray] = {}
    for k in range(tree.num_nodes):
        d = int(tree.node_depth[k])
        cum = _cumulative_feature_set(tree, k, F)
        by_depth[d] = cum if d not in by_depth else (by_depth[d] | cum)
    out: dict[str, dict[int, float]] = {}
    for name, rows in _cost_groups(schedule.feature_costs):
        out[name] = {
            d: float(extracted[rows].mean()) for d, extracted in sorted(by_depth.items())
        }
    return out


@dataclass
class SweepRow:
    lam: float
    mean_cost: float = float("nan")
    metric_value: float = float("nan")
    num_nodes: int = 0
    error: str | None = None


@dataclass
class SweepResult:
    rows: list[SweepRow] = field(default_factory=list)
    metric_kind: str = "mse"

    def to_csv(self) -> str:
        lines = ["lambda,mean_cost,metric,num_nodes,error"]
        for r in self.rows:
            err = "" if r.error is None else r.error.replace(",", ";").replace("\n", " ")
            lines.append(f"{r.lam!r},{r.mean_cost!r},{r.metric_value!r},{r.num_nodes},{err}")
        return "\n".join(lines) + "\n"

    def to_xy(self) -> str:
        """Plot-ready two-column (mean cost, metric) file for successful rows."""
        lines = [f"{r.mean_cost!r} {r.metric_value!r}" for r in self.rows if r.error is None]
        return "\n".join(lines) + "\n"


def sweep(
    lambdas,
    train_bundle,
    val_bundle,
    test_bundle,
    ensemble: WeakLearnerEnsemble,
    schedule: CostSchedule,
    cfg: LossConfig,
    opt_cfg,
    depth: int,
    metric,
    log: list | None = None,
) -> SweepResult:
    """Train one full pipeline per lambda and evaluate cost/metric on test.

    Failures are recorded per row and the sweep continues.  Bundles are
    :class:`cstc.data.Bundle` objects (features, labels, optional qid).
    """
    from dataclasses import replace

    from .optimizer import train as train_tree
    from .postprocess import fine_tune, prune

    if len(list(lambdas)) == 0:
        raise ValueError("need at least one lambda")
    F = usage_matrix(ensemble)
    phi_train = feature_map(ensemble, train_bundle.features)
    phi_val = feature_map(ensemble, val_bundle.features)
    phi_test = feature_map(ensemble, test_bundle.features)
    result = SweepResult(metric_kind=metric.kind)
    for lam in lambdas:
        row = SweepRow(lam=float(lam))
        try:
            run_cfg = replace(cfg, lam=float(lam))
            tree = train_tree(
                phi_train, train_bundle.labels, schedule, F, depth, run_cfg, opt_cfg, log=log
            )
            tree, _ = prune(tree, phi_val, val_bundle.labels, metric, val_bundle.qid)
            tree, _ = fine_tune(
                tree,
                phi_train,
                train_bundle.labels,
                phi_val,
                val_bundle.labels,
                metric,
                run_cfg,
                opt_cfg,
                qid_val=val_bundle.qid,
            )
            report = evaluate_cost(tree, ensemble, schedule, test_bundle.features)
            row.mean_cost = report.mean_total
            row.metric_value = metric.score(
                predict_batch(tree, phi_test), test_bundle.labels, test_bundle.qid
            )
            row.num_nodes = tree.num_nodes
        except Exception as exc:  # noqa: BLE001 - per-lambda isolation is the contract
            row.error = f"{type(exc).__name__}: {exc}"
        result.rows.append(row)
    return result
