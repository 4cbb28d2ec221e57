"""Cost-sensitive trees of sparse linear classifiers.

Learns a binary tree of sparse linear models over a boosted-tree feature
map, trading prediction risk against the expected test-time cost of feature
extraction and learner evaluation, and meters the exact per-instance cost of
the resulting hard-routed predictor.
"""

from .ensemble import (
    WeakLearnerEnsemble,
    ensemble_predict,
    feature_map,
    fit_gbrt,
    identity_ensemble,
    usage_matrix,
)
from .model import ClassifierNode, CstcTree, build_full_tree, path_nodes
from .objective import (
    CostSchedule,
    LossConfig,
    exact_node_cost,
    exact_path_cost,
    expected_risk,
    global_loss,
    loss_gradient,
    relaxed_cost_penalty,
)
from .optimizer import (
    AuxiliaryVars,
    OptimizationError,
    OptimizerConfig,
    aux_closed_form,
    initialize_tree,
    optimize_node,
    train,
)
from .postprocess import ValidationMetric, fine_tune, prune
from .evaluation import CostReport, evaluate_cost, jaccard_matrix, ndcg_at_k, sweep
from .traversal import (
    TraversalState,
    hard_route,
    predict,
    predict_batch,
    soft_probabilities,
)

__version__ = "0.1.0"
