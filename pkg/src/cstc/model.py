"""Topology of a tree of classifiers.

A tree consists of classifier nodes (each holding a weight vector ``beta``
over the T learner outputs and a routing threshold ``theta``) and terminal
elements.  Terminals carry no parameters: an input exiting at a terminal
receives the prediction of the terminal's parent classifier.  Nodes are
stored in breadth-first order, upper child before lower child; every node
keeps a stable ``label`` so identities survive pruning.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

__all__ = [
    "NODE",
    "TERMINAL",
    "Child",
    "ClassifierNode",
    "CstcTree",
    "build_full_tree",
    "path_nodes",
]

NODE = "node"
TERMINAL = "terminal"


class Child(NamedTuple):
    kind: str
    index: int


@dataclass
class ClassifierNode:
    """Parameters of one classifier: routing/prediction weights and threshold.

    ``beta_ft`` holds the fine-tuned prediction weights of predictive nodes;
    routing always uses ``beta`` and ``theta``.
    """

    beta: np.ndarray
    theta: float = 0.0
    beta_ft: np.ndarray | None = None


class _Nested:
    __slots__ = ("node", "label", "upper", "lower")

    def __init__(self, node, label, upper=None, lower=None):
        self.node = node
        self.label = label
        self.upper = upper
        self.lower = lower


class CstcTree:
    """Binary tree of classifier nodes with implicit terminal exits.

    Structure is immutable once built (pruning and cut views construct new
    trees that share the underlying :class:`ClassifierNode` objects); node
    parameters are mutated in place by the optimizer.
    """

    def __init__(
        self,
        nodes: list[ClassifierNode],
        upper: list[Child],
        lower: list[Child],
        labels: list[int],
        depth: int,
    ):
        if not nodes:
            raise ValueError("a tree needs at least one classifier node")
        if not (len(nodes) == len(upper) == len(lower) == len(labels)):
            raise ValueError("inconsistent node/children/label lengths")
        if depth < 1:
            raise ValueError("depth must be >= 1")
        self.nodes = nodes
        self.upper = upper
        self.lower = lower
        self.labels = list(labels)
        self.depth = depth
        self._build_derived()
        self.validate()
        # structure is immutable once built, so per-node subtree queries and
        # the path indicator matrix can be cached
        self._subtree_cache: dict[int, tuple] = {}
        self._path_matrix: np.ndarray | None = None

    # -- derived structure ------------------------------------------------

    def _build_derived(self) -> None:
        V = len(self.nodes)
        parent = np.full(V, -1, dtype=np.int64)
        term_parent: list[int] = []
        for k in range(V):
            for child in (self.upper[k], self.lower[k]):
                if child.kind == NODE:
                    if not 0 <= child.index < V:
                        raise ValueError("child node index out of range")
                    if parent[child.index] != -1:
                        raise ValueError("a node has more than one parent")
                    parent[child.index] = k
                else:
                    while len(term_parent) <= child.index:
                        term_parent.append(-1)
                    if term_parent[child.index] != -1:
                        raise ValueError("duplicate terminal index")
                    term_parent[child.index] = k
        if any(p == -1 for p in term_parent):
            raise ValueError("terminal indices must form a gap-free range")
        self.parent = parent
        self.terminal_parent = term_parent

        node_depth = np.ones(V, dtype=np.int64)
        node_path: list[list[int]] = [[] for _ in range(V)]
        node_path[0] = [0]
        for k in range(1, V):
            p = int(parent[k])
            if p < 0:
                raise ValueError("non-root node without a parent")
            if p >= k:
                raise ValueError("nodes must be stored in breadth-first order")
            node_depth[k] = node_depth[p] + 1
            node_path[k] = node_path[p] + [k]
        self.node_depth = node_depth
        self.node_path = node_path
        self.paths = [node_path[p] for p in term_parent]

    # -- basic queries -----------------------------------------------------

    @property
    def num_nodes(self) -> int:
        return len(self.nodes)

    @property
    def num_terminals(self) -> int:
        return len(self.terminal_parent)

    @property
    def num_weak(self) -> int:
        """Feature-map dimension T shared by every node."""
        return len(self.nodes[0].beta)

    def children(self, k: int) -> tuple[Child, Child]:
        return self.upper[k], self.lower[k]

    def is_predictive(self, k: int) -> bool:
        return self.upper[k].kind == TERMINAL or self.lower[k].kind == TERMINAL

    def predictive_nodes(self) -> list[int]:
        return [k for k in range(self.num_nodes) if self.is_predictive(k)]

    def beta_matrix(self) -> np.ndarray:
        return np.stack([node.beta for node in self.nodes])

    def thetas(self) -> np.ndarray:
        return np.array([node.theta for node in self.nodes])

    def subtree_split(self, k: int):
        """Classifier and terminal indices under each child of node ``k``.

        Returns ``(upper_nodes, upper_terms, lower_nodes, lower_terms)``;
        the child itself is included on its side.
        """
        cached = self._subtree_cache.get(k)
        if cached is not None:
            return cached

        def collect(child: Child) -> tuple[np.ndarray, np.ndarray]:
            nodes: list[int] = []
            terms: list[int] = []
            stack = [child]
            while stack:
                c = stack.pop()
                if c.kind == TERMINAL:
                    terms.append(c.index)
                else:
                    nodes.append(c.index)
                    stack.extend(self.children(c.index))
            return np.asarray(sorted(nodes), dtype=np.int64), np.asarray(sorted(terms), dtype=np.int64)

        un, ut = collect(self.upper[k])
        ln, lt = collect(self.lower[k])
        self._subtree_cache[k] = (un, ut, ln, lt)
        return un, ut, ln, lt

    def terminals_below(self, k: int) -> np.ndarray:
        _, ut, _, lt = self.subtree_split(k)
        return np.concatenate([ut, lt])

    def path_matrix(self) -> np.ndarray:
        """Binary (num_terminals, num_nodes) indicator of path membership."""
        if self._path_matrix is None:
            P = np.zeros((self.num_terminals, self.num_nodes))
            for l, path in enumerate(self.paths):
                P[l, path] = 1.0
            self._path_matrix = P
        return self._path_matrix

    def index_of_label(self, label: int) -> int:
        try:
            return self.labels.index(label)
        except ValueError:
            raise KeyError(f"no node with label {label}") from None

    # -- invariants ---------------------------------------------------------

    def validate(self) -> None:
        V = self.num_nodes
        if self.num_terminals != V + 1:
            # every binary tree with V internal nodes has V + 1 leaves
            raise ValueError("terminal count must equal node count + 1")
        T = self.num_weak
        for node in self.nodes:
            if len(node.beta) != T:
                raise ValueError("all beta vectors must share the ensemble size T")
            if node.beta_ft is not None and len(node.beta_ft) != T:
                raise ValueError("fine-tuned beta must share the ensemble size T")
        on_some_path: set[int] = set()
        for path in self.paths:
            if path[0] != 0:
                raise ValueError("every path must start at the root")
            if len(path) > self.depth:
                raise ValueError("a path exceeds the configured depth")
            on_some_path.update(path)
        if on_some_path != set(range(V)):
            raise ValueError("every classifier must lie on some root-terminal path")

    # -- structural edits (return new trees sharing node objects) -----------

    def _to_nested(self) -> list[_Nested]:
        nested = [_Nested(self.nodes[k], self.labels[k]) for k in range(self.num_nodes)]
        for k in range(self.num_nodes):
            if self.upper[k].kind == NODE:
                nested[k].upper = nested[self.upper[k].index]
            if self.lower[k].kind == NODE:
                nested[k].lower = nested[self.lower[k].index]
        return nested

    def _from_nested(self, root: _Nested) -> "CstcTree":
        order: list[_Nested] = []
        queue = deque([root])
        while queue:
            nd = queue.popleft()
            order.append(nd)
            for ch in (nd.upper, nd.lower):
                if ch is not None:
                    queue.append(ch)
        index = {id(nd): i for i, nd in enumerate(order)}
        upper: list[Child] = []
        lower: list[Child] = []
        n_terms = 0
        for nd in order:
            for ch, out in ((nd.upper, upper), (nd.lower, lower)):
                if ch is None:
                    out.append(Child(TERMINAL, n_terms))
                    n_terms += 1
                else:
                    out.append(Child(NODE, index[id(ch)]))
        return CstcTree(
            nodes=[nd.node for nd in order],
            upper=upper,
            lower=lower,
            labels=[nd.label for nd in order],
            depth=self.depth,
        )

    def with_descendants_cut(self, k: int) -> tuple["CstcTree", int]:
        """A view where node ``k`` becomes a leaf (its subtree removed).

        The view shares node parameter objects with this tree, so optimizing
        node ``k`` in the view updates the full tree as well.  Returns the
        view and the index of ``k`` within it.
        """
        nested = self._to_nested()
        nested[k].upper = None
        nested[k].lower = None
        view = self._from_nested(nested[0])
        return view, view.index_of_label(self.labels[k])

    def without_subtree(self, k: int) -> "CstcTree":
        """A tree with the subtree rooted at node ``k`` replaced by a terminal."""
        if k == 0:
            raise ValueError("cannot remove the root classifier")
        nested = self._to_nested()
        p = int(self.parent[k])
        if self.upper[p] == Child(NODE, k):
            nested[p].upper = None
        else:
            nested[p].lower = None
        return self._from_nested(nested[0])


def build_full_tree(depth: int, num_weak: int) -> CstcTree:
    """Full balanced binary tree: 2^depth - 1 classifiers, 2^depth terminals.

    All parameters start at zero.
    """
    if depth < 1:
        raise ValueError("depth must be >= 1")
    if num_weak < 1:
        raise ValueError("num_weak must be >= 1")
    V = 2**depth - 1
    nodes = [ClassifierNode(beta=np.zeros(num_weak)) for _ in range(V)]
    upper: list[Child] = []
    lower: list[Child] = []
    for k in range(V):
        u, l = 2 * k + 1, 2 * k + 2
        upper.append(Child(NODE, u) if u < V else Child(TERMINAL, u - V))
        lower.append(Child(NODE, l) if l < V else Child(TERMINAL, l - V))
    return CstcTree(nodes, upper, lower, labels=list(range(V)), depth=depth)


def path_nodes(tree: CstcTree, terminal: int) -> list[int]:
    """Classifier indices from the root to the parent of ``terminal``, inclusive."""
    if not 0 <= terminal < tree.num_terminals:
        raise ValueError(f"unknown terminal {terminal}")
    return list(tree.paths[terminal])
