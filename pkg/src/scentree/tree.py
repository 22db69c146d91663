"""Scenario-tree data model.

Nodes are stored stage-major in breadth-first order, so the children of
every node occupy a contiguous index range and the leaves (stage ``T``)
are the last ``N`` nodes.  Node values live once per node, which makes
non-anticipativity hold by construction.  Stage 0 is the root; its value
is carried along but never enters a distance.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass
from functools import cached_property
from typing import Sequence

import numpy as np

from .errors import (
    LeafHasNoSubtree,
    NonAnticipativityViolation,
    ProbabilityError,
    ShapeMismatch,
)

PROB_TOL = 1e-12
PROB_RENORM_TOL = 1e-9
LEAF_PROB_TOL = 1e-10


def _bfs_order(parent: np.ndarray) -> np.ndarray:
    n = len(parent)
    roots = np.flatnonzero(parent < 0)
    if len(roots) != 1:
        raise ShapeMismatch(f"tree needs exactly one root, got {len(roots)}")
    kids: list[list[int]] = [[] for _ in range(n)]
    for i, p in enumerate(parent):
        if p >= 0:
            if p >= n:
                raise ShapeMismatch(f"node {i} has unknown parent {p}")
            kids[p].append(i)
    order = [int(roots[0])]
    head = 0
    while head < len(order):
        order.extend(kids[order[head]])
        head += 1
    if len(order) != n:
        raise ShapeMismatch("parent array contains a cycle or detached nodes")
    return np.asarray(order, dtype=np.int64)


@dataclass(frozen=True, eq=False)
class TreeTopology:
    """Fixed tree shape: a parent array in canonical breadth-first order."""

    parent: np.ndarray

    def __post_init__(self):
        parent = np.asarray(self.parent, dtype=np.int64)
        order = _bfs_order(parent)
        if not np.array_equal(order, np.arange(len(parent))):
            raise ShapeMismatch("parent array is not in canonical BFS order; use TreeTopology.from_parents")
        parent.setflags(write=False)
        object.__setattr__(self, "parent", parent)
        if len(set(self.stage[self.stage_nodes(self.T)].tolist())) != 1 or np.any(
            self.n_children[self.stage < self.T] == 0
        ):
            raise ShapeMismatch("all leaves must sit at the final stage")

    @classmethod
    def from_parents(cls, parent: Sequence[int]) -> tuple["TreeTopology", np.ndarray]:
        """Canonicalize an arbitrary parent array.

        Returns the topology and ``order`` such that new node ``k`` is old
        node ``order[k]``.
        """
        parent = np.asarray(parent, dtype=np.int64)
        order = _bfs_order(parent)
        new_id = np.empty_like(order)
        new_id[order] = np.arange(len(order))
        new_parent = np.where(parent[order] < 0, -1, new_id[np.maximum(parent[order], 0)])
        return cls(new_parent), order

    @classmethod
    def balanced(cls, branching: Sequence[int]) -> "TreeTopology":
        """Every node at stage ``t-1`` gets ``branching[t-1]`` children."""
        return cls.from_child_counts([[int(b)] * n for b, n in zip(branching, np.cumprod([1, *branching[:-1]]))])

    @classmethod
    def from_child_counts(cls, counts: Sequence[Sequence[int]]) -> "TreeTopology":
        """``counts[t][k]`` is the number of children of the k-th node at stage t."""
        parent = [-1]
        frontier = [0]
        for stage_counts in counts:
            if len(stage_counts) != len(frontier):
                raise ShapeMismatch("child counts do not match the number of nodes per stage")
            nxt = []
            for node, c in zip(frontier, stage_counts):
                for _ in range(int(c)):
                    parent.append(node)
                    nxt.append(len(parent) - 1)
            frontier = nxt
        return cls(np.asarray(parent))

    @cached_property
    def stage(self) -> np.ndarray:
        st = np.zeros(len(self.parent), dtype=np.int64)
        for i in range(1, len(self.parent)):
            st[i] = st[self.parent[i]] + 1
        st.setflags(write=False)
        return st

    @property
    def n_nodes(self) -> int:
        return len(self.parent)

    @cached_property
    def T(self) -> int:
        return int(self.stage.max())

    @cached_property
    def nodes_per_stage(self) -> np.ndarray:
        return np.bincount(self.stage, minlength=self.T + 1)

    @property
    def n_leaves(self) -> int:
        return int(self.nodes_per_stage[-1])

    @cached_property
    def _stage_start(self) -> np.ndarray:
        return np.concatenate([[0], np.cumsum(self.nodes_per_stage)])

    def stage_nodes(self, t: int) -> np.ndarray:
        return np.arange(self._stage_start[t], self._stage_start[t + 1])

    @cached_property
    def n_children(self) -> np.ndarray:
        return np.bincount(self.parent[1:], minlength=self.n_nodes)

    @cached_property
    def _first_child(self) -> np.ndarray:
        first = np.full(self.n_nodes, self.n_nodes, dtype=np.int64)
        kids = np.arange(1, self.n_nodes)
        np.minimum.at(first, self.parent[1:], kids)
        return first

    def children(self, node: int) -> np.ndarray:
        start = self._first_child[node]
        return np.arange(start, start + self.n_children[node])

    @cached_property
    def leaves(self) -> np.ndarray:
        return self.stage_nodes(self.T)

    @cached_property
    def ancestors(self) -> np.ndarray:
        """``ancestors[i, t]`` is the stage-t node on the path to leaf i."""
        anc = np.empty((self.n_leaves, self.T + 1), dtype=np.int64)
        anc[:, self.T] = self.leaves
        for t in range(self.T - 1, -1, -1):
            anc[:, t] = self.parent[anc[:, t + 1]]
        anc.setflags(write=False)
        return anc

    def pred(self, t: int) -> np.ndarray:
        """Node id at stage ``t`` for every leaf."""
        return self.ancestors[:, t]

    def leaves_under(self, node: int) -> np.ndarray:
        t = self.stage[node]
        return np.flatnonzero(self.ancestors[:, t] == node)

    def __eq__(self, other):
        return isinstance(other, TreeTopology) and np.array_equal(self.parent, other.parent)

    def __hash__(self):
        return hash(self.parent.tobytes())


class ScenarioTree:
    """Finite scenario tree: topology, node values and conditional probabilities.

    Parameters
    ----------
    topology : TreeTopology
    values : array (n_nodes, D) or (n_nodes,)
        One value per node; row 0 is the root.
    cond_probs : array (n_nodes,)
        Probability of each node given its parent; the root entry is ignored
        and stored as 1.
    """

    def __init__(self, topology: TreeTopology, values, cond_probs, *, check: bool = True):
        values = np.asarray(values, dtype=float)
        if values.ndim == 1:
            values = values[:, None]
        cond_probs = np.array(cond_probs, dtype=float)
        if values.shape[0] != topology.n_nodes or cond_probs.shape != (topology.n_nodes,):
            raise ShapeMismatch(
                f"expected {topology.n_nodes} node values/probabilities, got {values.shape[0]} and {cond_probs.shape}"
            )
        cond_probs[0] = 1.0
        if check:
            if not np.all(np.isfinite(values)):
                raise ShapeMismatch("node values must be finite")
            cond_probs = _check_probabilities(topology, cond_probs)
        values = values.copy()
        values.setflags(write=False)
        cond_probs.setflags(write=False)
        self.topology = topology
        self.values = values
        self.cond_probs = cond_probs
        if check:
            total = self.leaf_probabilities().sum()
            if abs(total - 1.0) > LEAF_PROB_TOL:
                raise ProbabilityError(f"leaf probabilities sum to {total}")

    @property
    def T(self) -> int:
        return self.topology.T

    @property
    def D(self) -> int:
        return self.values.shape[1]

    @property
    def n_leaves(self) -> int:
        return self.topology.n_leaves

    def children(self, node: int) -> np.ndarray:
        return self.topology.children(node)

    @cached_property
    def node_probs(self) -> np.ndarray:
        """Unconditional probability of reaching every node."""
        probs = self.cond_probs.copy()
        parent = self.topology.parent
        for i in range(1, len(probs)):
            probs[i] *= probs[parent[i]]
        probs.setflags(write=False)
        return probs

    def leaf_probabilities(self) -> np.ndarray:
        return self.node_probs[self.topology.leaves]

    def scenario_matrix(self) -> np.ndarray:
        """Leaf-indexed values, shape (N, T, D); stage 0 excluded."""
        return self.values[self.topology.ancestors[:, 1:]]

    def path(self, node: int) -> np.ndarray:
        """Values on the path root -> node, stages 1..stage(node), shape (t, D)."""
        nodes = []
        parent = self.topology.parent
        while node > 0:
            nodes.append(node)
            node = parent[node]
        return self.values[nodes[::-1]]

    def with_values(self, values) -> "ScenarioTree":
        return ScenarioTree(self.topology, values, self.cond_probs, check=False)

    def with_probs(self, cond_probs) -> "ScenarioTree":
        return ScenarioTree(self.topology, self.values, cond_probs)

    def map_values(self, fn) -> "ScenarioTree":
        return ScenarioTree(self.topology, fn(self.values), self.cond_probs, check=False)

    def __eq__(self, other):
        return (
            isinstance(other, ScenarioTree)
            and self.topology == other.topology
            and np.array_equal(self.values, other.values)
            and np.array_equal(self.cond_probs, other.cond_probs)
        )

    def __repr__(self):
        return f"ScenarioTree(T={self.T}, D={self.D}, nodes_per_stage={self.topology.nodes_per_stage.tolist()})"

    # --- JSON interchange -------------------------------------------------

    def to_dict(self) -> dict:
        parent = self.topology.parent
        stage = self.topology.stage
        nodes = [
            {
                "id": i,
                "stage": int(stage[i]),
                "parent": None if parent[i] < 0 else int(parent[i]),
                "value": [float(x) for x in self.values[i]],
                "cond_prob": float(self.cond_probs[i]),
            }
            for i in range(self.topology.n_nodes)
        ]
        return {"T": self.T, "D": self.D, "nodes": nodes}

    @classmethod
    def from_dict(cls, data: dict) -> "ScenarioTree":
        nodes = data["nodes"]
        D = int(data.get("D", 1))
        index = {node["id"]: k for k, node in enumerate(nodes)}
        parent = np.array([-1 if n.get("parent") is None else index[n["parent"]] for n in nodes])
        values = np.array([n["value"] if n.get("value") is not None else [0.0] * D for n in nodes], dtype=float)
        if values.ndim == 1:
            values = values[:, None]
        probs = np.array([n.get("cond_prob", 1.0) for n in nodes], dtype=float)
        topology, order = TreeTopology.from_parents(parent)
        tree = cls(topology, values[order], probs[order])
        if "T" in data and int(data["T"]) != tree.T:
            raise ShapeMismatch(f"declared T={data['T']} but the tree has {tree.T} stages")
        if values.shape[1] != D:
            raise ShapeMismatch(f"declared D={D} but values have dimension {values.shape[1]}")
        for n, k in zip(nodes, np.argsort(order)):
            if "stage" in n and int(n["stage"]) != topology.stage[k]:
                raise ShapeMismatch(f"node {n['id']} declares stage {n['stage']}, parent chain gives {topology.stage[k]}")
        return tree

    def to_json(self, path=None, **kwargs) -> str:
        text = json.dumps(self.to_dict(), **kwargs)
        if path is not None:
            with open(path, "w") as fh:
                fh.write(text)
        return text

    @classmethod
    def from_json(cls, source) -> "ScenarioTree":
        """Load from a JSON string or a path to a JSON file."""
        if isinstance(source, str) and source.lstrip().startswith("{"):
            return cls.from_dict(json.loads(source))
        with open(source) as fh:
            return cls.from_dict(json.load(fh))


def _check_probabilities(topology: TreeTopology, cond_probs: np.ndarray) -> np.ndarray:
    if np.any(cond_probs < 0) or not np.all(np.isfinite(cond_probs)):
        raise ProbabilityError("conditional probabilities must be finite and nonnegative")
    parent = topology.parent
    sums = np.bincount(parent[1:], weights=cond_probs[1:], minlength=topology.n_nodes)
    inner = topology.n_children > 0
    err = np.abs(sums[inner] - 1.0)
    if np.any(err > PROB_RENORM_TOL):
        bad = np.flatnonzero(inner)[np.argmax(err)]
        raise ProbabilityError(f"children of node {bad} have probabilities summing to {sums[bad]}")
    if np.any(err > PROB_TOL):
        warnings.warn("renormalizing conditional probabilities with rounding error up to %.2e" % err.max())
        cond_probs = cond_probs.copy()
        cond_probs[1:] /= sums[parent[1:]]
    return cond_probs


def is_nonanticipative(topology: TreeTopology, Z) -> bool:
    """Exact membership test of a leaf-indexed (N, T[, D]) matrix in Z^na."""
    Z = np.asarray(Z)
    if Z.ndim == 2:
        Z = Z[:, :, None]
    for t in range(1, topology.T + 1):
        pred = topology.pred(t)
        first = np.zeros(topology.n_nodes, dtype=np.int64)
        first[pred[::-1]] = np.arange(len(pred))[::-1]
        if not np.array_equal(Z[:, t - 1], Z[first[pred], t - 1]):
            return False
    return True


def build_tree(topology: TreeTopology, values, cond_probs) -> ScenarioTree:
    """Validated tree from node values or from a leaf-indexed scenario matrix.

    ``values`` may be node-indexed, shape (n_nodes[, D]), or a scenario
    matrix of shape (N, T[, D]).  A scenario matrix must be
    non-anticipative with exact equality; the root value is then 0.
    """
    values = np.asarray(values, dtype=float)
    N, T = topology.n_leaves, topology.T
    is_matrix = values.shape[0] == N and values.ndim >= 2 and values.shape[1] == T and (
        values.ndim == 3 or N != topology.n_nodes
    )
    if is_matrix:
        Z = values if values.ndim == 3 else values[:, :, None]
        if not is_nonanticipative(topology, Z):
            raise NonAnticipativityViolation("scenario values differ within a predecessor class")
        node_values = np.zeros((topology.n_nodes, Z.shape[2]))
        for t in range(1, T + 1):
            node_values[topology.pred(t)] = Z[:, t - 1]
        values = node_values
    return ScenarioTree(topology, values, cond_probs)


def leaf_probabilities(tree: ScenarioTree) -> np.ndarray:
    return tree.leaf_probabilities()


def make_clairvoyant(tree: ScenarioTree, stage: int) -> ScenarioTree:
    """Relax the filtration from ``stage`` on: one path per scenario below stage-1.

    Values and leaf probabilities are preserved; equal values are not merged.
    """
    T = tree.T
    if not 1 <= stage <= T:
        raise ValueError(f"stage must lie in 1..{T}, got {stage}")
    topo = tree.topology
    keep = np.flatnonzero(topo.stage <= stage - 1)
    parent = list(topo.parent[keep])
    values = list(tree.values[keep])
    probs = list(tree.cond_probs[keep])
    anc = topo.ancestors
    for node in topo.stage_nodes(stage - 1):
        for leaf in topo.leaves_under(node):
            path_nodes = anc[leaf, stage:]
            prev = node
            for j, n in enumerate(path_nodes):
                parent.append(prev)
                values.append(tree.values[n])
                probs.append(np.prod(tree.cond_probs[path_nodes]) if j == 0 else 1.0)
                prev = len(parent) - 1
    new_topo, order = TreeTopology.from_parents(parent)
    return ScenarioTree(new_topo, np.asarray(values)[order], np.asarray(probs)[order], check=False)


def subtree(tree: ScenarioTree, node: int) -> ScenarioTree:
    """Tree rooted at ``node`` with inherited conditional probabilities."""
    topo = tree.topology
    if topo.n_children[node] == 0:
        raise LeafHasNoSubtree(f"node {node} is a leaf")
    keep = [node]
    head = 0
    while head < len(keep):
        keep.extend(topo.children(keep[head]).tolist())
        head += 1
    keep = np.asarray(keep)
    remap = {int(old): new for new, old in enumerate(keep)}
    parent = np.array([-1] + [remap[int(topo.parent[k])] for k in keep[1:]])
    probs = tree.cond_probs[keep].copy()
    probs[0] = 1.0
    return ScenarioTree(TreeTopology(parent), tree.values[keep], probs, check=False)


def truncate(tree: ScenarioTree, stage: int) -> ScenarioTree:
    """Cut the tree beyond ``stage``."""
    if not 1 <= stage <= tree.T:
        raise ValueError(f"stage must lie in 1..{tree.T}")
    keep = np.flatnonzero(tree.topology.stage <= stage)
    return ScenarioTree(TreeTopology(tree.topology.parent[keep]), tree.values[keep], tree.cond_probs[keep], check=False)


@dataclass(frozen=True)
class NonAnticipativityClasses:
    """Partition of leaves by their stage-``stage`` predecessor."""

    stage: int
    labels: np.ndarray  # class index per leaf
    members: tuple  # tuple of leaf-index arrays
    sizes: np.ndarray  # size per class

    @property
    def size_per_leaf(self) -> np.ndarray:
        return self.sizes[self.labels]

    @classmethod
    def from_groups(cls, groups: Sequence[Sequence[int]], stage: int = 1) -> "NonAnticipativityClasses":
        n = sum(len(g) for g in groups)
        labels = np.empty(n, dtype=np.int64)
        for k, g in enumerate(groups):
            labels[np.asarray(g)] = k
        return cls(stage, labels, tuple(np.asarray(g) for g in groups), np.array([len(g) for g in groups]))


def nonanticipativity_classes(topology: TreeTopology, stage: int) -> NonAnticipativityClasses:
    if not 1 <= stage <= topology.T:
        raise ValueError(f"stage must lie in 1..{topology.T}")
    pred = topology.pred(stage)
    _, labels = np.unique(pred, return_inverse=True)
    sizes = np.bincount(labels)
    members = tuple(np.flatnonzero(labels == k) for k in range(len(sizes)))
    return NonAnticipativityClasses(stage, labels, members, sizes)


def project_gradient(classes: NonAnticipativityClasses, raw_gradient) -> np.ndarray:
    """Orthogonal projection onto equal-within-class vectors (class means).

    The mean is formed as ``g0 + mean(g - g0)`` so that a vector already
    constant on each class is returned bit-for-bit.
    """
    g = np.asarray(raw_gradient, dtype=float)
    out = np.empty_like(g)
    for idx in classes.members:
        block = g[idx]
        base = block[0]
        out[idx] = base + (block - base).sum(axis=0) / len(idx)
    return out
