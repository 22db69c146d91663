"""Nested distance between finite trees and its bounds.

Distances between scenario paths use the stage-summed Euclidean metric
``d(u, v) = sum_t |u_t - v_t|``; root values never enter.  For order
``r = 1`` the backward recursion works with per-stage costs
``d(u_t, v_t) + dl(next subtrees)``.  For other orders the leaf costs are
``d(path)^r`` and the r-th root is taken at the end.

Bounds against a continuous model need KW distances between a continuous
conditional and a finite child set.  In 1-D with ``r = 1`` the distance is
the exact integral of ``|F - G|``; otherwise the continuous side is
discretized (quantile midpoints in 1-D, a fixed-seed sample cloud in
higher dimension).
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from .errors import ShapeMismatch, UnknownConditional, UnknownLipschitz
from .transport import empirical_kw, pairwise_distance, solve_transport, wasserstein_1d
from .tree import ScenarioTree, make_clairvoyant, subtree, truncate


@dataclass
class NestedDistanceResult:
    value: float
    # tables[t][k, l]: conditional distance between the subtrees rooted at the
    # k-th and l-th stage-t nodes of the two trees (r-th power for r != 1).
    tables: Optional[list] = None
    plan: Optional[np.ndarray] = None  # leaf-pair coupling, when requested

    def __float__(self):
        return float(self.value)


def _check_pair(A: ScenarioTree, B: ScenarioTree):
    if A.T != B.T or A.D != B.D:
        raise ShapeMismatch(f"trees differ in shape: T={A.T}/{B.T}, D={A.D}/{B.D}")


def nested_distance(
    A: ScenarioTree,
    B: ScenarioTree,
    r: float = 1.0,
    *,
    keep_tables: bool = False,
    compose_plan: bool = False,
    method: str = "auto",
) -> NestedDistanceResult:
    """Nested distance of order ``r`` via the backward recursion."""
    _check_pair(A, B)
    ta, tb = A.topology, B.topology
    T = A.T
    if r == 1:
        future = np.zeros((ta.nodes_per_stage[T], tb.nodes_per_stage[T]))
    else:
        future = pairwise_distance(A.scenario_matrix(), B.scenario_matrix(), "path") ** r
    tables = [None] * (T + 1)
    tables[T] = future
    cond_plans = [None] * (T + 1)
    for t in range(T, 0, -1):
        na, nb = ta.stage_nodes(t), tb.stage_nodes(t)
        if r == 1:
            cost = pairwise_distance(A.values[na], B.values[nb]) + future
        else:
            cost = future
        pa, pb = ta.stage_nodes(t - 1), tb.stage_nodes(t - 1)
        off_a, off_b = na[0], nb[0]
        current = np.empty((len(pa), len(pb)))
        plans = {} if compose_plan else None
        for i, k in enumerate(pa):
            ka = ta.children(k)
            wa = A.cond_probs[ka]
            for j, l in enumerate(pb):
                kb = tb.children(l)
                sub = cost[ka[0] - off_a : ka[-1] + 1 - off_a, kb[0] - off_b : kb[-1] + 1 - off_b]
                res, obj = solve_transport(sub, wa, B.cond_probs[kb], method=method)
                current[i, j] = obj
                if plans is not None:
                    plans[i, j] = res.plan
        future = current
        tables[t - 1] = current
        cond_plans[t] = plans
    value = max(float(future[0, 0]), 0.0) ** (1.0 / r)
    plan = _compose(A, B, cond_plans) if compose_plan else None
    return NestedDistanceResult(value, tables if keep_tables else None, plan)


def _compose(A, B, cond_plans):
    ta, tb = A.topology, B.topology
    joint = np.ones((1, 1))
    for t in range(1, A.T + 1):
        na, nb = ta.stage_nodes(t), tb.stage_nodes(t)
        nxt = np.zeros((len(na), len(nb)))
        for (i, j), p in cond_plans[t].items():
            k = ta.stage_nodes(t - 1)[i]
            l = tb.stage_nodes(t - 1)[j]
            ka = ta.children(k) - na[0]
            kb = tb.children(l) - nb[0]
            nxt[np.ix_(ka, kb)] = joint[i, j] * p
        joint = nxt
    return joint


def leaf_path_kw(A: ScenarioTree, B: ScenarioTree, r: float = 1.0) -> float:
    """KW distance between the leaf-path distributions (filtrations ignored)."""
    _check_pair(A, B)
    cost = pairwise_distance(A.scenario_matrix(), B.scenario_matrix(), "path") ** r
    _, obj = solve_transport(cost, A.leaf_probabilities(), B.leaf_probabilities())
    return max(obj, 0.0) ** (1.0 / r)


def lower_bound_chain(A: ScenarioTree, B: ScenarioTree, r: float = 1.0) -> list[float]:
    """Distances between both trees made clairvoyant from stage t, t = 1..T."""
    _check_pair(A, B)
    return [nested_distance(make_clairvoyant(A, t), make_clairvoyant(B, t), r).value for t in range(1, A.T + 1)]


def _child_kw(A, k, B, l) -> float:
    ka, kb = A.children(k), B.children(l)
    cost = pairwise_distance(A.values[ka], B.values[kb])
    return solve_transport(cost, A.cond_probs[ka], B.cond_probs[kb])[1]


def upper_bound_stagewise(A: ScenarioTree, B: ScenarioTree, *, return_terms: bool = False):
    """Sum over stages of the largest conditional KW distance over node pairs."""
    _check_pair(A, B)
    terms = []
    for t in range(1, A.T + 1):
        terms.append(
            max(_child_kw(A, k, B, l) for k in A.topology.stage_nodes(t - 1) for l in B.topology.stage_nodes(t - 1))
        )
    total = float(sum(terms))
    return (total, terms) if return_terms else total


def upper_bound_two_stage(A: ScenarioTree, B: ScenarioTree, *, return_terms: bool = False):
    """Sum over consecutive two-stage blocks of the largest two-stage nested distance.

    Blocks cover stages (1,2), (3,4), ...; an odd final stage contributes
    its largest conditional KW distance.
    """
    _check_pair(A, B)
    T = A.T
    terms = []
    for j in range(2, T + 1, 2):
        best = 0.0
        for k in A.topology.stage_nodes(j - 2):
            sa = truncate(subtree(A, k), 2)
            for l in B.topology.stage_nodes(j - 2):
                best = max(best, nested_distance(sa, truncate(subtree(B, l), 2)).value)
        terms.append(best)
    if T % 2:
        terms.append(
            max(_child_kw(A, k, B, l) for k in A.topology.stage_nodes(T - 1) for l in B.topology.stage_nodes(T - 1))
        )
    total = float(sum(terms))
    return (total, terms) if return_terms else total


def truncated_distances(A: ScenarioTree, B: ScenarioTree, r: float = 1.0) -> list[float]:
    """Nested distances of the trees cut beyond stage t, t = 1..T."""
    _check_pair(A, B)
    return [nested_distance(truncate(A, t), truncate(B, t), r).value for t in range(1, A.T + 1)]


# --- continuous-versus-discrete estimation ---------------------------------


@dataclass
class BoundConfig:
    """Resolution knobs for bounds against a continuous model."""

    r: float = 1.0
    resolution_1d: int = 512
    samples: int = 4096
    sup_samples: int = 256
    seed: int = 0
    exact_1d: bool = True

    def normal_draws(self, dim: int) -> np.ndarray:
        # Common random numbers: the same draws for every node and tree.
        return np.random.default_rng([self.seed, dim]).standard_normal((self.samples, dim))


def w1_exact_1d(dist, atoms, weights) -> float:
    """Exact r = 1 distance: integral of |F - G| with G the step CDF of the atoms."""
    atoms = np.asarray(atoms, dtype=float).ravel()
    order = np.argsort(atoms)
    x = atoms[order]
    c = np.cumsum(np.asarray(weights, dtype=float)[order])
    c[-1] = 1.0
    I = dist.cdf_integral
    total = float(I(x[0]))
    if len(x) > 1:
        a, b, level = x[:-1], x[1:], c[:-1]
        xc = np.clip(dist.ppf(np.clip(level, 1e-300, 1 - 1e-16)), a, b)
        Ia, Ib, Ic = I(a), I(b), I(xc)
        below = level * (xc - a) - (Ic - Ia)
        above = (Ib - Ic) - level * (b - xc)
        total += float(np.sum(np.maximum(below, 0.0) + np.maximum(above, 0.0)))
    total += float(dist.mean - x[-1] + I(x[-1]))
    return max(total, 0.0)


def conditional_kw(cond, atoms, weights, config: BoundConfig, *, stages: int = 1) -> float:
    """KW distance between a continuous conditional and a weighted atom set.

    ``atoms`` has shape (n, stages*D); with ``stages > 1`` the ground metric
    is the stage-summed Euclidean norm.
    """
    atoms = np.asarray(atoms, dtype=float)
    if atoms.ndim == 1:
        atoms = atoms[:, None]
    r = config.r
    if cond.dim == 1:
        dist = cond.scalar()
        if r == 1 and config.exact_1d:
            return w1_exact_1d(dist, atoms[:, 0], weights)
        q = (np.arange(config.resolution_1d) + 0.5) / config.resolution_1d
        pts = dist.ppf(q)
        return wasserstein_1d(pts, np.full(len(q), 1.0 / len(q)), atoms[:, 0], weights, r)
    samples = cond.transform(config.normal_draws(cond.dim))
    if stages > 1:
        n = len(samples)
        return empirical_kw(
            samples.reshape(n, stages, -1), atoms.reshape(len(atoms), stages, -1), weights, r, metric="path"
        )
    return empirical_kw(samples, atoms, weights, r)


def _require(model, attr, exc):
    if not hasattr(model, attr):
        raise exc(f"{type(model).__name__} does not provide {attr}")


def _tail_atoms(tree: ScenarioTree, node: int):
    """Tail paths below ``node`` (stages t..T flattened) and their conditional weights."""
    topo = tree.topology
    t = topo.stage[node] + 1
    leaves = topo.leaves_under(node)
    paths = tree.values[topo.ancestors[leaves, t:]]
    w = tree.node_probs[topo.leaves[leaves]]
    return paths.reshape(len(leaves), -1), w / w.sum(), tree.T - t + 1


def stagewise_model_terms(model, tree: ScenarioTree, config: BoundConfig | None = None) -> np.ndarray:
    """Per stage, the largest KW distance between the model's and the tree's conditionals.

    The supremum runs over the tree's stage t-1 node histories.
    """
    _require(model, "conditional", UnknownConditional)
    config = config or BoundConfig()
    terms = np.zeros(tree.T)
    for t in range(1, tree.T + 1):
        best = 0.0
        for node in tree.topology.stage_nodes(t - 1):
            cond = model.conditional(t, tree.path(node))
            kids = tree.children(node)
            best = max(best, conditional_kw(cond, tree.values[kids], tree.cond_probs[kids], config))
        terms[t - 1] = best
    return terms


def _amplified(terms, K) -> float:
    """sum_t terms[t] * prod_{s>t} (K_s + 1); ``K[s-2]`` holds K_s."""
    T = len(terms)
    factors = np.ones(T)
    for t in range(T - 2, -1, -1):
        factors[t] = factors[t + 1] * (K[t] + 1.0)
    return float(np.dot(terms, factors))


def upper_bound_lipschitz(model, tree: ScenarioTree, config: BoundConfig | None = None, *, return_terms: bool = False):
    """Stagewise conditional KW terms amplified by the Lipschitz constants of later stages."""
    _require(model, "lipschitz_constants", UnknownLipschitz)
    if model.T != tree.T or model.D != tree.D:
        raise ShapeMismatch("model and tree shapes differ")
    terms = stagewise_model_terms(model, tree, config)
    value = _amplified(terms, model.lipschitz_constants())
    return (value, terms) if return_terms else value


def joint_tail_terms(model, tree: ScenarioTree, config: BoundConfig | None = None, *, sampled_histories: bool = False):
    """Per stage, the largest KW distance between joint tail distributions.

    The model side conditions on the tree node's history (or, with
    ``sampled_histories``, additionally on model-sampled histories while the
    tree side ranges over all nodes).
    """
    _require(model, "joint_tail_conditional", UnknownConditional)
    config = config or BoundConfig()
    rng = np.random.default_rng([config.seed, 12])
    extra = model.sample_paths(rng, config.sup_samples) if sampled_histories else None
    terms = np.zeros(tree.T)
    for t in range(1, tree.T + 1):
        nodes = tree.topology.stage_nodes(t - 1)
        tails = [_tail_atoms(tree, v) for v in nodes]
        best = 0.0
        for v, (atoms, w, stages) in zip(nodes, tails):
            cond = model.joint_tail_conditional(t, tree.path(v))
            best = max(best, conditional_kw(cond, atoms, w, config, stages=stages))
        if sampled_histories and t > 1:
            for u in extra:
                cond = model.joint_tail_conditional(t, u[: t - 1])
                for atoms, w, stages in tails:
                    best = max(best, conditional_kw(cond, atoms, w, config, stages=stages))
        terms[t - 1] = best
    return terms


def upper_bound_joint_clairvoyant(
    model, tree: ScenarioTree, config: BoundConfig | None = None, *, variant: str = "eq14", return_terms: bool = False
):
    """Joint-tail bound at a given tree.

    ``eq12``: plain sum of sup joint-tail KW terms (histories from tree nodes
    and model samples).  ``eq14``: node-matched terms amplified by the tail
    Lipschitz constants.
    """
    if model.T != tree.T or model.D != tree.D:
        raise ShapeMismatch("model and tree shapes differ")
    if variant == "eq12":
        terms = joint_tail_terms(model, tree, config, sampled_histories=True)
        value = float(terms.sum())
    elif variant == "eq14":
        _require(model, "tail_lipschitz_constants", UnknownLipschitz)
        terms = joint_tail_terms(model, tree, config)
        value = _amplified(terms, model.tail_lipschitz_constants())
    else:
        raise ValueError(f"unknown variant {variant!r}")
    return (value, terms) if return_terms else value


@dataclass
class BoundReport:
    lower_chain: list = field(default_factory=list)
    upper: dict = field(default_factory=dict)
    terms: dict = field(default_factory=dict)
    metadata: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["terms"] = {k: [float(x) for x in v] for k, v in self.terms.items()}
        return out


def tree_bound_report(A: ScenarioTree, B: ScenarioTree, which=("chain", "eq6", "eq10")) -> BoundReport:
    report = BoundReport(metadata={"kind": "tree-vs-tree"})
    if "chain" in which:
        report.lower_chain = lower_bound_chain(A, B)
    if "eq6" in which:
        report.upper["eq6"], report.terms["eq6"] = upper_bound_stagewise(A, B, return_terms=True)
    if "eq10" in which or "eq11" in which:
        key = "eq10" if A.T % 2 == 0 else "eq11"
        report.upper[key], report.terms[key] = upper_bound_two_stage(A, B, return_terms=True)
    return report


def model_bound_report(model, tree: ScenarioTree, config: BoundConfig | None = None, which=("eq7",)) -> BoundReport:
    config = config or BoundConfig()
    report = BoundReport(metadata={"kind": "model-vs-tree", "config": asdict(config)})
    if "eq7" in which:
        report.upper["eq7"], report.terms["eq7"] = upper_bound_lipschitz(model, tree, config, return_terms=True)
        report.metadata["lipschitz"] = model.lipschitz_constants().tolist()
    if "eq12" in which:
        report.upper["eq12"], report.terms["eq12"] = upper_bound_joint_clairvoyant(
            model, tree, config, variant="eq12", return_terms=True
        )
    if "eq14" in which:
        report.upper["eq14"], report.terms["eq14"] = upper_bound_joint_clairvoyant(
            model, tree, config, variant="eq14", return_terms=True
        )
        report.metadata["tail_lipschitz"] = model.tail_lipschitz_constants().tolist()
    return report
