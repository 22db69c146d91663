"""Scenario-tree construction from a continuous process model.

Three generators share one forward pass over the tree topology:

* ``monte_carlo_tree`` draws children i.i.d. from each node's conditional;
* ``stagewise_optimal_tree`` places children at an optimal quantizer of
  each node's conditional;
* ``forward_backward`` refines a tree backwards in time with projected
  stochastic gradient steps on the nearest-scenario objective, sampling
  from joint tail conditionals.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from scipy.special import ndtr, ndtri

from .errors import EmptySubtree, QuantizerDiverged, ShapeMismatch
from .models import ConditionalGaussian, norm_pdf
from .tree import ScenarioTree, TreeTopology


@dataclass
class QuantizeConfig:
    iterations: int = 2000  # samples per subtree in the backward pass
    step_rule: str = "diminishing"  # or "square-summable", "polyak"
    step_exponent: float = 0.75
    step_offset: float = 0.0  # k0 in 1 / (k + k0)^exponent
    polyak_target: float = 0.0
    r: int = 2
    variant: str = "efficient_two_stage"  # or "full"
    seed: int = 0
    prob_floor: float = 0.0
    lognormal_mode: str = "exp-transform"  # or "direct" (1-D only)
    lloyd_tol: float = 1e-12
    lloyd_max_iter: int = 20000
    cluster_samples: int = 20000

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be at least 1")
        if self.r not in (1, 2):
            raise ValueError("r must be 1 or 2")
        if self.variant not in ("efficient_two_stage", "full"):
            raise ValueError(f"unknown variant {self.variant!r}")
        if self.prob_floor < 0:
            raise ValueError("prob_floor must be nonnegative")

    def step(self, k: int, loss: float = 0.0, grad_sq: float = 1.0) -> float:
        if self.step_rule == "diminishing":
            return 1.0 / (k + self.step_offset) ** self.step_exponent
        if self.step_rule == "square-summable":
            return 1.0 / (k + self.step_offset)
        if self.step_rule == "polyak":
            return max(loss - self.polyak_target, 0.0) / grad_sq if grad_sq > 0 else 0.0
        raise ValueError(f"unknown step rule {self.step_rule!r}")


# --- Monte-Carlo trees -----------------------------------------------------


def _forward(model, topology: TreeTopology, place_children):
    if model.T != topology.T:
        raise ShapeMismatch(f"model has {model.T} stages, topology {topology.T}")
    values = np.zeros((topology.n_nodes, model.D))
    probs = np.ones(topology.n_nodes)
    for t in range(1, topology.T + 1):
        for node in topology.stage_nodes(t - 1):
            kids = topology.children(node)
            history = _history(values, topology, node)
            cond = model.conditional(t, history)
            pts, w = place_children(cond, len(kids), t, node)
            values[kids] = pts
            probs[kids] = w
    return ScenarioTree(topology, values, probs)


def _history(values, topology, node):
    path = []
    while node > 0:
        path.append(node)
        node = topology.parent[node]
    return values[path[::-1]]


def monte_carlo_tree(model, topology: TreeTopology, rng: np.random.Generator) -> ScenarioTree:
    """Children are i.i.d. conditional draws with equal probabilities."""

    def place(cond, b, t, node):
        return cond.sample(rng, b), np.full(b, 1.0 / b)

    return _forward(model, topology, place)


# --- stage-wise optimal quantizers -----------------------------------------


def _normal_partial_mean(a, b):
    return norm_pdf(a) - norm_pdf(b)


def _lloyd_1d(cdf, ppf, partial_mean, b: int, r: int, tol: float, max_iter: int):
    """Fixed-point iteration for the optimal b-point quantizer of a 1-D law.

    ``partial_mean(a, c)`` returns E[X; a < X <= c].
    """
    q = ppf((2 * np.arange(1, b + 1) - 1) / (2 * b))
    if b == 1:
        q = np.array([partial_mean(-np.inf, np.inf)]) if r == 2 else ppf(np.array([0.5]))
    increases = 0
    prev_obj = np.inf
    for _ in range(max_iter):
        edges = np.concatenate([[-np.inf], 0.5 * (q[1:] + q[:-1]), [np.inf]])
        Fe = cdf(edges)
        mass = np.diff(Fe)
        if r == 2:
            new = np.where(mass > 0, partial_mean(edges[:-1], edges[1:]) / np.maximum(mass, 1e-300), q)
        else:
            new = np.where(mass > 0, ppf(0.5 * (Fe[:-1] + Fe[1:])), q)
        obj = _distortion_proxy(new, mass) if r == 2 else -np.inf
        if obj > prev_obj + 1e-12 * (1 + abs(prev_obj)):
            increases += 1
            if increases >= 3:
                raise QuantizerDiverged("quantizer objective increased in 3 consecutive sweeps")
        else:
            increases = 0
        prev_obj = obj
        done = np.max(np.abs(new - q)) <= tol * (1 + np.max(np.abs(q)))
        q = new
        if done:
            break
    edges = np.concatenate([[-np.inf], 0.5 * (q[1:] + q[:-1]), [np.inf]])
    return q, np.diff(cdf(edges))


def _distortion_proxy(q, mass):
    # Cheap monotone proxy: negative weighted spread (exact distortion is
    # E[X^2] - sum mass*q^2 for centroid quantizers).
    return -float(np.sum(mass * q**2))


@lru_cache(maxsize=None)
def standard_normal_quantizer(b: int, r: int = 2, tol: float = 1e-12, max_iter: int = 20000):
    """Optimal b-point quantizer of N(0, 1): points and cell probabilities."""
    q, w = _lloyd_1d(ndtr, ndtri, _normal_partial_mean, b, r, tol, max_iter)
    q = 0.5 * (q - q[::-1])  # enforce exact symmetry
    w = 0.5 * (w + w[::-1])
    q.setflags(write=False)
    w.setflags(write=False)
    return q, w / w.sum()


def lognormal_quantizer_1d(mu: float, sigma: float, b: int, r: int = 2, tol=1e-12, max_iter=20000):
    """Direct optimal quantizer of exp(N(mu, sigma^2))."""
    mean = np.exp(mu + 0.5 * sigma**2)

    def cdf(x):
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.where(x > 0, ndtr((np.log(np.maximum(x, 1e-300)) - mu) / sigma), 0.0)

    def ppf(p):
        return np.exp(mu + sigma * ndtri(p))

    def partial_mean(a, c):
        za = np.where(np.asarray(a) > 0, (np.log(np.maximum(a, 1e-300)) - mu) / sigma, -np.inf)
        zc = np.where(np.asarray(c) > 0, (np.log(np.maximum(c, 1e-300)) - mu) / sigma, -np.inf)
        return mean * (ndtr(zc - sigma) - ndtr(za - sigma))

    return _lloyd_1d(cdf, ppf, partial_mean, b, r, tol, max_iter)


def _kmeans(samples, centers, r: int, iters: int = 100):
    for _ in range(iters):
        d2 = ((samples[:, None, :] - centers[None]) ** 2).sum(-1)
        lab = np.argmin(d2, axis=1)
        new = centers.copy()
        for i in range(len(centers)):
            pts = samples[lab == i]
            if len(pts) == 0:
                continue
            if r == 2:
                new[i] = pts.mean(axis=0)
            else:
                new[i] = _geometric_median(pts, centers[i])
        if np.allclose(new, centers, rtol=0, atol=1e-10):
            centers = new
            break
        centers = new
    d2 = ((samples[:, None, :] - centers[None]) ** 2).sum(-1)
    lab = np.argmin(d2, axis=1)
    return centers, np.bincount(lab, minlength=len(centers)) / len(samples)


def _geometric_median(pts, start, iters: int = 50):
    y = start.copy()
    for _ in range(iters):
        d = np.sqrt(((pts - y) ** 2).sum(-1))
        w = 1.0 / np.maximum(d, 1e-12)
        y = (pts * w[:, None]).sum(0) / w.sum()
    return y


def competitive_learning(samples, b: int, r: int = 2, rng=None, passes: int = 1):
    """Online (MacQueen) vector quantization followed by a batch polish."""
    rng = rng or np.random.default_rng(0)
    centers = samples[rng.choice(len(samples), size=b, replace=False)].copy()
    counts = np.ones(b)
    for _ in range(passes):
        for x in samples[rng.permutation(len(samples))]:
            i = int(np.argmin(((centers - x) ** 2).sum(-1)))
            counts[i] += 1
            diff = centers[i] - x
            if r == 1:
                norm = np.sqrt((diff**2).sum())
                if norm == 0:
                    continue
                diff = diff / norm
            centers[i] -= diff / counts[i]
    return _kmeans(samples, centers, r)


@lru_cache(maxsize=None)
def standard_normal_quantizer_nd(b: int, D: int, r: int = 2, n_samples: int = 20000, seed: int = 0):
    """b-point quantizer of N(0, I_D) from seeded samples."""
    rng = np.random.default_rng([seed, b, D, r])
    samples = rng.standard_normal((n_samples, D))
    centers, w = competitive_learning(samples, b, r, rng)
    centers.setflags(write=False)
    w.setflags(write=False)
    return centers, w


def quantize_conditional(cond: ConditionalGaussian, b: int, config: QuantizeConfig, key=()) -> tuple[np.ndarray, np.ndarray]:
    """Optimal b-point quantizer of one conditional distribution."""
    r = config.r
    if cond.dim == 1:
        mu, sigma = float(cond.mean[0]), float(np.sqrt(max(cond.cov[0, 0], 0.0)))
        if cond.lognormal and config.lognormal_mode == "direct":
            if sigma == 0:
                return np.full((b, 1), np.exp(mu)), np.full(b, 1.0 / b)
            q, w = lognormal_quantizer_1d(mu, sigma, b, r, config.lloyd_tol, config.lloyd_max_iter)
            return q[:, None], w
        q, w = standard_normal_quantizer(b, r, config.lloyd_tol, config.lloyd_max_iter)
        pts = mu + sigma * q
        return (np.exp(pts) if cond.lognormal else pts)[:, None], w.copy()
    var = np.diag(cond.cov)
    if np.allclose(cond.cov, np.diag(np.full(cond.dim, var.mean())), rtol=1e-10, atol=1e-12):
        centers, w = standard_normal_quantizer_nd(b, cond.dim, r, config.cluster_samples, config.seed)
        pts = cond.mean + np.sqrt(var.mean()) * centers
    else:
        rng = np.random.default_rng([config.seed, 7, *key])
        samples = cond.mean + rng.standard_normal((config.cluster_samples, cond.dim)) @ cond.chol.T
        pts, w = competitive_learning(samples, b, r, rng)
    return (np.exp(pts) if cond.lognormal else pts), np.asarray(w, dtype=float).copy()


def stagewise_optimal_tree(model, topology: TreeTopology, config: QuantizeConfig | None = None) -> ScenarioTree:
    """Children at the optimal quantizer of each node's conditional distribution."""
    config = config or QuantizeConfig()

    def place(cond, b, t, node):
        return quantize_conditional(cond, b, config, key=(t, int(node)))

    return _forward(model, topology, place)


# --- forward-backward refinement --------------------------------------------


def update_r2(value, sample, step: float, class_size: int):
    """Projected gradient step for squared distance: class mean of a single-leaf gradient."""
    return value - step / class_size * (value - sample)


def update_r1(value, sample, step: float, class_size: int):
    """Normalized-direction step; returns (new value, skipped)."""
    diff = value - sample
    norm = float(np.sqrt(np.sum(diff**2)))
    if norm == 0.0:
        return value, True
    return value - step / class_size * diff / norm, False


@dataclass
class FBTrace:
    # (stage, node) -> per-iteration sampled nearest-scenario cost
    objectives: dict = field(default_factory=dict)
    # (stage, node) -> per-leaf nearest-sample counts
    counts: dict = field(default_factory=dict)
    skips: dict = field(default_factory=dict)
    zero_count_children: int = 0
    kept_probabilities: int = 0

    def mean_objective(self) -> np.ndarray:
        """Iteration-wise average over subtrees of the sampled cost."""
        arrays = list(self.objectives.values())
        return np.mean(arrays, axis=0) if arrays else np.zeros(0)

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["stage", "node", "iteration", "objective", "skips"])
            for (t, node), obj in self.objectives.items():
                skips = self.skips.get((t, node), np.zeros(len(obj), dtype=int))
                for k, (o, s) in enumerate(zip(obj, skips), start=1):
                    w.writerow([t, node, k, f"{o:.17e}", int(s)])


def _cost(diff, r):
    """Path cost per scenario from per-stage differences (n, S, D)."""
    if r == 2:
        return (diff**2).sum(axis=(1, 2))
    return np.sqrt((diff**2).sum(axis=2)).sum(axis=1)


def forward_backward(model, initial_tree: ScenarioTree, config: QuantizeConfig | None = None, callback=None):
    """Backward projected stochastic-gradient refinement of a scenario tree.

    For t = T-1, ..., 1 and every stage t-1 node, ``iterations`` samples are
    drawn from the joint tail conditional given that node's history.  Each
    sample moves the nearest scenario's node values towards it with the
    class-averaged step.  The efficient variant searches and updates only
    stages t and t+1.  Conditional probabilities are then re-estimated from
    the nearest-sample counts.

    ``callback(t, root, k, values)``, if given, sees the node values after
    every update (read-only view).
    """
    config = config or QuantizeConfig()
    tree = initial_tree
    topo = tree.topology
    T = tree.T
    if model.T != T or model.D != tree.D:
        raise ShapeMismatch("model and tree shapes differ")
    Z = np.array(tree.values)
    probs = np.array(tree.cond_probs)
    anc = topo.ancestors
    trace = FBTrace()
    for t in range(T - 1, 0, -1):
        last = t + 1 if config.variant == "efficient_two_stage" else T
        for root in topo.stage_nodes(t - 1):
            leaves = topo.leaves_under(root)
            if len(leaves) == 0:
                raise EmptySubtree(f"node {root} has no scenarios")
            # Distinct nodes per updated stage and the leaf -> node-slot maps.
            node_ids = anc[leaves, t : last + 1]  # (n_leaves, S)
            slot = []
            stage_nodes = []
            sizes = []
            for s in range(node_ids.shape[1]):
                uniq, inv, cnt = np.unique(node_ids[:, s], return_inverse=True, return_counts=True)
                stage_nodes.append(uniq)
                slot.append(inv)
                sizes.append(cnt)
            history = Z[anc[leaves[0], 1:t]] if t > 1 else np.zeros((0, model.D))
            cond = model.joint_tail_conditional(t, history)
            rng = np.random.default_rng([config.seed, t, int(root)])
            draws = cond.sample(rng, config.iterations).reshape(config.iterations, T - t + 1, model.D)
            draws = draws[:, : last - t + 1]
            counts = np.zeros(len(leaves), dtype=np.int64)
            objective = np.empty(config.iterations)
            skips = np.zeros(config.iterations, dtype=np.int64)
            for k in range(1, config.iterations + 1):
                xi = draws[k - 1]
                paths = Z[node_ids]  # (n_leaves, S, D)
                cost = _cost(paths - xi[None], config.r)
                j = int(np.argmin(cost))  # lowest index on ties
                counts[j] += 1
                objective[k - 1] = cost[j]
                S = node_ids.shape[1]
                if config.step_rule == "polyak":
                    loss = 0.5 * cost[j] if config.r == 2 else cost[j]
                    grad_sq = cost[j] if config.r == 2 else float(S)
                    gamma = config.step(k, loss, grad_sq)
                else:
                    gamma = config.step(k)
                for s in range(S):
                    node = node_ids[j, s]
                    n = sizes[s][slot[s][j]]
                    if config.r == 2:
                        Z[node] = update_r2(Z[node], xi[s], gamma, n)
                    else:
                        Z[node], skipped = update_r1(Z[node], xi[s], gamma, n)
                        skips[k - 1] += skipped
                if callback is not None:
                    view = Z.view()
                    view.setflags(write=False)
                    callback(t, int(root), k, view)
            trace.objectives[(t, int(root))] = objective
            trace.counts[(t, int(root))] = counts
            trace.skips[(t, int(root))] = skips
            _reestimate(topo, probs, root, leaves, counts, t, T, config, trace)
    out = ScenarioTree(topo, Z, probs, check=False)
    return ScenarioTree(topo, out.values, _normalize(topo, out.cond_probs)), trace


def _floor(weights, eps, trace):
    zero = weights == 0
    trace.zero_count_children += int(zero.sum())
    if eps > 0:
        weights = np.where(zero, eps * weights.sum(), weights)
    return weights / weights.sum()


def _reestimate(topo, probs, root, leaves, counts, t, T, config, trace):
    leaf_nodes = topo.leaves[leaves]
    anc = topo.ancestors
    # Stage t: mass of each child of the subtree root.
    kids = topo.children(root)
    mass = np.array([counts[anc[leaves, t] == c].sum() for c in kids], dtype=float)
    probs[kids] = _floor(mass, config.prob_floor, trace)
    if t == T - 1:
        for u in kids:
            grandkids = topo.children(u)
            m = np.array([counts[leaf_nodes == g].sum() for g in grandkids], dtype=float)
            if m.sum() == 0:
                trace.kept_probabilities += 1
                continue
            probs[grandkids] = _floor(m, config.prob_floor, trace)


def _normalize(topo, probs):
    probs = np.array(probs)
    sums = np.bincount(topo.parent[1:], weights=probs[1:], minlength=topo.n_nodes)
    probs[1:] /= sums[topo.parent[1:]]
    return probs


def objective_estimate(tree: ScenarioTree, model, sample_count: int, r: int = 2, rng=None, *, return_se: bool = False):
    """Monte-Carlo estimate of E[min over scenarios of the path cost]."""
    rng = rng if rng is not None else np.random.default_rng(0)
    paths = model.sample_paths(rng, sample_count)
    scen = tree.scenario_matrix()
    best = np.empty(sample_count)
    chunk = max(1, 2_000_000 // max(1, scen.size))
    for start in range(0, sample_count, chunk):
        block = paths[start : start + chunk]
        diff = block[:, None] - scen[None]  # (c, N, T, D)
        if r == 2:
            cost = (diff**2).sum(axis=(2, 3))
        else:
            cost = np.sqrt((diff**2).sum(axis=3)).sum(axis=2)
        best[start : start + chunk] = cost.min(axis=1)
    mean = float(best.mean())
    if return_se:
        return mean, float(best.std(ddof=1) / np.sqrt(sample_count)) if sample_count > 1 else 0.0
    return mean


def quantize(model, topology: TreeTopology, method: str = "stagewise", config: QuantizeConfig | None = None, rng=None):
    """Dispatch helper used by the CLI and the experiments."""
    config = config or QuantizeConfig()
    if method == "mc":
        return monte_carlo_tree(model, topology, rng if rng is not None else np.random.default_rng(config.seed)), None
    base = stagewise_optimal_tree(model, topology, config)
    if method == "stagewise":
        return base, None
    if method == "fb":
        return forward_backward(model, base, config)
    raise ValueError(f"unknown method {method!r}")
