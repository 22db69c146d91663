"""Shared tree builders for the test suite."""

import numpy as np

from scentree.tree import ScenarioTree, TreeTopology

# Three-stage example tree: probabilities and values listed in breadth-first
# order, root first.  Children are grouped so that each block sums to one.
EXAMPLE_P = [1, 0.2, 0.3, 0.5, 0.5, 0.5, 0.6, 0.2, 0.2, 0.7, 0.3, 0.5, 0.5, 0.1, 0.9, 0.2, 0.8,
             0.1, 0.2, 0.7, 0.5, 0.5, 0.2, 0.3, 0.5, 0.9, 0.1]
EXAMPLE_V = [0, 40.68, 93.83, 25.54, 53.32, 95.48, 26.77, 25.01, 92.77, 6.86, 29.94, 59.16, 20.33,
             63.59, 79.84, 50.17, 65.08, 79.6, 23.34, 60.08, 11.25, 51.58, 83.78, 92.08, 49.82,
             27.76, 65.25]
EXAMPLE_COUNTS = [[3], [2, 3, 2], [2, 2, 2, 3, 2, 3, 2]]


def example_tree() -> ScenarioTree:
    return ScenarioTree(TreeTopology.from_child_counts(EXAMPLE_COUNTS), EXAMPLE_V, EXAMPLE_P)


def random_tree(rng, T=3, max_b=3, D=1, scale=10.0, min_b=1) -> ScenarioTree:
    counts, n = [], 1
    for _ in range(T):
        c = rng.integers(min_b, max_b + 1, size=n).tolist()
        counts.append(c)
        n = sum(c)
    topo = TreeTopology.from_child_counts(counts)
    values = rng.normal(scale=scale, size=(topo.n_nodes, D))
    values[0] = 0.0
    probs = np.empty(topo.n_nodes)
    probs[0] = 1.0
    for node in range(topo.n_nodes):
        ch = topo.children(node)
        if len(ch):
            w = rng.uniform(0.1, 1.0, size=len(ch))
            probs[ch] = w / w.sum()
    return ScenarioTree(topo, values, probs)


def chain_tree(values) -> ScenarioTree:
    values = np.asarray(values, dtype=float)
    if values.ndim == 1:
        values = values[:, None]
    T = len(values)
    topo = TreeTopology.balanced([1] * T)
    return ScenarioTree(topo, np.vstack([np.zeros((1, values.shape[1])), values]), np.ones(T + 1))
