"""Exact optimal transport between finite discrete distributions.

The solver is a transportation simplex (MODI potentials on a spanning-tree
basis).  It is small and fast on the many tiny problems of the
nested-distance recursion; large problems go to POT's network simplex, with
HiGHS as a fallback.  ``brute_force_transport`` is an independent
vertex-enumeration oracle for tests.
"""

from __future__ import annotations

import itertools
import os
import warnings
from collections import deque
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy import sparse
from scipy.optimize import linprog

from .errors import DegenerateInput, InfeasibleMarginals, ShapeMismatch, SizeLimitExceeded

MARGINAL_TOL = 1e-9
WEIGHT_TOL = 1e-12
# Above this many cells the POT network simplex is used instead of ours.
LARGE_PROBLEM_CELLS = 4096
# Network-simplex iteration cap before falling back to HiGHS.
POT_MAX_ITER = 1_000_000


@dataclass(frozen=True)
class DiscreteDistribution:
    """Weighted point set; atoms have shape (n, D) or (n, T, D) for paths."""

    atoms: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        atoms = np.asarray(self.atoms, dtype=float)
        if atoms.ndim == 1:
            atoms = atoms[:, None]
        weights = np.asarray(self.weights, dtype=float)
        if weights.shape != (atoms.shape[0],):
            raise ShapeMismatch(f"{atoms.shape[0]} atoms but {weights.shape} weights")
        if np.any(weights < 0) or not np.all(np.isfinite(weights)):
            raise InfeasibleMarginals("weights must be finite and nonnegative")
        if abs(weights.sum() - 1.0) > WEIGHT_TOL * max(1, len(weights)):
            raise InfeasibleMarginals(f"weights sum to {weights.sum()!r}")
        if not np.all(np.isfinite(atoms)):
            raise ShapeMismatch("atoms must be finite")
        object.__setattr__(self, "atoms", atoms)
        object.__setattr__(self, "weights", weights)

    @classmethod
    def uniform(cls, atoms) -> "DiscreteDistribution":
        atoms = np.asarray(atoms, dtype=float)
        return cls(atoms, np.full(atoms.shape[0], 1.0 / atoms.shape[0]))

    def __len__(self):
        return self.atoms.shape[0]


@dataclass
class TransportPlan:
    plan: np.ndarray
    objective: float
    row_duals: Optional[np.ndarray] = None
    col_duals: Optional[np.ndarray] = None
    iterations: int = 0
    row_residual: float = field(default=0.0)
    col_residual: float = field(default=0.0)

    @property
    def dual_objective(self) -> Optional[float]:
        if self.row_duals is None:
            return None
        return float(self.row_duals @ self.plan.sum(axis=1) + self.col_duals @ self.plan.sum(axis=0))

    @property
    def duality_gap(self) -> Optional[float]:
        dual = self.dual_objective
        return None if dual is None else abs(self.objective - dual)


def pairwise_distance(X, Y, metric: str = "euclidean") -> np.ndarray:
    """Distance matrix between atom sets.

    ``euclidean`` treats each atom as one flat vector; ``path`` expects
    (n, T, D) arrays and sums the per-stage Euclidean norms.
    """
    X = np.asarray(X, dtype=float)
    Y = np.asarray(Y, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    if Y.ndim == 1:
        Y = Y[:, None]
    if X.shape[1:] != Y.shape[1:]:
        raise ShapeMismatch(f"atom shapes differ: {X.shape[1:]} vs {Y.shape[1:]}")
    diff = X[:, None] - Y[None, :]
    if metric == "euclidean":
        return np.sqrt((diff.reshape(len(X), len(Y), -1) ** 2).sum(axis=-1))
    if metric == "path":
        if X.ndim == 2:
            return np.abs(diff)
        return np.sqrt((diff**2).sum(axis=-1)).sum(axis=-1)
    raise ValueError(f"unknown metric {metric!r}")


def _check_problem(cost, supply, demand):
    cost = np.asarray(cost, dtype=float)
    supply = np.asarray(supply, dtype=float)
    demand = np.asarray(demand, dtype=float)
    if cost.shape != (len(supply), len(demand)):
        raise ShapeMismatch(f"cost {cost.shape} vs marginals {len(supply)}, {len(demand)}")
    if len(supply) == 0 or len(demand) == 0:
        raise DegenerateInput("empty support")
    if not np.all(np.isfinite(cost)):
        raise ShapeMismatch("cost entries must be finite")
    if np.any(cost < 0):
        raise DegenerateInput("cost entries must be nonnegative")
    if np.any(supply < 0) or np.any(demand < 0):
        raise InfeasibleMarginals("negative marginal weight")
    if abs(supply.sum() - demand.sum()) > MARGINAL_TOL * max(1.0, supply.sum()):
        raise InfeasibleMarginals(f"supply {supply.sum()!r} and demand {demand.sum()!r} disagree")
    return cost, supply, demand


def _northwest_corner(s, d):
    m, n = len(s), len(d)
    s = s.copy()
    d = d.copy()
    basis = []
    flow = []
    i = j = 0
    while True:
        x = min(s[i], d[j])
        basis.append((i, j))
        flow.append(x)
        s[i] -= x
        d[j] -= x
        if i == m - 1 and j == n - 1:
            break
        if (s[i] <= d[j] and i < m - 1) or j == n - 1:
            i += 1
        else:
            j += 1
    return basis, flow


def _tree_adjacency(basis, m, n):
    adj = [[] for _ in range(m + n)]
    for k, (i, j) in enumerate(basis):
        adj[i].append((m + j, k))
        adj[m + j].append((i, k))
    return adj


def _potentials(basis, adj, C, m, n):
    u = np.zeros(m)
    v = np.zeros(n)
    seen = np.zeros(m + n, dtype=bool)
    seen[0] = True
    queue = deque([0])
    while queue:
        a = queue.popleft()
        for b, k in adj[a]:
            if seen[b]:
                continue
            seen[b] = True
            i, j = basis[k]
            if a < m:
                v[j] = C[i, j] - u[i]
            else:
                u[i] = C[i, j] - v[j]
            queue.append(b)
    return u, v


def _tree_path(adj, start, goal):
    """Edge indices on the unique tree path start -> goal."""
    prev = {start: (None, None)}
    queue = deque([start])
    while queue:
        a = queue.popleft()
        if a == goal:
            break
        for b, k in adj[a]:
            if b not in prev:
                prev[b] = (a, k)
                queue.append(b)
    edges = []
    node = goal
    while node != start:
        node, k = prev[node]
        edges.append(k)
    return edges  # ordered from goal back to start


def _simplex(C, s, d, max_iter=None):
    m, n = C.shape
    basis, flow = _northwest_corner(s, d)
    flow = np.asarray(flow)
    scale = 1.0 + np.abs(C).max()
    tol = 1e-12 * scale
    max_iter = max_iter or 50 * (m + n) * max(m, n) + 1000
    degenerate_streak = 0
    iterations = 0
    while True:
        adj = _tree_adjacency(basis, m, n)
        u, v = _potentials(basis, adj, C, m, n)
        reduced = C - u[:, None] - v[None, :]
        if degenerate_streak > m + n:
            # Bland's rule: first improving cell in row-major order.
            cand = np.flatnonzero(reduced.ravel() < -tol)
            if len(cand) == 0:
                break
            flat = cand[0]
        else:
            flat = int(np.argmin(reduced))
            if reduced.flat[flat] >= -tol:
                break
        iterations += 1
        if iterations > max_iter:
            raise RuntimeError("transportation simplex did not converge")
        ei, ej = divmod(flat, n)
        # Path from column node back to the row node; minus cells first.
        path = _tree_path(adj, ei, m + ej)
        minus = path[0::2]
        plus = path[1::2]
        theta_candidates = flow[minus]
        theta = theta_candidates.min()
        ties = [k for k, x in zip(minus, theta_candidates) if x == theta]
        leave = min(ties, key=lambda k: basis[k]) if degenerate_streak > m + n else ties[0]
        flow[minus] -= theta
        flow[plus] += theta
        degenerate_streak = degenerate_streak + 1 if theta == 0 else 0
        basis[leave] = (ei, ej)
        flow[leave] = theta
    plan = np.zeros((m, n))
    for (i, j), x in zip(basis, flow):
        plan[i, j] += x
    return plan, u, v, iterations


def _solve_pot(C, s, d):
    for backend in ("PYTORCH", "JAX", "TENSORFLOW", "CUPY"):
        os.environ.setdefault(f"POT_BACKEND_DISABLE_{backend}", "1")
    import ot

    # The network simplex loses precision on costs spanning many magnitudes
    # (exp-transformed values); the optimal plan is invariant to scaling.
    scale = float(C.max()) or 1.0
    with warnings.catch_warnings():
        # a non-optimal exit is handled below
        warnings.filterwarnings("ignore", message="numItermax reached")
        plan, log = ot.emd(s, d, C / scale, numItermax=POT_MAX_ITER, log=True)
    if log.get("result_code", 1) != 1:
        return _solve_highs(C, s, d)
    return plan, scale * np.asarray(log["u"]), scale * np.asarray(log["v"]), 0


def _solve_highs(C, s, d):
    m, n = C.shape
    A = sparse.vstack([sparse.kron(sparse.eye(m), np.ones((1, n))), sparse.kron(np.ones((1, m)), sparse.eye(n))])
    res = linprog(C.ravel(), A_eq=A, b_eq=np.concatenate([s, d]), bounds=(0, None), method="highs")
    if res.status != 0:
        raise InfeasibleMarginals(f"transport LP failed: {res.message}")
    duals = res.eqlin.marginals
    return res.x.reshape(m, n), duals[:m], duals[m:], 0


def solve_transport(cost, supply, demand, *, method: str = "auto") -> tuple[TransportPlan, float]:
    """Minimize sum(plan * cost) subject to the row and column marginals.

    ``method`` is ``simplex`` (built-in), ``pot`` (POT's network simplex)
    or ``auto`` (built-in unless the problem exceeds ``LARGE_PROBLEM_CELLS``).
    Zero-weight atoms are removed before solving and restored as zero rows
    or columns.
    """
    cost, supply, demand = _check_problem(cost, supply, demand)
    rows = np.flatnonzero(supply > 0)
    cols = np.flatnonzero(demand > 0)
    if len(rows) == 0 or len(cols) == 0:
        raise DegenerateInput("all marginal weights are zero")
    C = cost[np.ix_(rows, cols)]
    s = supply[rows]
    d = demand[cols] * (s.sum() / demand[cols].sum())
    if method == "auto":
        method = "pot" if C.size > LARGE_PROBLEM_CELLS else "simplex"
    if C.shape[0] == 1 or C.shape[1] == 1:
        # The marginals force the plan.
        sub = s[:, None] * d[None, :] / s.sum()
        u = np.zeros(len(s)) if C.shape[0] == 1 else C[:, 0].copy()
        v = C[0].copy() if C.shape[0] == 1 else np.zeros(len(d))
        iters = 0
    elif method == "simplex":
        sub, u, v, iters = _simplex(C, s, d)
    elif method == "pot":
        sub, u, v, iters = _solve_pot(C, s, d)
    else:
        raise ValueError(f"unknown method {method!r}")
    sub[sub < 0] = 0.0
    plan = np.zeros(cost.shape)
    plan[np.ix_(rows, cols)] = sub
    row_duals = np.zeros(len(supply))
    col_duals = np.zeros(len(demand))
    row_duals[rows] = u
    col_duals[cols] = v
    objective = float((plan * cost).sum())
    result = TransportPlan(
        plan=plan,
        objective=objective,
        row_duals=row_duals,
        col_duals=col_duals,
        iterations=iters,
        row_residual=float(np.abs(plan.sum(axis=1) - supply).max()),
        col_residual=float(np.abs(plan.sum(axis=0) - demand).max()),
    )
    return result, objective


def brute_force_transport(cost, supply, demand, *, max_cells: int = 20) -> float:
    """Optimum by enumerating every spanning-tree basis of the transportation polytope.

    Each set of m+n-1 cells forming a spanning tree of the bipartite graph
    determines a unique basic solution; the best nonnegative one is optimal.
    """
    cost, supply, demand = _check_problem(cost, supply, demand)
    m, n = cost.shape
    if m * n > max_cells:
        raise SizeLimitExceeded(f"{m}x{n} exceeds the {max_cells}-cell enumeration limit")
    demand = demand * (supply.sum() / demand.sum())
    cells = [(i, j) for i in range(m) for j in range(n)]
    best = np.inf
    for subset in itertools.combinations(cells, m + n - 1):
        x = _basic_solution(subset, supply, demand, m, n)
        if x is None or min(x.values()) < -1e-12:
            continue
        value = sum(cost[c] * f for c, f in x.items())
        best = min(best, value)
    return float(best)


def _basic_solution(subset, supply, demand, m, n):
    """Solve the marginal equations on a spanning tree by leaf peeling."""
    degree = [0] * (m + n)
    incident = [[] for _ in range(m + n)]
    for k, (i, j) in enumerate(subset):
        degree[i] += 1
        degree[m + j] += 1
        incident[i].append(k)
        incident[m + j].append(k)
    if 0 in degree:
        return None
    residual = list(supply) + list(demand)
    used = [False] * len(subset)
    x = {}
    stack = [a for a in range(m + n) if degree[a] == 1]
    while stack:
        a = stack.pop()
        if degree[a] != 1:
            continue
        k = next(k for k in incident[a] if not used[k])
        used[k] = True
        i, j = subset[k]
        f = residual[a]
        x[(i, j)] = f
        other = m + j if a == i else i
        residual[other] -= f
        residual[a] = 0.0
        degree[a] -= 1
        degree[other] -= 1
        if degree[other] == 1:
            stack.append(other)
    if not all(used):
        return None  # the subset contains a cycle
    return x


def kw_distance(P: DiscreteDistribution, Q: DiscreteDistribution, r: float = 1.0, *, metric: str = "euclidean") -> float:
    """Kantorovich-Wasserstein distance of order ``r``."""
    if r < 1:
        raise ValueError("order r must be at least 1")
    cost = pairwise_distance(P.atoms, Q.atoms, metric) ** r
    _, objective = solve_transport(cost, P.weights, Q.weights)
    return max(objective, 0.0) ** (1.0 / r)


def wasserstein_1d(x, wx, y, wy, r: float = 1.0) -> float:
    """Closed-form 1-D distance via the quantile coupling (independent of the LP)."""
    x = np.asarray(x, dtype=float).ravel()
    y = np.asarray(y, dtype=float).ravel()
    ix, iy = np.argsort(x), np.argsort(y)
    x, wx = x[ix], np.asarray(wx, dtype=float)[ix]
    y, wy = y[iy], np.asarray(wy, dtype=float)[iy]
    cx = np.cumsum(wx)
    cy = np.cumsum(wy)
    levels = np.unique(np.concatenate([[0.0], cx, cy]))
    levels = levels[levels <= min(cx[-1], cy[-1])]
    mids = 0.5 * (levels[1:] + levels[:-1])
    qx = x[np.minimum(np.searchsorted(cx, mids), len(x) - 1)]
    qy = y[np.minimum(np.searchsorted(cy, mids), len(y) - 1)]
    return float((np.diff(levels) * np.abs(qx - qy) ** r).sum() ** (1.0 / r))


def empirical_kw(samples, atoms, weights, r: float = 1.0, *, metric: str = "euclidean") -> float:
    """Distance between an equal-weight sample cloud and a weighted atom set."""
    samples = np.asarray(samples, dtype=float)
    cost = pairwise_distance(samples, atoms, metric) ** r
    supply = np.full(len(samples), 1.0 / len(samples))
    _, objective = solve_transport(cost, supply, np.asarray(weights, dtype=float), method="pot")
    return max(objective, 0.0) ** (1.0 / r)
