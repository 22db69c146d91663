"""Multi-stage inventory control on scenario trees, with closed-form oracles.

A retailer orders ``x_{t-1}`` at unit price 1 one period ahead of demand
``xi_t``.  Leftover stock ``K_t`` is carried with retention ``l_t`` and
shortages ``M_t`` are covered by rapid orders at price ``h_t > 1``.  The
value maximized is ``E[-sum_t (x_{t-1} + h_t M_t) + l_T K_T]``.
Stage-indexed arrays (``h``, ``l``, ``s``) hold stages 1..T at positions
0..T-1.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy import sparse
from scipy.optimize import linprog
from scipy.special import ndtr, ndtri

from .errors import BetaOutOfRange, Infeasible, ShapeMismatch
from .models import GaussianProcessModel, LognormalProcessModel, model_from_dict, norm_pdf
from .tree import ScenarioTree


@dataclass
class InventorySpec:
    model: GaussianProcessModel
    h: np.ndarray
    l: np.ndarray
    s: Optional[np.ndarray] = None
    capacity: Optional[float] = None

    def __post_init__(self):
        T = self.model.T
        self.h = np.broadcast_to(np.asarray(self.h, dtype=float), (T,)).copy()
        self.l = np.broadcast_to(np.asarray(self.l, dtype=float), (T,)).copy()
        if self.s is not None:
            self.s = np.broadcast_to(np.asarray(self.s, dtype=float), (T,)).copy()
        if np.any(self.l <= 0) or np.any(self.l > 1):
            raise ValueError("retention factors l_t must lie in (0, 1]")
        if self.capacity is not None and self.capacity < 0:
            raise Infeasible(f"capacity must be nonnegative, got {self.capacity}")

    @property
    def T(self) -> int:
        return self.model.T

    @property
    def D(self) -> int:
        return self.model.D

    @property
    def beta(self) -> np.ndarray:
        """Critical ratios (h_t - 1) / (h_t - l_t)."""
        beta = (self.h - 1.0) / (self.h - self.l)
        if np.any(self.h <= 1) or np.any(beta <= 0) or np.any(beta >= 1):
            raise BetaOutOfRange(f"critical ratios must lie in (0, 1), got {beta}")
        return beta

    def to_dict(self) -> dict:
        return {
            "T": self.T,
            "D": self.D,
            "h": self.h.tolist(),
            "l": self.l.tolist(),
            "s": None if self.s is None else self.s.tolist(),
            "capacity": self.capacity,
            "model": self.model.to_dict(),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "InventorySpec":
        """Accepts a nested ``model`` entry or flat ``mean``/``cov`` (plus optional ``kind``, ``D``)."""
        model_data = data.get("model")
        if model_data is None:
            model_data = {k: data[k] for k in ("kind", "D", "mean", "cov") if k in data}
        return cls(model_from_dict(model_data), data["h"], data["l"], data.get("s"), data.get("capacity"))

    @classmethod
    def from_json(cls, path) -> "InventorySpec":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


@dataclass
class InventorySolution:
    value: float
    orders: np.ndarray  # (n_nodes, D); NaN at leaves
    inventory: np.ndarray  # (n_nodes, D); zero at the root
    shortage: np.ndarray  # (n_nodes, D); zero at the root
    duality_gap: float
    profit: Optional[float] = None
    meta: dict = field(default_factory=dict)

    def node_rows(self, tree: ScenarioTree):
        stage = tree.topology.stage
        for n in range(tree.topology.n_nodes):
            yield {
                "node": n,
                "stage": int(stage[n]),
                "prob": float(tree.node_probs[n]),
                "demand": tree.values[n].tolist(),
                "order": self.orders[n].tolist(),
                "inventory": self.inventory[n].tolist(),
                "shortage": self.shortage[n].tolist(),
            }


def solve_on_tree(spec: InventorySpec, tree: ScenarioTree) -> InventorySolution:
    """Exact LP optimum of the tree-discretized inventory problem (HiGHS)."""
    if tree.T != spec.T or tree.D != spec.D:
        raise ShapeMismatch(f"tree (T={tree.T}, D={tree.D}) does not match spec (T={spec.T}, D={spec.D})")
    topo = tree.topology
    n_nodes, D, T = topo.n_nodes, spec.D, spec.T
    stage = topo.stage
    prob = tree.node_probs
    inner = np.flatnonzero(topo.n_children > 0)
    nonroot = np.arange(1, n_nodes)
    # Variable layout: [x for inner nodes | K for non-root | M for non-root], each times D.
    nx, nk = len(inner), len(nonroot)
    x_idx = np.full(n_nodes, -1)
    x_idx[inner] = np.arange(nx)
    k_idx = np.full(n_nodes, -1)
    k_idx[nonroot] = np.arange(nk)

    def var(block, idx, d):
        offset = (0, nx * D, (nx + nk) * D)[block]
        return offset + idx * D + d

    n_var = (nx + 2 * nk) * D
    c = np.zeros(n_var)
    for d in range(D):
        c[var(0, np.arange(nx), d)] = prob[inner]
        c[var(2, np.arange(nk), d)] = spec.h[stage[nonroot] - 1] * prob[nonroot]
        leaves = topo.leaves
        c[var(1, k_idx[leaves], d)] -= spec.l[T - 1] * prob[leaves]
    # Balance: l_{t-1} K_parent + x_parent - K_n + M_n = xi_n
    rows, cols, vals = [], [], []
    b_eq = np.zeros(nk * D)
    parent = topo.parent
    for d in range(D):
        r = np.arange(nk) * D + d
        p = parent[nonroot]
        rows += [r, r, r]
        cols += [var(0, x_idx[p], d), var(1, k_idx[nonroot], d), var(2, k_idx[nonroot], d)]
        vals += [np.ones(nk), -np.ones(nk), np.ones(nk)]
        has_k = p > 0
        rows.append(r[has_k])
        cols.append(var(1, k_idx[p[has_k]], d))
        vals.append(spec.l[stage[p[has_k]] - 1])
        b_eq[r] = tree.values[nonroot, d]
    A_eq = sparse.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(nk * D, n_var))
    A_ub = b_ub = None
    if spec.capacity is not None:
        rows, cols, vals = [], [], []
        for d in range(D):
            rows.append(np.arange(nx))
            cols.append(var(0, np.arange(nx), d))
            vals.append(np.ones(nx))
            has_k = inner > 0
            rows.append(np.arange(nx)[has_k])
            cols.append(var(1, k_idx[inner[has_k]], d))
            vals.append(spec.l[stage[inner[has_k]] - 1])
        A_ub = sparse.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(nx, n_var))
        b_ub = np.full(nx, float(spec.capacity))
    res = linprog(c, A_ub=A_ub, b_ub=b_ub, A_eq=A_eq, b_eq=b_eq, bounds=(0, None), method="highs")
    if res.status != 0:
        raise Infeasible(f"LP solver failed: {res.message}")
    dual = float(b_eq @ res.eqlin.marginals)
    if b_ub is not None:
        dual += float(b_ub @ res.ineqlin.marginals)
    gap = abs(res.fun - dual)
    sol = res.x
    orders = np.full((n_nodes, D), np.nan)
    inventory = np.zeros((n_nodes, D))
    shortage = np.zeros((n_nodes, D))
    for d in range(D):
        orders[inner, d] = sol[var(0, np.arange(nx), d)]
        inventory[nonroot, d] = sol[var(1, np.arange(nk), d)]
        shortage[nonroot, d] = sol[var(2, np.arange(nk), d)]
    value = -float(res.fun)
    profit = None
    if spec.s is not None:
        profit = value + float(np.sum(prob[nonroot, None] * spec.s[stage[nonroot] - 1, None] * tree.values[nonroot]))
    return InventorySolution(value, orders, inventory, shortage, gap, profit)


# --- closed forms ----------------------------------------------------------


def _coordinates(spec: InventorySpec):
    """Per-product (mean (T,), time covariance (T, T)); requires independent products."""
    model = spec.model
    D, T = model.D, model.T
    out = []
    for d in range(D):
        idx = np.arange(T) * D + d
        out.append((model.mean[idx], model.cov[np.ix_(idx, idx)]))
    if D > 1:
        mask = np.ones_like(model.cov, dtype=bool)
        for d in range(D):
            idx = np.arange(T) * D + d
            mask[np.ix_(idx, idx)] = False
        if np.any(np.abs(model.cov[mask]) > 1e-12):
            raise ShapeMismatch("closed forms need independent products")
    return out


def _conditional_sd(cov: np.ndarray) -> np.ndarray:
    T = len(cov)
    m = GaussianProcessModel(np.zeros(T), cov)
    return np.sqrt(m.conditional_variances()[:, 0])


def closed_form_value_gaussian(spec: InventorySpec) -> float:
    """Optimal value for Gaussian demand (sum over independent products)."""
    beta = spec.beta
    z = ndtri(beta)
    total = 0.0
    for mu, cov in _coordinates(spec):
        sd = _conditional_sd(cov)
        total += float(np.sum(-spec.h * mu + (spec.h - 1.0) * (mu - sd / beta * norm_pdf(z))))
    return total


def closed_form_value_lognormal(spec: InventorySpec, *, as_printed: bool = False) -> float:
    """Optimal value for lognormal demand.

    Uses E[AV@R_beta(xi_t | past)] = exp(mu_t + c_tt/2) Phi(z_beta - sd_t) / beta_t.
    ``as_printed`` evaluates the variant with a leading ``1 -`` inside the
    bracket instead of ``mu``-free expectation.
    """
    beta = spec.beta
    z = ndtri(beta)
    total = 0.0
    for mu, cov in _coordinates(spec):
        sd = _conditional_sd(cov)
        mean = np.exp(mu + 0.5 * np.diag(cov))
        tail = mean * ndtr(z - sd) / beta
        bracket = 1.0 - tail if as_printed else tail
        total += float(np.sum(-spec.h * mean + (spec.h - 1.0) * bracket))
    return total


def closed_form_value(spec: InventorySpec) -> float:
    if isinstance(spec.model, LognormalProcessModel):
        return closed_form_value_lognormal(spec)
    return closed_form_value_gaussian(spec)


def _var_batch(spec: InventorySpec, t: int, histories) -> np.ndarray:
    """Conditional beta_t-quantile of stage-t demand for each history, shape (n, D)."""
    beta = spec.beta[t - 1]
    means, cov = spec.model.conditional_batch(t, histories)
    q = means + np.sqrt(np.maximum(np.diag(cov), 0.0)) * ndtri(beta)
    return np.exp(q) if spec.model.lognormal else q


def closed_form_policy(spec: InventorySpec, t: int, history, inventory) -> np.ndarray:
    """Order at stage t: next-stage conditional beta-quantile minus carried stock."""
    if not 0 <= t < spec.T:
        raise ValueError(f"orders exist for t = 0..{spec.T - 1}")
    history = np.asarray(history, dtype=float).reshape(1, t, spec.D)
    carried = spec.l[t - 1] * np.asarray(inventory, dtype=float) if t > 0 else 0.0
    return _var_batch(spec, t + 1, history)[0] - carried


@dataclass
class PolicySimulation:
    mean: float
    std_error: float
    values: np.ndarray
    clamp_fraction: float  # share of orders the formula made negative


def simulate_policy(spec: InventorySpec, paths, policy: Optional[Callable] = None) -> PolicySimulation:
    """Roll a policy forward along sampled demand paths (n, T, D).

    ``policy(t, histories (n, t, D), inventory (n, D)) -> orders (n, D)``;
    the default is the closed-form quantile policy.  Negative orders are
    clamped to zero and counted.
    """
    paths = np.asarray(paths, dtype=float)
    if paths.ndim == 2:
        paths = paths[:, :, None]
    n, T, D = paths.shape
    if T != spec.T or D != spec.D:
        raise ShapeMismatch("paths do not match the spec")
    K = np.zeros((n, D))
    value = np.zeros(n)
    clamped = 0
    for t in range(T):
        if policy is None:
            x = _var_batch(spec, t + 1, paths[:, :t])
            if t > 0:
                x = x - spec.l[t - 1] * K
        else:
            x = np.asarray(policy(t, paths[:, :t], K), dtype=float).reshape(n, D)
        clamped += int(np.sum(x < 0))
        x = np.maximum(x, 0.0)
        available = x + (spec.l[t - 1] * K if t > 0 else 0.0)
        xi = paths[:, t]
        M = np.maximum(xi - available, 0.0)
        K = np.maximum(available - xi, 0.0)
        value -= (x + spec.h[t] * M).sum(axis=1)
    value += spec.l[T - 1] * K.sum(axis=1)
    return PolicySimulation(float(value.mean()), float(value.std(ddof=1) / np.sqrt(n)), value, clamped / (n * T * D))
