"""Seeded experiment harness.

Every experiment is a list of independent cells.  A cell derives its own
RNG stream from ``(seed, cell index)``, so cells can run in any order or in
parallel and each row can be regenerated from the seed it carries.
"""

from __future__ import annotations

import csv
import json
import os
import platform
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional

import numpy as np
import scipy
from scipy.stats import binomtest

from .inventory import InventorySpec, closed_form_value, closed_form_value_gaussian, solve_on_tree
from .models import (
    GaussianProcessModel,
    LognormalProcessModel,
    sample_bound_instance,
    sample_inventory_params,
    stationary_time_cov,
)
from .nested import BoundConfig, nested_distance, upper_bound_lipschitz
from .quantize import QuantizeConfig, forward_backward, monte_carlo_tree, stagewise_optimal_tree
from .tree import TreeTopology

EXPERIMENTS = ("bound-gap", "success-prob", "branchiness", "inventory")


@dataclass
class ExperimentConfig:
    experiment: str
    seed: int
    replications: int = 30
    lam: Optional[list] = None  # None: sample from {10, 20, 30}
    D: Optional[list] = None  # [lo, hi] inclusive; None: [1, 10]
    T: Optional[list] = None
    b: Optional[list] = None
    lognormal: bool = False
    diagonal: bool = False  # zero the off-diagonal time covariances
    iterations: int = 2000
    bound_samples: int = 4096
    patterns: list = field(default_factory=lambda: ["constant"])
    methods: list = field(default_factory=lambda: ["mc", "stagewise", "fb"])
    b_sequence: list = field(default_factory=lambda: [2, 3, 4, 5, 6])
    approx_b: int = 3
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.experiment not in EXPERIMENTS:
            raise ValueError(f"unknown experiment {self.experiment!r}; choose from {EXPERIMENTS}")
        if self.seed is None:
            raise ValueError("a seed is mandatory")

    @classmethod
    def from_json(cls, path, **overrides) -> "ExperimentConfig":
        data = {}
        if path is not None:
            with open(path) as fh:
                data = json.load(fh)
        data.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**data)


@dataclass
class ExperimentReport:
    experiment: str
    columns: list
    rows: list
    summary: dict
    meta: dict = field(default_factory=dict)

    def write(self, out_dir):
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, "report.csv"), "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(self.columns)
            for row in self.rows:
                w.writerow([_fmt(row.get(c)) for c in self.columns])
        with open(os.path.join(out_dir, "report.json"), "w") as fh:
            json.dump({"experiment": self.experiment, "rows": self.rows, "summary": self.summary}, fh, indent=1, default=_json)
        with open(os.path.join(out_dir, "meta.json"), "w") as fh:
            json.dump(self.meta, fh, indent=1, default=_json)


def _fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return str(bool(v))
    if isinstance(v, (float, np.floating)):
        return f"{float(v):.17e}"
    return "" if v is None else str(v)


def _json(v):
    if isinstance(v, np.ndarray):
        return v.tolist()
    if isinstance(v, np.generic):
        return v.item()
    raise TypeError(type(v))


def resolve_jobs(jobs: Optional[int]) -> int:
    env = os.environ.get("SCENTREE_JOBS")
    if env:
        return max(1, int(env))
    return max(1, int(jobs or 1))


def _map(fn: Callable, args: list, jobs: int) -> list:
    if jobs <= 1 or len(args) <= 1:
        return [fn(a) for a in args]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, args))


def _pick(rng, rng_range, default):
    lo, hi = rng_range if rng_range is not None else default
    return int(rng.integers(lo, hi + 1))


# --- bound gap / success probability ---------------------------------------


def _bound_cell(args):
    config, index = args
    start = time.perf_counter()
    rng = np.random.default_rng([config.seed, index])
    lam = float(rng.choice(config.lam if config.lam else [10, 20, 30]))
    D = _pick(rng, config.D, (1, 10))
    T = _pick(rng, config.T, (2, 4))
    b = _pick(rng, config.b, (2, 5))
    inst = sample_bound_instance(rng, lam=lam, D=D, T=T, b=b)
    gauss = inst.model
    if config.diagonal:
        time_cov = gauss.cov[:: D, :: D]
        gauss = GaussianProcessModel(gauss.mean, np.kron(np.diag(np.diag(time_cov)), np.eye(D)), D)
    topology = TreeTopology.balanced([b] * T)
    qcfg = QuantizeConfig(iterations=config.iterations, seed=int(rng.integers(2**31)))
    bcfg = BoundConfig(samples=config.bound_samples, seed=int(rng.integers(2**31)))
    sw = stagewise_optimal_tree(gauss, topology, qcfg)
    fb, _ = forward_backward(gauss, sw, qcfg)
    model = gauss
    if config.lognormal:
        # Exp-transformed Gaussian quantizers, probabilities inherited.
        model = LognormalProcessModel(gauss.mean, gauss.cov, D)
        sw = sw.map_values(np.exp)
        fb = fb.map_values(np.exp)
    kw_bound = upper_bound_lipschitz(model, sw, bcfg)
    fb_bound = upper_bound_lipschitz(model, fb, bcfg)
    return {
        "cell": index,
        "seed": config.seed,
        "D": D,
        "lam": lam,
        "T": T,
        "b": b,
        "lognormal": config.lognormal,
        "clipped": inst.clipped,
        "kw_bound": kw_bound,
        "fb_bound": fb_bound,
        "gap": kw_bound - fb_bound,
        "success": bool(fb_bound < kw_bound),
        "runtime": time.perf_counter() - start,
    }


BOUND_COLUMNS = ["cell", "seed", "D", "lam", "T", "b", "lognormal", "clipped", "kw_bound", "fb_bound", "gap", "success", "runtime"]


def _frequency(successes: int, n: int) -> dict:
    if n == 0:
        return {"n": 0}
    ci = binomtest(successes, n).proportion_ci(confidence_level=0.95)
    return {"n": n, "successes": successes, "frequency": successes / n, "ci_low": ci.low, "ci_high": ci.high}


def _slope(rows, key):
    x = np.array([r[key] for r in rows], dtype=float)
    y = np.array([r["gap"] for r in rows], dtype=float)
    if len(set(x)) < 2:
        return None
    return float(np.polyfit(x, y, 1)[0])


def run_bound_gap_sweep(config: ExperimentConfig, jobs: int = 1) -> ExperimentReport:
    start = time.perf_counter()
    rows = _map(_bound_cell, [(config, i) for i in range(config.replications)], resolve_jobs(jobs))
    succ = sum(r["success"] for r in rows)
    gaps = np.array([r["gap"] for r in rows])
    summary = {
        "success": _frequency(succ, len(rows)),
        "gap_mean": float(gaps.mean()) if len(gaps) else None,
        "gap_se": float(gaps.std(ddof=1) / np.sqrt(len(gaps))) if len(gaps) > 1 else None,
        "slope_lam": _slope(rows, "lam"),
        "slope_T": _slope(rows, "T"),
        "slope_D": _slope(rows, "D"),
    }
    return ExperimentReport(config.experiment, BOUND_COLUMNS, rows, summary, _meta(config, start))


def run_success_probability(config: ExperimentConfig, jobs: int = 1) -> ExperimentReport:
    report = run_bound_gap_sweep(config, jobs)
    per_lam = {}
    for lam in sorted({r["lam"] for r in report.rows}):
        sub = [r for r in report.rows if r["lam"] == lam]
        per_lam[str(lam)] = _frequency(sum(r["success"] for r in sub), len(sub))
    report.summary["per_lambda"] = per_lam
    return report


# --- branchiness convergence --------------------------------------------------


def reference_model() -> GaussianProcessModel:
    """Three-stage scalar Gaussian used for convergence studies."""
    return GaussianProcessModel([1.0, 2.0, 3.0], [[1.0, 0.3, 0.0], [0.3, 0.7, 0.3], [0.0, 0.3, 0.5]])


def _branchiness_cell(args):
    config, index = args
    start = time.perf_counter()
    rng = np.random.default_rng([config.seed, index])
    model = reference_model()
    T = model.T
    qcfg = QuantizeConfig(iterations=config.iterations, seed=int(rng.integers(2**31)))
    approx_top = TreeTopology.balanced([config.approx_b] * T)
    optimal = stagewise_optimal_tree(model, approx_top, qcfg)
    random_tree = monte_carlo_tree(model, approx_top, rng)
    rows = []
    for b in config.b_sequence:
        ref = stagewise_optimal_tree(model, TreeTopology.balanced([b] * T), qcfg)
        rows.append(
            {
                "cell": index,
                "seed": config.seed,
                "b": b,
                "approx_b": config.approx_b,
                "dl_optimal": nested_distance(ref, optimal).value,
                "dl_monte_carlo": nested_distance(ref, random_tree).value,
                "runtime": time.perf_counter() - start,
            }
        )
    return rows


BRANCH_COLUMNS = ["cell", "seed", "b", "approx_b", "dl_optimal", "dl_monte_carlo", "runtime"]


def run_branchiness_convergence(config: ExperimentConfig, jobs: int = 1) -> ExperimentReport:
    start = time.perf_counter()
    nested_rows = _map(_branchiness_cell, [(config, i) for i in range(config.replications)], resolve_jobs(jobs))
    rows = [r for cell in nested_rows for r in cell]
    bmax = max(config.b_sequence)
    final = [r for r in rows if r["b"] == bmax]
    wins = sum(r["dl_optimal"] <= r["dl_monte_carlo"] for r in final)
    series = {
        str(b): float(np.mean([r["dl_optimal"] for r in rows if r["b"] == b])) for b in config.b_sequence
    }
    summary = {"optimal_below_mc": _frequency(wins, len(final)), "mean_dl_optimal_by_b": series}
    return ExperimentReport(config.experiment, BRANCH_COLUMNS, rows, summary, _meta(config, start))


# --- inventory ----------------------------------------------------------------


def demand_pattern(name: str, T: int, level: float = 100.0) -> np.ndarray:
    steps = np.arange(T, dtype=float)
    if name == "constant":
        return np.full(T, level)
    if name == "increasing":
        return level * (1.0 + 0.5 * steps / max(T - 1, 1))
    if name == "decreasing":
        return level * (1.5 - 0.5 * steps / max(T - 1, 1))
    if name == "bell":
        centre = 0.5 * (T - 1)
        return level * (1.0 + 0.5 * np.exp(-0.5 * ((steps - centre) / max(T / 4, 0.5)) ** 2))
    raise ValueError(f"unknown demand pattern {name!r}")


def inventory_spec_from_params(params: dict, pattern: str = "constant") -> InventorySpec:
    mean = demand_pattern(pattern, params["T"], float(params["mean"][0]))
    cov = params["cov"].copy()
    np.fill_diagonal(cov, mean)  # variance tracks the mean
    model = GaussianProcessModel(mean, cov)
    return InventorySpec(model, params["h"], params["l"])


def build_tree(method: str, model, topology, qcfg: QuantizeConfig, rng):
    if method == "mc":
        return monte_carlo_tree(model, topology, rng)
    sw = stagewise_optimal_tree(model, topology, qcfg)
    if method == "stagewise":
        return sw
    return forward_backward(model, sw, qcfg)[0]


def _inventory_cell(args):
    config, index = args
    start = time.perf_counter()
    rng = np.random.default_rng([config.seed, index])
    T = _pick(rng, config.T, (2, 3))
    b = _pick(rng, config.b, (1, 30))
    params = sample_inventory_params(rng, T=T, b=b)
    qseed = int(rng.integers(2**31))
    rows = []
    for pattern in config.patterns:
        spec = inventory_spec_from_params(params, pattern)
        closed = closed_form_value_gaussian(spec)
        topology = TreeTopology.balanced([b] * T)
        qcfg = QuantizeConfig(iterations=config.iterations, seed=qseed)
        row = {"cell": index, "seed": config.seed, "pattern": pattern, "T": T, "b": b, "closed_form": closed}
        for method in config.methods:
            tree = build_tree(method, spec.model, topology, qcfg, np.random.default_rng([config.seed, index, 1]))
            value = solve_on_tree(spec, tree).value
            row[f"value_{method}"] = value
            row[f"relerr_{method}"] = abs(value - closed) / abs(closed)
        row["runtime"] = time.perf_counter() - start
        rows.append(row)
    return rows


def run_inventory_benchmark(config: ExperimentConfig, jobs: int = 1) -> ExperimentReport:
    start = time.perf_counter()
    cells = _map(_inventory_cell, [(config, i) for i in range(config.replications)], resolve_jobs(jobs))
    rows = [r for cell in cells for r in cell]
    columns = ["cell", "seed", "pattern", "T", "b", "closed_form"]
    for m in config.methods:
        columns += [f"value_{m}", f"relerr_{m}"]
    columns.append("runtime")
    summary = {}
    for m in config.methods:
        err = np.array([r[f"relerr_{m}"] for r in rows])
        summary[f"relerr_{m}"] = {"mean": float(err.mean()), "max": float(err.max()), "spread": float(np.ptp(err))}
    if {"fb", "stagewise"} <= set(config.methods):
        closer = sum(r["relerr_fb"] <= r["relerr_stagewise"] for r in rows)
        freq = _frequency(closer, len(rows))
        freq["p_value"] = float(binomtest(closer, len(rows), 0.5, alternative="greater").pvalue)
        summary["fb_closer"] = freq
    return ExperimentReport(config.experiment, columns, rows, summary, _meta(config, start))


def capacity_sweep(spec: InventorySpec, tree, capacities) -> np.ndarray:
    """Tree-LP values for increasing shared capacities."""
    values = []
    for cap in capacities:
        capped = InventorySpec(spec.model, spec.h, spec.l, spec.s, float(cap))
        values.append(solve_on_tree(capped, tree).value)
    return np.array(values)


def retention_sweep(mean, time_cov, retentions, tree=None) -> dict:
    """Values when the rapid-order price tracks retention, h_t = 1 + l_t."""
    model = GaussianProcessModel(mean, time_cov)
    closed, lp = [], []
    for l in retentions:
        spec = InventorySpec(model, 1.0 + l, l)
        closed.append(closed_form_value(spec))
        if tree is not None:
            lp.append(solve_on_tree(spec, tree).value)
    x = np.asarray(retentions) / (1.0 + np.asarray(retentions))
    return {"x": x, "closed_form": np.array(closed), "tree_lp": np.array(lp) if lp else None}


def interdependent_model(T: int, D: int = 3, level: float = 100.0, corr: float = 0.5, time_corr: float = 0.1):
    """Products with correlated demands sharing one time covariance."""
    prod = np.full((D, D), corr)
    np.fill_diagonal(prod, 1.0)
    time_cov = stationary_time_cov(T, level, time_corr * level)
    return GaussianProcessModel(np.full(T * D, level), np.kron(time_cov, prod), D)


# --- dispatch -----------------------------------------------------------------


RUNNERS = {
    "bound-gap": run_bound_gap_sweep,
    "success-prob": run_success_probability,
    "branchiness": run_branchiness_convergence,
    "inventory": run_inventory_benchmark,
}


def _meta(config: ExperimentConfig, start: float) -> dict:
    from importlib.metadata import PackageNotFoundError, version

    try:
        pkg_version = version("artifact")
    except PackageNotFoundError:
        pkg_version = None
    return {
        "config": asdict(config),
        "seed": config.seed,
        "runtime_seconds": time.perf_counter() - start,
        "versions": {
            "artifact": pkg_version,
            "python": platform.python_version(),
            "numpy": np.__version__,
            "scipy": scipy.__version__,
        },
    }


def run_experiment(config: ExperimentConfig, jobs: int = 1) -> ExperimentReport:
    return RUNNERS[config.experiment](config, jobs)
