"""Command-line interface.

    scentree tree validate FILE
    scentree tree clairvoyant --stage T FILE [-o OUT]
    scentree dist kw --r 1 P.json Q.json
    scentree dist nested A.json B.json --r 1
    scentree bound --which eq6,eq10,chain A.json B.json
    scentree bound --which eq7 --model m.json TREE.json
    scentree quantize --method fb --model m.json --topology "b=5,T=3" --seed 7 -o tree.json
    scentree inventory solve --spec spec.json --tree tree.json
    scentree inventory closed-form --spec spec.json
    scentree experiment bound-gap --config cfg.json --out dir/

Results go to stdout as JSON.  Library errors exit with status 2.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys

import numpy as np

from .errors import ScenTreeError
from .experiments import EXPERIMENTS, ExperimentConfig, resolve_jobs, run_experiment
from .inventory import InventorySpec, closed_form_value, solve_on_tree
from .models import load_model
from .nested import BoundConfig, model_bound_report, nested_distance, tree_bound_report
from .quantize import QuantizeConfig, quantize
from .transport import DiscreteDistribution, kw_distance
from .tree import ScenarioTree, TreeTopology, make_clairvoyant

TREE_BOUNDS = ("chain", "eq6", "eq10", "eq11")
MODEL_BOUNDS = ("eq7", "eq12", "eq14")
VARIANTS = {"two-stage": "efficient_two_stage", "full": "full"}


def _emit(obj, out=None):
    text = json.dumps(obj, indent=1)
    if out:
        with open(out, "w") as fh:
            fh.write(text + "\n")
    else:
        print(text)


def parse_topology(text: str) -> TreeTopology:
    """``"b=5,T=3"`` or an explicit branching list ``"5,3,2"``."""
    parts = dict(p.split("=", 1) for p in text.replace(" ", "").split(",") if "=" in p)
    if parts:
        if set(parts) != {"b", "T"}:
            raise ValueError(f"topology needs exactly b and T, got {text!r}")
        return TreeTopology.balanced([int(parts["b"])] * int(parts["T"]))
    return TreeTopology.balanced([int(p) for p in text.split(",") if p])


def load_distribution(path) -> DiscreteDistribution:
    """A ``{"atoms", "weights"}`` file, or a tree file (its leaf paths)."""
    with open(path) as fh:
        data = json.load(fh)
    if "nodes" in data:
        tree = ScenarioTree.from_dict(data)
        return DiscreteDistribution(tree.scenario_matrix().reshape(tree.n_leaves, -1), tree.leaf_probabilities())
    atoms = np.asarray(data["atoms"], dtype=float)
    if atoms.ndim == 1:
        atoms = atoms[:, None]
    weights = data.get("weights")
    if weights is None:
        return DiscreteDistribution.uniform(atoms)
    return DiscreteDistribution(atoms, np.asarray(weights, dtype=float))


# --- tree -------------------------------------------------------------------


def cmd_tree_validate(args):
    tree = ScenarioTree.from_json(args.file)
    _emit(
        {
            "valid": True,
            "T": tree.T,
            "D": tree.D,
            "n_nodes": tree.topology.n_nodes,
            "n_leaves": tree.n_leaves,
            "nodes_per_stage": tree.topology.nodes_per_stage.tolist(),
        }
    )


def cmd_tree_clairvoyant(args):
    tree = make_clairvoyant(ScenarioTree.from_json(args.file), args.stage)
    _emit(tree.to_dict(), args.output)


# --- distances and bounds ---------------------------------------------------


def cmd_dist_kw(args):
    P, Q = load_distribution(args.P), load_distribution(args.Q)
    _emit({"r": args.r, "kw": kw_distance(P, Q, r=args.r)})


def cmd_dist_nested(args):
    A, B = ScenarioTree.from_json(args.A), ScenarioTree.from_json(args.B)
    res = nested_distance(A, B, r=args.r)
    _emit({"r": args.r, "nested_distance": res.value})


def cmd_bound(args):
    which = [w.strip() for w in args.which.split(",") if w.strip()]
    unknown = set(which) - set(TREE_BOUNDS) - set(MODEL_BOUNDS)
    if unknown:
        raise ValueError(f"unknown bound(s) {sorted(unknown)}")
    if args.model:
        if len(args.trees) != 1:
            raise ValueError("with --model pass exactly one tree")
        if set(which) - set(MODEL_BOUNDS):
            raise ValueError(f"with --model choose from {MODEL_BOUNDS}")
        config = BoundConfig(samples=args.samples, sup_samples=args.sup_samples, seed=args.seed)
        report = model_bound_report(load_model(args.model), ScenarioTree.from_json(args.trees[0]), config, which)
    else:
        if len(args.trees) != 2:
            raise ValueError("pass two trees, or one tree with --model")
        if set(which) - set(TREE_BOUNDS):
            raise ValueError(f"model bounds {MODEL_BOUNDS} need --model")
        A, B = (ScenarioTree.from_json(p) for p in args.trees)
        report = tree_bound_report(A, B, which)
    _emit(report.to_dict(), args.output)


# --- quantization -----------------------------------------------------------


def cmd_quantize(args):
    model = load_model(args.model)
    topology = parse_topology(args.topology)
    config = QuantizeConfig(
        iterations=args.iterations,
        variant=VARIANTS[args.variant],
        seed=args.seed,
        r=args.r,
        step_offset=args.step_offset,
    )
    tree, trace = quantize(model, topology, args.method, config, np.random.default_rng(args.seed))
    _emit(tree.to_dict(), args.output)
    if args.trace:
        if trace is None:
            print(f"no trace for method {args.method!r}", file=sys.stderr)
        else:
            trace.to_csv(args.trace)


# --- inventory --------------------------------------------------------------


def cmd_inventory_solve(args):
    spec = InventorySpec.from_json(args.spec)
    tree = ScenarioTree.from_json(args.tree)
    sol = solve_on_tree(spec, tree)
    if args.csv:
        rows = list(sol.node_rows(tree))
        with open(args.csv, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["node", "stage", "prob", "demand", "order", "inventory", "shortage"])
            for row in rows:
                w.writerow([row["node"], row["stage"], repr(row["prob"])] + [
                    " ".join(repr(x) for x in row[k]) for k in ("demand", "order", "inventory", "shortage")
                ])
    root_order = sol.orders[0].tolist()
    _emit({"value": sol.value, "root_order": root_order, "duality_gap": sol.duality_gap})


def cmd_inventory_closed_form(args):
    spec = InventorySpec.from_json(args.spec)
    _emit({"value": closed_form_value(spec), "beta": spec.beta.tolist()})


# --- experiments ------------------------------------------------------------


def cmd_experiment(args):
    config = ExperimentConfig.from_json(args.config, experiment=args.id, seed=args.seed)
    report = run_experiment(config, resolve_jobs(args.jobs))
    report.write(args.out)
    _emit({"experiment": report.experiment, "rows": len(report.rows), "summary": report.summary})


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="scentree", description="Scenario trees, nested distances and quantization.")
    sub = p.add_subparsers(dest="command", required=True)

    tree = sub.add_parser("tree", help="tree file utilities").add_subparsers(dest="action", required=True)
    v = tree.add_parser("validate", help="check structure and probabilities")
    v.add_argument("file")
    v.set_defaults(func=cmd_tree_validate)
    c = tree.add_parser("clairvoyant", help="split into one chain per leaf below a stage")
    c.add_argument("file")
    c.add_argument("--stage", type=int, required=True)
    c.add_argument("-o", "--output")
    c.set_defaults(func=cmd_tree_clairvoyant)

    dist = sub.add_parser("dist", help="distances").add_subparsers(dest="action", required=True)
    kw = dist.add_parser("kw", help="transport distance between two discrete distributions")
    kw.add_argument("P")
    kw.add_argument("Q")
    kw.add_argument("--r", type=float, default=1.0)
    kw.set_defaults(func=cmd_dist_kw)
    nd = dist.add_parser("nested", help="nested distance between two trees")
    nd.add_argument("A")
    nd.add_argument("B")
    nd.add_argument("--r", type=float, default=1.0)
    nd.set_defaults(func=cmd_dist_nested)

    b = sub.add_parser("bound", help="lower/upper bounds on the nested distance")
    b.add_argument("trees", nargs="+")
    b.add_argument("--which", default="chain,eq6,eq10", help="comma list of " + ",".join(TREE_BOUNDS + MODEL_BOUNDS))
    b.add_argument("--model", help="process model JSON; bounds the model against one tree")
    b.add_argument("--samples", type=int, default=4096)
    b.add_argument("--sup-samples", type=int, default=256)
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("-o", "--output")
    b.set_defaults(func=cmd_bound)

    q = sub.add_parser("quantize", help="build a scenario tree from a process model")
    q.add_argument("--method", choices=("mc", "stagewise", "fb"), default="stagewise")
    q.add_argument("--variant", choices=tuple(VARIANTS), default="two-stage")
    q.add_argument("--model", required=True)
    q.add_argument("--topology", required=True, help='"b=5,T=3" or a branching list "5,3,2"')
    q.add_argument("--seed", type=int, required=True)
    q.add_argument("--iterations", type=int, default=2000)
    q.add_argument("--r", type=int, choices=(1, 2), default=2)
    q.add_argument("--step-offset", type=float, default=0.0)
    q.add_argument("-o", "--output")
    q.add_argument("--trace", help="write the forward-backward trace as CSV")
    q.set_defaults(func=cmd_quantize)

    inv = sub.add_parser("inventory", help="inventory-control benchmark").add_subparsers(dest="action", required=True)
    s = inv.add_parser("solve", help="solve the tree LP")
    s.add_argument("--spec", required=True)
    s.add_argument("--tree", required=True)
    s.add_argument("--csv", help="per-node decisions as CSV")
    s.set_defaults(func=cmd_inventory_solve)
    cf = inv.add_parser("closed-form", help="closed-form optimal value")
    cf.add_argument("--spec", required=True)
    cf.set_defaults(func=cmd_inventory_closed_form)

    e = sub.add_parser("experiment", help="run a seeded experiment")
    e.add_argument("id", choices=EXPERIMENTS)
    e.add_argument("--config")
    e.add_argument("--out", required=True)
    e.add_argument("--seed", type=int)
    e.add_argument("--jobs", type=int)
    e.set_defaults(func=cmd_experiment)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        args.func(args)
    except (ScenTreeError, ValueError, KeyError, FileNotFoundError) as exc:
        print(f"scentree: error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
