"""Scenario-tree generation, nested distances and inventory benchmarks."""

from .errors import ScenTreeError
from .inventory import InventorySpec, closed_form_value, simulate_policy, solve_on_tree
from .models import GaussianProcessModel, LognormalProcessModel, load_model, model_from_dict
from .nested import (
    BoundConfig,
    lower_bound_chain,
    nested_distance,
    upper_bound_joint_clairvoyant,
    upper_bound_lipschitz,
    upper_bound_stagewise,
    upper_bound_two_stage,
)
from .quantize import QuantizeConfig, forward_backward, monte_carlo_tree, quantize, stagewise_optimal_tree
from .transport import DiscreteDistribution, kw_distance, solve_transport
from .tree import ScenarioTree, TreeTopology, build_tree, make_clairvoyant, subtree, truncate

__version__ = "0.1.0"

__all__ = [
    "BoundConfig",
    "DiscreteDistribution",
    "GaussianProcessModel",
    "InventorySpec",
    "LognormalProcessModel",
    "QuantizeConfig",
    "ScenTreeError",
    "ScenarioTree",
    "TreeTopology",
    "build_tree",
    "closed_form_value",
    "forward_backward",
    "kw_distance",
    "load_model",
    "lower_bound_chain",
    "make_clairvoyant",
    "model_from_dict",
    "monte_carlo_tree",
    "nested_distance",
    "quantize",
    "simulate_policy",
    "solve_on_tree",
    "solve_transport",
    "stagewise_optimal_tree",
    "subtree",
    "truncate",
    "upper_bound_joint_clairvoyant",
    "upper_bound_lipschitz",
    "upper_bound_stagewise",
    "upper_bound_two_stage",
]
