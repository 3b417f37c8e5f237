"""Generalizability-aware prediction of heterogeneous treatment effects.

Types of a population are split into archetypes, which share one pooled
prediction, and a basin of ignorance where the method abstains.
"""
from .core import EstimateTable, Leaf, Node, Partition, RawStudy, TreeModel, load_estimate_table, load_tree, save_estimate_table, save_tree
from .errors import EnumerationTooLarge, FormatError, GAwareError, ValidationError
from .reward import RewardBreakdown, RewardParams, empirical_reward, group_delta, group_means, population_reward, sigma_frontier
from .tree import FitResult, SearchConfig, brute_force_fit, fit_gaware_tree, helper_tree

__version__ = "0.1.0"
