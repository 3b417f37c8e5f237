"""Synthetic multi-site study shipped with the package.

Six sites each run the same program. Types are (baseline consumption
quintile, baseline asset quintile, site) cells with about twenty households
each. Effects are constant on a few broad cells, except in one site where
households in the top consumption quintiles respond erratically.
"""
from __future__ import annotations

from importlib import resources

import numpy as np

from .core import EstimateTable, RawStudy, load_estimate_table, load_raw_study

SITES = ("ethiopia", "ghana", "honduras", "india", "pakistan", "peru")
STUDY_FILE = "sample_study.csv"
TABLE_FILE = "sample_estimates.csv"
GOLDEN_TREE_FILE = "sample_tree.json"
# settings used for the golden tree
GOLDEN_SETTINGS = {"sigma2": 1.5, "depth": 3, "G": 4, "min_leaf": 20, "splits": 5}


def sample_effect(cons_q: np.ndarray, asset_q: np.ndarray, site: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Per-type effects in outcome standard deviations."""
    eff = np.where(cons_q <= 2, 0.35, 0.1)
    eff = np.where((asset_q >= 4) & (cons_q > 2), 0.25, eff)
    peru = SITES.index("peru")
    wild = (site == peru) & (cons_q >= 4)
    return np.where(wild, 0.2 + 0.8 * rng.standard_cauchy(size=eff.shape), eff)


def generate_sample_study(seed: int = 2015, units_per_type: int = 20) -> RawStudy:
    rng = np.random.default_rng(seed)
    grid = np.array([(c, a, s) for s in range(len(SITES)) for c in range(1, 6) for a in range(1, 6)], dtype=float)
    eff = sample_effect(grid[:, 0], grid[:, 1], grid[:, 2].astype(int), rng)
    sizes = rng.integers(units_per_type // 2, 3 * units_per_type // 2 + 1, size=len(grid))
    unit_type = np.repeat(np.arange(len(grid)), sizes)
    n = unit_type.size
    D = (rng.uniform(size=n) < 0.5).astype(float)
    base = 0.2 * (grid[unit_type, 0] - 3)
    Y = base + D * eff[unit_type] + rng.standard_normal(n)
    env = tuple(SITES[int(s)] for s in grid[unit_type, 2])
    return RawStudy(Y[:, None], D, np.full(n, 0.5), grid[unit_type], env,
                    ("consumption",), ("consumption_quintile", "asset_quintile", "site"))


def _data_path(name: str):
    return resources.files("gaware") / "data" / name


def sample_study_path() -> str:
    return str(_data_path(STUDY_FILE))


def sample_table_path() -> str:
    return str(_data_path(TABLE_FILE))


def golden_tree_path() -> str:
    return str(_data_path(GOLDEN_TREE_FILE))


def load_sample_study() -> RawStudy:
    return load_raw_study(sample_study_path())


def load_sample_table() -> EstimateTable:
    return load_estimate_table(sample_table_path())
