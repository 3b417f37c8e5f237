"""Bagged G-aware trees and generalizability scores.

Each tree sees a bootstrap resample of the table rows and a random subset of
the covariates. A type's score is the share of trees that predict for it; its
prediction is the average over those trees.
"""
from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace

import numpy as np

from .core import EstimateTable, TreeModel
from .errors import ValidationError
from .tree import SearchConfig, fit_gaware_tree


def tree_rng(seed: int, index: int) -> np.random.Generator:
    """Generator for tree ``index``: the master seed plus a counter."""
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(index,)))


@dataclass(frozen=True)
class ForestTree:
    tree: TreeModel
    variables: tuple
    seed_index: int
    rows: tuple          # resampled row indices into the training table


@dataclass(frozen=True)
class ForestModel:
    trees: tuple
    M: int
    m: int
    seed: int
    bootstrap: bool = True

    def to_dict(self) -> dict:
        return {"M": self.M, "m": self.m, "seed": self.seed, "bootstrap": self.bootstrap,
                "trees": [{"variables": list(t.variables), "seed_index": t.seed_index,
                           "tree": t.tree.to_dict()} for t in self.trees]}


@dataclass(frozen=True)
class ForestPrediction:
    type_ids: tuple
    score: np.ndarray
    prediction: np.ndarray   # NaN where score is 0
    n_predicting: np.ndarray


def _fit_one(table: EstimateTable, config: SearchConfig, m: int, seed: int, j: int, bootstrap: bool):
    rng = tree_rng(seed, j)
    n, r = len(table), table.n_covariates
    rows = np.sort(rng.integers(0, n, size=n)) if bootstrap else np.arange(n)
    variables = tuple(sorted(rng.choice(r, size=m, replace=False).tolist())) if m < r else tuple(range(r))
    sample = table.subset(rows, suffix_duplicates=True) if bootstrap else table
    fit = fit_gaware_tree(sample, replace(config, variables=variables))
    return ForestTree(fit.tree, variables, j, tuple(rows.tolist()))


def fit_forest(table: EstimateTable, config: SearchConfig, M: int, m: int, seed: int = 0,
               bootstrap: bool = True, workers: int = 1) -> ForestModel:
    """Fit M trees on bootstrap resamples using m of the r covariates each.

    ``bootstrap=False`` is a diagnostic mode: every tree sees the full table
    and m may equal r, so that M=1 reproduces a single fitted tree.
    """
    r = table.n_covariates
    if M < 1:
        raise ValidationError("M must be at least 1")
    if not np.isscalar(config.sigma2):
        raise ValidationError("the forest shares one scalar sigma2 across trees")
    if bootstrap and not 1 <= m < r:
        raise ValidationError(f"m must satisfy 1 <= m < r = {r}")
    if not bootstrap and not 1 <= m <= r:
        raise ValidationError(f"m must satisfy 1 <= m <= r = {r}")
    if workers > 1 and M > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            trees = list(ex.map(_fit_one, [table] * M, [config] * M, [m] * M, [seed] * M, range(M), [bootstrap] * M))
    else:
        trees = [_fit_one(table, config, m, seed, j, bootstrap) for j in range(M)]
    return ForestModel(tuple(trees), M, m, seed, bootstrap)


def _aggregate(model: ForestModel, table: EstimateTable, trees) -> ForestPrediction:
    n, Q = len(table), table.n_outcomes
    total = np.zeros((n, Q))
    count = np.zeros(n, dtype=int)
    used = np.zeros(n, dtype=int)
    for ft, mask in trees:
        pred = ft.tree.predict(table.X)
        ok = ~np.isnan(pred).any(axis=1) & mask
        total[ok] += pred[ok]
        count[ok] += 1
        used += mask
    with np.errstate(invalid="ignore", divide="ignore"):
        score = np.where(used > 0, count / np.maximum(used, 1), 0.0)
        prediction = np.where(count[:, None] > 0, total / np.maximum(count, 1)[:, None], np.nan)
    return ForestPrediction(table.type_ids, score, prediction, count)


def predict_with_scores(model: ForestModel, table: EstimateTable) -> ForestPrediction:
    everyone = np.ones(len(table), dtype=bool)
    return _aggregate(model, table, [(ft, everyone) for ft in model.trees])


def out_of_bag_scores(model: ForestModel, table: EstimateTable) -> ForestPrediction:
    """Scores using, for each row, only trees whose resample left that row out.

    ``table`` must be the training table. Rows that were in every resample get
    score 0 and no prediction.
    """
    n = len(table)
    trees = []
    for ft in model.trees:
        mask = np.ones(n, dtype=bool)
        mask[list(ft.rows)] = False
        trees.append((ft, mask))
    return _aggregate(model, table, trees)
