"""Sample-splitting tests for candidate partitions.

A partition is fitted on the holdout half. Each candidate is compared with it
on the main half through the reward difference T = W(alpha_o) - W(alpha); a
candidate is rejected when T is too large relative to a conservative
estimate of its standard deviation.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from statistics import NormalDist
from typing import Sequence

import numpy as np

from .core import EstimateTable, Partition
from .errors import ValidationError
from .estimates import SplitPair
from .reward import RewardParams, empirical_reward, group_means
from .tree import SearchConfig, fit_gaware_tree

DEGENERATE_VARIANCE = 1e-12

_STANDARD_NORMAL = NormalDist()


def norm_ppf(p: float) -> float:
    """Standard normal quantile."""
    if not 0.0 < p < 1.0:
        raise ValidationError("probability must lie in (0, 1)")
    return _STANDARD_NORMAL.inv_cdf(p)


@dataclass(frozen=True)
class TestReport:
    candidate: str
    t_hat: float
    v2_hat: float
    critical_value: float
    gamma_star: float
    n_types: int
    retained: bool
    degenerate: bool

    __test__ = False  # not a pytest class

    @property
    def decision(self) -> str:
        return "retained" if self.retained else "rejected"


def fit_out_of_sample(pair: SplitPair, config: SearchConfig) -> tuple:
    """Fit on the holdout half only. Returns (partition, flags)."""
    flags = []
    if pair.holdout is pair.main or pair.holdout.equals(pair.main):
        warnings.warn("non-independent halves: holdout equals main", stacklevel=2)
        flags.append("non-independent halves")
    fit = fit_gaware_tree(pair.holdout, config)
    return fit.partition, tuple(flags)


def test_statistic(main: EstimateTable, alpha: Partition, alpha_o: Partition, sigma2) -> float:
    """W(alpha_o) - W(alpha) on the main-half estimates."""
    G = max(alpha.G, alpha_o.G)
    params = RewardParams(sigma2, G)
    return empirical_reward(main, alpha_o, params).total - empirical_reward(main, alpha, params).total


test_statistic.__test__ = False


def _per_type_means(table: EstimateTable, labels: np.ndarray, means: dict) -> np.ndarray:
    out = np.zeros_like(table.phi)
    for g, m in means.items():
        out[labels == g] = m
    return out


def influence_terms(main: EstimateTable, alpha: Partition, alpha_o: Partition) -> np.ndarray:
    """Per-type terms Y_x whose weighted sum linearizes the reward difference."""
    la, lo = alpha.aligned(main), alpha_o.aligned(main)
    ma = _per_type_means(main, la, group_means(main, alpha))
    mo = _per_type_means(main, lo, group_means(main, alpha_o))
    ho = (lo > 1).astype(float)[:, None]
    ha = (la > 1).astype(float)[:, None]
    phi, eta2 = main.phi, main.eta2
    Y = (ho - ha) * (phi ** 2 - eta2) - phi * (2 * mo * ho - 2 * ma * ha)
    return Y.sum(axis=1)


def variance_bound(main: EstimateTable, alpha: Partition, alpha_o: Partition, per_group: bool = False) -> float:
    """Conservative estimate of the asymptotic variance of sqrt(|X|) T.

    Terms are centered at their p^2-weighted mean; with ``per_group`` the
    centering is done separately within each group of ``alpha_o``, which never
    gives a larger value.
    """
    Y = influence_terms(main, alpha, alpha_o)
    p2 = main.w ** 2
    if per_group:
        lo = alpha_o.aligned(main)
        centered = np.empty_like(Y)
        for g in np.unique(lo):
            m = lo == g
            centered[m] = Y[m] - (p2[m] @ Y[m]) / p2[m].sum()
    else:
        centered = Y - (p2 @ Y) / p2.sum()
    return float(len(main) * (p2 @ centered ** 2))


def single_test(main: EstimateTable, alpha: Partition, alpha_o: Partition, sigma2, gamma_star: float,
                name: str = "", per_group: bool = False) -> TestReport:
    if not 0 < gamma_star < 1:
        raise ValidationError("test level must lie in (0, 1)")
    t = test_statistic(main, alpha, alpha_o, sigma2)
    v2 = variance_bound(main, alpha, alpha_o, per_group)
    q = norm_ppf(1 - gamma_star) * math.sqrt(v2)
    degenerate = v2 < DEGENERATE_VARIANCE
    retained = True if degenerate else t <= q / math.sqrt(len(main))
    return TestReport(name, t, v2, q, gamma_star, len(main), retained, degenerate)


def prune_partition_set(pair: SplitPair, candidates: Sequence[Partition], gamma: float, config: SearchConfig,
                        names: Sequence[str] | None = None, per_group: bool = False,
                        alpha_o: Partition | None = None) -> tuple:
    """Test every candidate at level gamma / |candidates|.

    Returns (retained candidates, reports). ``alpha_o`` may be supplied to
    reuse a partition already fitted on the holdout half.
    """
    if not candidates:
        raise ValidationError("no candidate partitions")
    if not 0 < gamma < 1:
        raise ValidationError("gamma must lie in (0, 1)")
    if alpha_o is None:
        alpha_o, _ = fit_out_of_sample(pair, config)
    names = list(names) if names is not None else [f"candidate_{k}" for k in range(len(candidates))]
    gstar = gamma / len(candidates)
    reports = [single_test(pair.main, a, alpha_o, config.sigma2, gstar, nm, per_group)
               for a, nm in zip(candidates, names)]
    retained = [a for a, r in zip(candidates, reports) if r.retained]
    return retained, reports
