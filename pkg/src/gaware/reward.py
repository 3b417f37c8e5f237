"""Debiased empirical reward, group losses and population-level oracles.

The empirical reward of a partition is

    W_hat = -( sum_{g>1} Delta_hat(g) + sum_{alpha(x)=1} sigma2(x) p(x) )

where Delta_hat(g) is the weighted within-group squared deviation from the
group mean minus the weighted sampling variances. Delta_hat may be negative
and is never clipped.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from .core import EstimateTable, Partition
from .errors import ValidationError


@dataclass(frozen=True)
class RewardParams:
    """Ignorance cost and group budget.

    ``sigma2`` is a non-negative scalar, an array aligned with table rows,
    or a mapping from type id to cost.
    """

    sigma2: float | np.ndarray | Mapping = 1.0
    G: int = 2

    def __post_init__(self):
        if self.G < 2:
            raise ValidationError("G must be at least 2")
        if np.isscalar(self.sigma2):
            s = float(self.sigma2)
            if not np.isfinite(s) or s < 0:
                raise ValidationError("sigma2 must be finite and non-negative")

    @property
    def is_scalar(self) -> bool:
        return np.isscalar(self.sigma2)

    def per_type(self, table: EstimateTable) -> np.ndarray:
        return resolve_sigma2(self.sigma2, table)


def resolve_sigma2(sigma2, table: EstimateTable) -> np.ndarray:
    """Per-row ignorance costs for ``table``."""
    n = len(table)
    if np.isscalar(sigma2):
        out = np.full(n, float(sigma2))
    elif isinstance(sigma2, Mapping):
        try:
            out = np.array([float(sigma2[t]) for t in table.type_ids])
        except KeyError as exc:
            raise ValidationError(f"sigma2 map has no entry for type {exc.args[0]!r}") from None
    else:
        out = np.asarray(sigma2, dtype=float).ravel()
        if out.size != n:
            raise ValidationError("per-type sigma2 must have one entry per row")
    if not np.isfinite(out).all() or (out < 0).any():
        raise ValidationError("sigma2 must be finite and non-negative")
    return out


@dataclass(frozen=True)
class RewardBreakdown:
    delta_by_group: dict
    ignorance_mass: float
    ignorance_cost: float
    total: float
    per_outcome: tuple = ()
    r_hat: float = 0.0
    n_outcomes: int = 1
    n_archetypes: int = field(default=0)

    @property
    def normalized(self) -> float:
        """The reward divided by the number of outcomes."""
        return self.total / self.n_outcomes


def subset_delta(w: np.ndarray, phi: np.ndarray, eta2: np.ndarray) -> np.ndarray:
    """Per-outcome debiased loss of pooling the given rows under one mean."""
    mass = w.sum()
    if mass <= 0:
        return np.zeros(phi.shape[1])
    mean = w @ phi / mass
    return w @ ((phi - mean) ** 2 - eta2)


def group_means(table: EstimateTable, part: Partition) -> dict:
    """Weighted mean of each non-empty archetype group, as an array over outcomes."""
    labels = part.aligned(table)
    out = {}
    for g in np.unique(labels):
        if g <= 1:
            continue
        m = labels == g
        out[int(g)] = table.w[m] @ table.phi[m] / table.w[m].sum()
    return out


def group_delta_per_outcome(table: EstimateTable, part: Partition, g: int) -> np.ndarray:
    if g <= 1:
        raise ValidationError("group loss is defined for archetype labels g > 1")
    m = part.aligned(table) == g
    return subset_delta(table.w[m], table.phi[m], table.eta2[m])


def group_delta(table: EstimateTable, part: Partition, g: int) -> float:
    return float(group_delta_per_outcome(table, part, g).sum())


def empirical_reward(table: EstimateTable, part: Partition, params: RewardParams) -> RewardBreakdown:
    labels = part.aligned(table)
    if labels.max() > params.G:
        raise ValidationError(f"partition uses label {labels.max()} > G = {params.G}")
    s2 = params.per_type(table)
    deltas, per_q = {}, {}
    for g in np.unique(labels):
        if g > 1:
            dq = group_delta_per_outcome(table, part, int(g))
            per_q[int(g)] = dq
            deltas[int(g)] = float(dq.sum())
    ign = labels == 1
    mass = float(table.w[ign].sum())
    cost = float(s2[ign] @ table.w[ign])
    r_hat = float(sum(deltas.values()))
    per_outcome = tuple({g: float(v[q]) for g, v in per_q.items()} for q in range(table.n_outcomes))
    return RewardBreakdown(deltas, mass, cost, -(r_hat + cost), per_outcome, r_hat,
                           table.n_outcomes, len(deltas))


def _truth_array(truth, table: EstimateTable) -> np.ndarray:
    if isinstance(truth, Mapping):
        return np.array([np.atleast_1d(truth[t]) for t in table.type_ids], dtype=float)
    arr = np.asarray(truth, dtype=float)
    return arr.reshape(len(table), -1)


def population_group_means(phi: np.ndarray, w: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Per-row population group means (NaN for ignorance rows)."""
    phi = phi.reshape(len(w), -1)
    out = np.full(phi.shape, np.nan)
    for g in np.unique(labels):
        if g > 1:
            m = labels == g
            out[m] = w[m] @ phi[m] / w[m].sum()
    return out


def population_reward(truth, w, labels, predictions=None, sigma2=1.0) -> float:
    """Population reward of abstaining on ``labels == 1`` and predicting elsewhere.

    ``truth`` and ``predictions`` are (n,) or (n, Q) arrays aligned with ``w``;
    predictions default to the population group means. ``sigma2`` is a scalar
    or per-row array.
    """
    w = np.asarray(w, dtype=float)
    labels = np.asarray(labels)
    phi = np.asarray(truth, dtype=float).reshape(len(w), -1)
    pred = population_group_means(phi, w, labels) if predictions is None \
        else np.asarray(predictions, dtype=float).reshape(phi.shape)
    pi = labels > 1
    s2 = np.broadcast_to(np.asarray(sigma2, dtype=float), w.shape)
    err = ((pred[pi] - phi[pi]) ** 2).sum(axis=1)
    return float(-(w[pi] @ err) - s2[~pi] @ w[~pi])


def approximation_error(truth, w, labels) -> float:
    """Weighted squared distance between truth and its group means on predicted rows."""
    w = np.asarray(w, dtype=float)
    labels = np.asarray(labels)
    phi = np.asarray(truth, dtype=float).reshape(len(w), -1)
    pred = population_group_means(phi, w, labels)
    pi = labels > 1
    return float(w[pi] @ ((pred[pi] - phi[pi]) ** 2).sum(axis=1))


def simulate_audience_risk(truth, w, labels, sigma2, reps: int, rng: np.random.Generator,
                           predictions=None) -> np.ndarray:
    """Monte Carlo draws of the audience's squared-error risk.

    The audience uses our prediction where we predict and a fresh noisy study
    where we abstain. The fresh study's noise has total variance ``sigma2``
    spread evenly over the Q outcomes, matching the once-per-type ignorance
    cost. Returns one risk per replication; its mean converges to minus the
    population reward.
    """
    w = np.asarray(w, dtype=float)
    labels = np.asarray(labels)
    phi = np.asarray(truth, dtype=float).reshape(len(w), -1)
    pred = population_group_means(phi, w, labels) if predictions is None \
        else np.asarray(predictions, dtype=float).reshape(phi.shape)
    pi = (labels > 1)[:, None]
    sd = np.sqrt(np.broadcast_to(np.asarray(sigma2, dtype=float), w.shape) / phi.shape[1])[:, None]
    out = np.empty(reps)
    for b in range(reps):
        new = phi + sd * rng.standard_normal(phi.shape)
        guess = np.where(pi, np.nan_to_num(pred), new)
        out[b] = w @ ((phi - guess) ** 2).sum(axis=1)
    return out


@dataclass(frozen=True)
class FrontierRow:
    sigma2: float
    ignorance_mass: float
    r_hat: float
    w_hat: float
    n_archetypes: int
    error: str | None = None


def sigma_frontier(table: EstimateTable, fitter: Callable, grid: Sequence[float]) -> list:
    """Fit one model per cost level and tabulate abstention against approximation error.

    ``fitter(table, sigma2)`` must return an object with a ``breakdown``
    attribute. A failure at one grid point is recorded and the sweep continues.
    """
    grid = [float(s) for s in grid]
    if not grid:
        raise ValidationError("sigma2 grid is empty")
    if any(b < a for a, b in zip(grid, grid[1:])):
        raise ValidationError("sigma2 grid must be ascending")
    rows = []
    for s2 in grid:
        try:
            bd = fitter(table, s2).breakdown
        except Exception as exc:  # noqa: BLE001 - recorded per grid point
            rows.append(FrontierRow(s2, float("nan"), float("nan"), float("nan"), 0, f"{type(exc).__name__}: {exc}"))
            continue
        rows.append(FrontierRow(s2, bd.ignorance_mass, bd.r_hat, bd.total, bd.n_archetypes))
    return rows
