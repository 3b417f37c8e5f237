"""Build estimate tables from unit-level experimental data.

Pseudo-outcomes are inverse-propensity weighted, optionally with a
doubly-robust adjustment whose outcome regressions are cross-fitted within
each environment. Per-type variances come from the within-type spread, from
nearest-neighbour matching, or from a parametric residual model.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .core import EstimateTable, RawStudy
from .errors import ValidationError


# -- regression oracles ------------------------------------------------------

class DegenerateFit(Exception):
    """Raised by an oracle that cannot produce a usable fit."""


class ZeroOracle:
    """Predicts zero everywhere; turns the doubly-robust transform into plain IPW."""

    def fit(self, X, y):
        return lambda Z: np.zeros(np.asarray(Z).shape[0])


class ConstantOracle:
    """Predicts the training mean."""

    def fit(self, X, y):
        y = np.asarray(y, dtype=float)
        if y.size == 0:
            raise DegenerateFit("no training rows")
        c = float(y.mean())
        return lambda Z: np.full(np.asarray(Z).shape[0], c)


class FunctionOracle:
    """Ignores the data and returns a known function, e.g. the true conditional mean."""

    def __init__(self, f: Callable):
        self.f = f

    def fit(self, X, y):
        return lambda Z: np.asarray(self.f(np.asarray(Z, dtype=float)), dtype=float)


class KNNMean:
    """Mean response of the k nearest training points (Euclidean)."""

    def __init__(self, k: int = 10):
        if k < 1:
            raise ValidationError("k must be positive")
        self.k = k

    def fit(self, X, y):
        X = np.asarray(X, dtype=float)
        y = np.asarray(y, dtype=float)
        if y.size == 0:
            raise DegenerateFit("no training rows")
        k = min(self.k, y.size)

        def predict(Z):
            Z = np.atleast_2d(np.asarray(Z, dtype=float))
            d = ((Z[:, None, :] - X[None, :, :]) ** 2).sum(axis=2)
            nn = np.argsort(d, axis=1, kind="stable")[:, :k]
            return y[nn].mean(axis=1)

        return predict


class RidgeCV:
    """Ridge regression with an intercept, penalty chosen by k-fold CV over a fixed grid.

    Covariates are standardized with training moments. Fold assignment is
    seeded, so fits are deterministic.
    """

    def __init__(self, penalties: Sequence[float] = tuple(10.0 ** np.arange(-4, 5)), folds: int = 5, seed: int = 0):
        self.penalties = tuple(float(a) for a in penalties)
        self.folds = folds
        self.seed = seed

    @staticmethod
    def _solve(Xs, y, lam):
        n, r = Xs.shape
        A = np.hstack([np.ones((n, 1)), Xs])
        P = lam * np.eye(r + 1)
        P[0, 0] = 0.0
        coef = np.linalg.solve(A.T @ A + P, A.T @ y)
        if not np.isfinite(coef).all():
            raise np.linalg.LinAlgError("non-finite coefficients")
        return coef

    def fit(self, X, y):
        X = np.asarray(X, dtype=float)
        y = np.asarray(y, dtype=float)
        n = y.size
        if n == 0:
            raise DegenerateFit("no training rows")
        mu = X.mean(axis=0)
        sd = X.std(axis=0)
        sd[sd == 0] = 1.0
        Xs = (X - mu) / sd
        lam = self.penalties[0]
        if n >= 2 * self.folds and len(self.penalties) > 1:
            fold = np.random.default_rng(self.seed).permutation(n) % self.folds
            scores = []
            for a in self.penalties:
                sse = 0.0
                for k in range(self.folds):
                    tr, te = fold != k, fold == k
                    c = self._solve(Xs[tr], y[tr], a)
                    sse += float(((y[te] - c[0] - Xs[te] @ c[1:]) ** 2).sum())
                scores.append(sse)
            lam = self.penalties[int(np.argmin(scores))]
        try:
            coef = self._solve(Xs, y, lam)
        except np.linalg.LinAlgError as exc:
            raise DegenerateFit(str(exc)) from None

        def predict(Z):
            Zs = (np.atleast_2d(np.asarray(Z, dtype=float)) - mu) / sd
            return coef[0] + Zs @ coef[1:]

        predict.penalty = lam
        return predict


def make_oracle(name: str, seed: int = 0):
    name = name.lower()
    if name == "ridge":
        return RidgeCV(seed=seed)
    if name == "knn":
        return KNNMean()
    if name == "zero":
        return ZeroOracle()
    if name == "constant":
        return ConstantOracle()
    raise ValidationError(f"unknown oracle {name!r}")


# -- type keying ---------------------------------------------------------------

def assign_types(study: RawStudy, key="covariates") -> np.ndarray:
    """Type id of every unit.

    ``"covariates"`` groups units with identical covariate vectors (ids follow
    the lexicographic order of the vectors), ``"unit"`` makes every unit its own
    type, and a sequence supplies the ids directly.
    """
    n = len(study)
    if isinstance(key, str):
        if key == "unit":
            width = len(str(max(n - 1, 0)))
            return np.array([f"u{i:0{width}d}" for i in range(n)], dtype=object)
        if key == "covariates":
            _, inv = np.unique(study.X, axis=0, return_inverse=True)
            inv = np.asarray(inv).ravel()
            width = len(str(max(int(inv.max()), 0)))
            return np.array([f"x{k:0{width}d}" for k in inv], dtype=object)
        raise ValidationError(f"unknown type key {key!r}")
    ids = np.asarray([str(k) for k in key], dtype=object)
    if ids.size != n:
        raise ValidationError("type key must provide one id per unit")
    return ids


def _aggregate(study: RawStudy, ytilde: np.ndarray, types: np.ndarray, variance: str,
               unit_var: np.ndarray | None = None, provenance: dict | None = None) -> EstimateTable:
    order = sorted(set(types.tolist()))
    pos = {t: k for k, t in enumerate(order)}
    code = np.array([pos[t] for t in types])
    s = np.bincount(code, minlength=len(order)).astype(float)
    Q = ytilde.shape[1]
    phi = np.zeros((len(order), Q))
    for q in range(Q):
        phi[:, q] = np.bincount(code, weights=ytilde[:, q], minlength=len(order)) / s
    first = np.array([np.flatnonzero(code == k)[0] for k in range(len(order))])
    X = study.X[first]
    if variance == "per_type":
        small = [order[k] for k in np.flatnonzero(s < 2)]
        if small:
            raise ValidationError(f"types with fewer than 2 units: {small[:10]}" + (" ..." if len(small) > 10 else ""))
        eta2 = np.zeros_like(phi)
        for q in range(Q):
            ss = np.bincount(code, weights=(ytilde[:, q] - phi[code, q]) ** 2, minlength=len(order))
            eta2[:, q] = ss / (s * (s - 1))
    elif variance == "unit":
        eta2 = np.zeros_like(phi)
        for q in range(Q):
            eta2[:, q] = np.bincount(code, weights=unit_var[:, q], minlength=len(order)) / s ** 2
    elif variance == "none":
        eta2 = np.zeros_like(phi)
    else:
        raise ValidationError(f"unknown variance mode {variance!r}")
    return EstimateTable(tuple(order), X, s / s.sum(), phi, eta2, study.outcome_names, study.covariate_names,
                         provenance or {})


def ipw_transform(study: RawStudy, m1=None, m0=None) -> np.ndarray:
    """Per-unit pseudo-outcomes; with outcome regressions this is the doubly-robust form."""
    Y, D, o = study.Y, study.D[:, None], study.o[:, None]
    if m1 is None:
        return D * Y / o - (1 - D) * Y / (1 - o)
    return D * (Y - m1) / o - (1 - D) * (Y - m0) / (1 - o) + m1 - m0


def ipw_pseudo_outcomes(study: RawStudy, key="covariates", variance: str = "per_type") -> EstimateTable:
    """Per-type mean of inverse-propensity weighted outcomes.

    ``variance="per_type"`` uses the unbiased variance of a mean,
    sum((Y~ - phi)^2) / (s (s - 1)).
    """
    types = assign_types(study, key)
    return _aggregate(study, ipw_transform(study), types, variance, provenance={"estimator": "ipw"})


@dataclass(frozen=True)
class CrossFit:
    m1: np.ndarray
    m0: np.ndarray
    fold: np.ndarray
    fallbacks: int


def _env_groups(study: RawStudy) -> list:
    env = np.asarray(study.env, dtype=object)
    return [(e, np.flatnonzero(env == e)) for e in sorted(set(study.env))]


def crossfit_outcome_models(study: RawStudy, oracle, folds: int = 2, seed: int = 0) -> CrossFit:
    """Out-of-fold predictions of E[Y | X, D=d] for d = 0, 1, fitted within environment."""
    if folds < 2:
        raise ValidationError("at least two folds are needed for cross-fitting")
    n, Q = study.Y.shape
    m1 = np.zeros((n, Q))
    m0 = np.zeros((n, Q))
    fold = np.zeros(n, dtype=int)
    fallbacks = 0
    rng = np.random.default_rng(seed)
    for e, idx in _env_groups(study):
        if idx.size < folds:
            raise ValidationError(f"environment {e!r} has {idx.size} units, fewer than {folds} folds")
        f = rng.permutation(idx.size) % folds
        fold[idx] = f
        for k in range(folds):
            test, train = idx[f == k], idx[f != k]
            for d, target in ((1, m1), (0, m0)):
                arm = train[study.D[train] == d]
                for q in range(Q):
                    try:
                        pred = oracle.fit(study.X[arm], study.Y[arm, q])(study.X[test])
                        if not np.isfinite(pred).all():
                            raise DegenerateFit("non-finite predictions")
                    except (DegenerateFit, np.linalg.LinAlgError):
                        fallbacks += 1
                        pool = study.Y[arm, q] if arm.size else study.Y[study.D == d, q]
                        pred = np.full(test.size, float(pool.mean()) if pool.size else 0.0)
                    target[test, q] = pred
    if fallbacks:
        warnings.warn(f"{fallbacks} outcome regressions fell back to the arm mean", stacklevel=2)
    return CrossFit(m1, m0, fold, fallbacks)


def dr_pseudo_outcomes(study: RawStudy, oracle, folds: int = 2, key="covariates", seed: int = 0,
                       variance: str = "per_type") -> EstimateTable:
    cf = crossfit_outcome_models(study, oracle, folds, seed)
    types = assign_types(study, key)
    prov = {"estimator": "dr", "folds": folds, "fallback_fits": cf.fallbacks}
    return _aggregate(study, ipw_transform(study, cf.m1, cf.m0), types, variance, provenance=prov)


def match_groups(X: np.ndarray, lam: int) -> list:
    """Greedy nearest-neighbour groups of size lam+1, taken in input order.

    Each unprocessed unit is grouped with its ``lam`` closest unprocessed
    units; when more than ``lam`` units sit at distance zero they all join.
    A trailing remainder smaller than lam+1 is merged into the last group.
    """
    n = X.shape[0]
    remaining = list(range(n))
    groups = []
    while remaining:
        i = remaining[0]
        others = np.array(remaining[1:], dtype=int)
        if others.size <= lam:
            members = [i] + others.tolist()
            if groups and len(members) < lam + 1:
                groups[-1] = sorted(groups[-1] + members)
            else:
                groups.append(members)
            break
        d = np.sqrt(((X[others] - X[i]) ** 2).sum(axis=1))
        zero = others[d == 0]
        if zero.size > lam:
            chosen = zero.tolist()
        else:
            chosen = others[np.argsort(d, kind="stable")[:lam]].tolist()
        members = sorted([i] + chosen)
        groups.append(members)
        taken = set(members)
        remaining = [u for u in remaining if u not in taken]
    return groups


def matched_variance_table(study: RawStudy, oracle, folds: int = 2, match_size: int = 1, seed: int = 0) -> EstimateTable:
    """One row per matched group: median covariates, mean pseudo-outcome, variance of that mean."""
    if match_size < 1:
        raise ValidationError("match size must be at least 1")
    cf = crossfit_outcome_models(study, oracle, folds, seed)
    yt = ipw_transform(study, cf.m1, cf.m0)
    n = len(study)
    ids, X, w, phi, eta2 = [], [], [], [], []
    small_envs = []
    for e, idx in _env_groups(study):
        if idx.size < match_size + 1:
            small_envs.append(e)
            groups = [list(range(idx.size))]
        else:
            groups = match_groups(study.X[idx], match_size)
        for k, g in enumerate(groups):
            u = idx[g]
            ids.append(f"{e}-g{k:05d}")
            X.append(np.median(study.X[u], axis=0))
            w.append(u.size / n)
            phi.append(yt[u].mean(axis=0))
            eta2.append(yt[u].var(axis=0, ddof=1) / u.size if u.size > 1 else np.zeros(yt.shape[1]))
    if small_envs:
        warnings.warn(f"environments with fewer than {match_size + 1} units kept as one group: {small_envs}",
                      stacklevel=2)
    prov = {"estimator": "match", "match_size": match_size, "small_environments": small_envs,
            "fallback_fits": cf.fallbacks}
    return EstimateTable(tuple(ids), np.array(X), np.array(w), np.array(phi), np.array(eta2),
                         study.outcome_names, study.covariate_names, prov)


def parametric_variance_table(study: RawStudy, oracle, folds: int = 2, model_variance: bool = False,
                              key="unit", seed: int = 0, variance_oracle=None) -> EstimateTable:
    """Variance from squared residual pseudo-outcomes, optionally smoothed by regression.

    With ``model_variance`` the squared residuals are regressed on covariates
    within each environment (``variance_oracle`` defaults to ``oracle``) and
    negative fitted values are floored at zero.
    """
    cf = crossfit_outcome_models(study, oracle, folds, seed)
    Y, D, o = study.Y, study.D[:, None], study.o[:, None]
    resid = D * (Y - cf.m1) / o - (1 - D) * (Y - cf.m0) / (1 - o)
    unit_var = resid ** 2
    floored = 0
    if model_variance:
        vo = variance_oracle or oracle
        fitted = np.empty_like(unit_var)
        for _, idx in _env_groups(study):
            for q in range(unit_var.shape[1]):
                pred = vo.fit(study.X[idx], unit_var[idx, q])(study.X[idx])
                floored += int((pred < 0).sum())
                fitted[idx, q] = np.maximum(pred, 0.0)
        unit_var = fitted
    types = assign_types(study, key)
    prov = {"estimator": "param", "model_variance": model_variance, "floored_variances": floored,
            "fallback_fits": cf.fallbacks}
    return _aggregate(study, resid + cf.m1 - cf.m0, types, "unit", unit_var, prov)


# -- sample splitting --------------------------------------------------------

@dataclass(frozen=True)
class SplitPair:
    main: EstimateTable
    holdout: EstimateTable
    excluded: tuple = ()


BUILDERS = ("ipw", "dr", "param")


def split_for_inference(study: RawStudy, seed: int = 0, estimator: str = "ipw", key="covariates",
                        oracle=None, folds: int = 2) -> SplitPair:
    """Halve the units of every type at random and build one table per half.

    Odd counts give the extra unit to the main half. Types with fewer than four
    units are dropped from both halves and listed in ``excluded``. Both tables
    carry the same ids and the same weights (full-sample type shares).
    """
    if estimator not in BUILDERS:
        raise ValidationError(f"estimator must be one of {BUILDERS}")
    types = assign_types(study, key)
    rng = np.random.default_rng(seed)
    main_idx, hold_idx, excluded = [], [], []
    counts = {}
    for t in sorted(set(types.tolist())):
        u = np.flatnonzero(types == t)
        if u.size < 4:
            excluded.append(t)
            continue
        counts[t] = u.size
        perm = rng.permutation(u)
        half = math.ceil(u.size / 2)
        main_idx.extend(perm[:half].tolist())
        hold_idx.extend(perm[half:].tolist())
    if not counts:
        raise ValidationError("no type has at least four units")
    main_idx, hold_idx = np.sort(main_idx), np.sort(hold_idx)

    def build(idx):
        sub = study.subset(idx)
        ids = types[idx]
        if estimator == "ipw":
            return ipw_pseudo_outcomes(sub, key=ids)
        if estimator == "dr":
            return dr_pseudo_outcomes(sub, oracle or RidgeCV(seed=seed), folds, key=ids, seed=seed)
        return parametric_variance_table(sub, oracle or RidgeCV(seed=seed), folds, key=ids, seed=seed)

    main, hold = build(main_idx), build(hold_idx)
    w = np.array([counts[t] for t in main.type_ids], dtype=float)
    w /= w.sum()
    return SplitPair(main.with_weights(w), hold.with_weights(w), tuple(excluded))
