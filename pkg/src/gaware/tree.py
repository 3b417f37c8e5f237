"""Tree search: exact recursive helper, greedy G-aware tree and a brute-force oracle.

The helper optimizes over full depth-L split trees in which every leaf
independently picks the cheaper of two costs: pooling its members under one
archetype (the debiased loss Delta_hat) or abstaining (sigma2 times its mass).
The G-aware tree then enforces the budget of G-1 archetypes greedily and
reports how far that moved the objective from the helper's lower bound.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, replace

import numpy as np

from .core import EstimateTable, Leaf, Node, Partition, TreeModel
from .errors import EnumerationTooLarge, ValidationError
from .reward import RewardBreakdown, RewardParams, empirical_reward, resolve_sigma2, subset_delta

SPLIT_RULES = ("equal", "quantile")
MIN_LEAF_RULES = ("force_ignorance", "discard_split")
BRUTE_FORCE_LIMIT = 1e7


@dataclass(frozen=True)
class SearchConfig:
    """Tree-search settings.

    min_leaf_rule
        ``"force_ignorance"`` (default): a non-empty group with at most
        ``min_leaf`` types may not become an archetype, so it abstains.
        ``"discard_split"``: a split is discarded whenever such a group would
        prefer to be an archetype.
    variables
        Column indices the tree may split on (all columns when ``None``).
    """

    depth: int = 2
    splits: int = 5
    min_leaf: int = 1
    G: int = 4
    sigma2: float | np.ndarray = 1.0
    split_rule: str = "equal"
    min_leaf_rule: str = "force_ignorance"
    variables: tuple | None = None

    def __post_init__(self):
        if self.depth < 1 or self.splits < 1 or self.min_leaf < 1:
            raise ValidationError("depth, splits and min_leaf must be positive")
        if self.G < 2:
            raise ValidationError("G must be at least 2")
        if self.split_rule not in SPLIT_RULES:
            raise ValidationError(f"split_rule must be one of {SPLIT_RULES}")
        if self.min_leaf_rule not in MIN_LEAF_RULES:
            raise ValidationError(f"min_leaf_rule must be one of {MIN_LEAF_RULES}")
        if np.isscalar(self.sigma2) and not (math.isfinite(float(self.sigma2)) and float(self.sigma2) >= 0):
            raise ValidationError("sigma2 must be finite and non-negative")
        if self.variables is not None:
            object.__setattr__(self, "variables", tuple(int(v) for v in self.variables))
            if not self.variables:
                raise ValidationError("variables subset is empty")

    def with_(self, **kw) -> "SearchConfig":
        return replace(self, **kw)

    def reward_params(self) -> RewardParams:
        return RewardParams(self.sigma2, self.G)


@dataclass(frozen=True)
class FitResult:
    tree: TreeModel
    breakdown: RewardBreakdown
    epsilon: float
    helper_loss: float
    partition: Partition
    flags: tuple = ()

    @property
    def objective(self) -> float:
        return self.breakdown.total


def split_values(sorted_x: np.ndarray, S: int, rule: str = "equal") -> np.ndarray:
    """Candidate thresholds for one variable within a scope."""
    if rule == "quantile":
        return np.quantile(sorted_x, np.arange(1, S + 1) / (S + 1))
    lo, hi = sorted_x[0], sorted_x[-1]
    return lo + (hi - lo) * (np.arange(1, S + 1) / (S + 1))


def evaluation_count(depth: int, splits: int, n_vars: int) -> int:
    """Candidate (scope, variable, split) evaluations made by the helper.

    Holds whenever no recursive call receives an empty scope.
    """
    rs = splits * n_vars
    return rs * sum((2 * rs) ** i for i in range(depth))


# -- helper tree --------------------------------------------------------------

@dataclass
class _HLeaf:
    idx: np.ndarray
    archetype: bool
    cost: float


@dataclass
class _HSplit:
    var: int
    value: float
    left: object
    right: object


@dataclass
class HelperResult:
    loss: float
    root: object
    infeasible: bool = False
    evaluations: int = 0

    @property
    def leaves(self) -> list:
        out, stack = [], [self.root]
        while stack:
            nd = stack.pop()
            if isinstance(nd, _HLeaf):
                out.append(nd)
            else:
                stack.append(nd.right)
                stack.append(nd.left)
        return out

    @property
    def splits(self) -> list:
        """(variable, value) pairs in pre-order."""
        out, stack = [], [self.root]
        while stack:
            nd = stack.pop()
            if isinstance(nd, _HSplit):
                out.append((nd.var, nd.value))
                stack.append(nd.right)
                stack.append(nd.left)
        return out


class _Search:
    def __init__(self, table: EstimateTable, config: SearchConfig):
        self.cfg = config
        self.X = table.X
        w = table.w
        self.w = w
        # the loss is location invariant; centering limits cancellation in the prefix sums
        phi = table.phi - w @ table.phi / w.sum()
        self.wphi = w[:, None] * phi
        self.wphi2 = (w[:, None] * phi ** 2).sum(axis=1)
        self.weta = (w[:, None] * table.eta2).sum(axis=1)
        self.ws2 = w * resolve_sigma2(config.sigma2, table)
        # columns: mass, weighted phi (Q), weighted phi^2, weighted eta^2, weighted sigma^2
        self.stats = np.column_stack([w, self.wphi, self.wphi2, self.weta, self.ws2])
        self.Q = table.n_outcomes
        r = table.n_covariates
        vars_ = config.variables if config.variables is not None else tuple(range(r))
        if any(v < 0 or v >= r for v in vars_):
            raise ValidationError("variables subset refers to a missing column")
        self.vars = vars_
        self.evaluations = 0
        self.infeasible = False

    def group_cost(self, m, s1, s2, se, ign, count):
        """Vectorized per-group cost and archetype choice."""
        cfg = self.cfg
        with np.errstate(divide="ignore", invalid="ignore"):
            delta = np.where(m > 0, s2 - (s1 ** 2).sum(axis=-1) / np.where(m > 0, m, 1.0) - se, 0.0)
        arch = (delta <= ign) & (count > 0)
        small = (count > 0) & (count <= cfg.min_leaf)
        if cfg.min_leaf_rule == "force_ignorance":
            arch &= ~small
            cost = np.where(arch, delta, ign)
        else:
            cost = np.where(arch, delta, ign)
            cost = np.where(arch & small, np.inf, cost)
        cost = np.where(count > 0, cost, 0.0)
        return cost, arch

    def all_ignorance(self, idx) -> HelperResult:
        self.infeasible = True
        return HelperResult(float(self.ws2[idx].sum()), _HLeaf(idx, False, float(self.ws2[idx].sum())), True)

    def solve(self, idx: np.ndarray, depth: int) -> HelperResult:
        if idx.size == 0:
            return HelperResult(0.0, _HLeaf(idx, False, 0.0))
        if depth == 1:
            return self.solve_last(idx)
        S, rule = self.cfg.splits, self.cfg.split_rule
        best = None
        for j in self.vars:
            x = self.X[idx, j]
            ts = split_values(np.sort(x), S, rule)
            for t in ts:
                self.evaluations += 1
                go = x <= t
                left = self.solve(idx[go], depth - 1)
                right = self.solve(idx[~go], depth - 1)
                e = left.loss + right.loss
                if best is None or e < best[0]:
                    best = (e, j, float(t), left, right)
        if not np.isfinite(best[0]):
            return self.all_ignorance(idx)
        e, j, t, left, right = best
        return HelperResult(e, _HSplit(j, t, left.root, right.root))

    def solve_last(self, idx: np.ndarray) -> HelperResult:
        """Depth-one search, vectorized over variables and split values."""
        S, rule, Q = self.cfg.splits, self.cfg.split_rule, self.Q
        vars_ = np.asarray(self.vars)
        V, n = vars_.size, idx.size
        x = self.X[np.ix_(idx, vars_)]
        order = np.argsort(x, axis=0, kind="stable")
        sidx = idx[order]
        xs = np.take_along_axis(x, order, axis=0)
        ts = np.stack([split_values(xs[:, v], S, rule) for v in range(V)])     # (V, S)
        cut = (xs.T[:, :, None] <= ts[:, None, :]).sum(axis=1)                 # rows at or below each threshold
        self.evaluations += ts.size
        c = np.cumsum(self.stats[sidx], axis=0)                                # (n, V, K)
        left = c[np.maximum(cut - 1, 0), np.arange(V)[:, None]]                # (V, S, K)
        left[cut == 0] = 0.0
        right = c[-1][:, None, :] - left
        both = np.concatenate([left.reshape(V * S, -1), right.reshape(V * S, -1)])
        count = np.concatenate([cut.ravel(), n - cut.ravel()])
        cost, arch = self.group_cost(both[:, 0], both[:, 1:1 + Q], both[:, 1 + Q], both[:, 2 + Q],
                                     both[:, 3 + Q], count)
        m = V * S
        E = cost[:m] + cost[m:]
        k = int(np.argmin(E))   # first minimum in (variable, split) order
        if not np.isfinite(E[k]):
            return self.all_ignorance(idx)
        v, kk = divmod(k, S)
        col = sidx[:, v]
        cL = int(cut[v, kk])
        left_leaf = _HLeaf(np.sort(col[:cL]), bool(arch[k]), float(cost[k]))
        right_leaf = _HLeaf(np.sort(col[cL:]), bool(arch[m + k]), float(cost[m + k]))
        return HelperResult(float(E[k]), _HSplit(int(vars_[v]), float(ts[v, kk]), left_leaf, right_leaf))


def helper_tree(table: EstimateTable, config: SearchConfig, scope=None) -> HelperResult:
    """Exact search over depth-L split trees with per-leaf abstention.

    ``scope`` restricts the search to a subset of rows (index array or boolean
    mask); by default all rows are used.
    """
    search = _Search(table, config)
    if scope is None:
        idx = np.arange(len(table))
    else:
        scope = np.asarray(scope)
        idx = np.flatnonzero(scope) if scope.dtype == bool else np.sort(scope.astype(int))
    if idx.size == 0:
        raise ValidationError("scope contains no types")
    res = search.solve(idx, config.depth)
    res.infeasible = res.infeasible or search.infeasible
    res.evaluations = search.evaluations
    return res


# -- assembling trees ---------------------------------------------------------

def _leaf_stats(table, s2w, idx):
    return (float(subset_delta(table.w[idx], table.phi[idx], table.eta2[idx]).sum()),
            float(s2w[idx].sum()), float(table.w[idx].sum()))


def _assemble(table: EstimateTable, config: SearchConfig, root, leaf_arch: list, leaf_idx: list) -> tuple:
    """Build a TreeModel from a helper-style structure and final leaf decisions."""
    nodes: list = []
    leaves: list = []
    counter = iter(range(len(leaf_idx)))

    def build(nd):
        if isinstance(nd, _HLeaf):
            return ("leaf", next(counter))
        k = len(nodes)
        nodes.append(None)
        left = build(nd.left)
        right = build(nd.right)
        nodes[k] = Node(int(nd.var), float(nd.value), left, right)
        return ("node", k)

    build(root)
    label = 2
    labels = np.ones(len(table), dtype=int)
    for arch, idx in zip(leaf_arch, leaf_idx):
        if arch:
            pred = tuple(float(v) for v in table.w[idx] @ table.phi[idx] / table.w[idx].sum())
            leaves.append(Leaf(False, label, pred, int(idx.size), float(table.w[idx].sum())))
            labels[idx] = label
            label += 1
        else:
            leaves.append(Leaf(True, 1, None, int(idx.size), float(table.w[idx].sum())))
    return nodes, leaves, Partition(table.type_ids, labels, config.G)


def _single_leaf_fit(table: EstimateTable, config: SearchConfig) -> FitResult:
    s2w = table.w * resolve_sigma2(config.sigma2, table)
    idx = np.arange(len(table))
    delta, ign, _ = _leaf_stats(table, s2w, idx)
    arch = delta < ign and idx.size > config.min_leaf
    nodes, leaves, part = _assemble(table, config, _HLeaf(idx, arch, 0.0), [arch], [idx])
    bd = empirical_reward(table, part, config.reward_params())
    tree = TreeModel(tuple(nodes), tuple(leaves), config.depth,
                     {**_meta_of(config, table), "objective": bd.total, "epsilon": 0.0,
                      "helper_loss": -bd.total})
    return FitResult(tree, bd, 0.0, -bd.total, part, ("single_leaf",))


def _meta_of(config, table):
    return {
        "sigma2": float(config.sigma2) if np.isscalar(config.sigma2) else "per-type",
        "G": config.G, "S": config.splits, "min_leaf": config.min_leaf, "depth": config.depth,
        "split_rule": config.split_rule, "min_leaf_rule": config.min_leaf_rule,
        "variables": list(config.variables) if config.variables is not None else None,
        "outcome_names": list(table.outcome_names), "covariate_names": list(table.covariate_names),
    }


def fit_gaware_tree(table: EstimateTable, config: SearchConfig) -> FitResult:
    """Fit a generalizability-aware tree with at most G-1 archetype leaves."""
    if len(table) <= config.min_leaf:
        return _single_leaf_fit(table, config)
    helper = helper_tree(table, config)
    leaves = helper.leaves
    s2w = table.w * resolve_sigma2(config.sigma2, table)
    stats = [_leaf_stats(table, s2w, lf.idx) for lf in leaves]
    arch = [lf.archetype and lf.idx.size > 0 for lf in leaves]
    flags = ["infeasible_splits"] if helper.infeasible else []
    n_arch = sum(arch)
    if n_arch > config.G - 1:
        ranked = sorted((stats[k][0] - stats[k][1], k) for k in range(len(leaves)) if arch[k])
        keep = {k for _, k in ranked[:config.G - 1]}
        arch = [a and k in keep for k, a in enumerate(arch)]
        flags.append("truncated")
    # both sums run over leaves in the same order, so without truncation they agree exactly
    e_star = sum(st[0] if lf.archetype and lf.idx.size > 0 else st[1] for lf, st in zip(leaves, stats))
    e_hat = sum(st[0] if a else st[1] for a, st in zip(arch, stats))
    epsilon = e_hat - e_star
    nodes, tree_leaves, part = _assemble(table, config, helper.root, arch, [lf.idx for lf in leaves])
    bd = empirical_reward(table, part, config.reward_params())
    meta = {**_meta_of(config, table), "objective": bd.total, "epsilon": epsilon,
            "helper_loss": helper.loss}
    tree = TreeModel(tuple(nodes), tuple(tree_leaves), config.depth, meta)
    return FitResult(tree, bd, epsilon, helper.loss, part, tuple(flags))


# -- brute force ----------------------------------------------------------------

def brute_force_size(config: SearchConfig, n_vars: int) -> float:
    P = 2 ** config.depth
    return float(config.splits * n_vars) ** (P - 1) * 2.0 ** P


def _enumerate_trees(X, idx, depth, vars_, S, rule):
    """Yield (structure, leaves) for every full depth-``depth`` split tree."""
    if depth == 0:
        yield _HLeaf(idx, False, 0.0), [idx]
        return
    for j in vars_:
        x = X[idx, j]
        if idx.size:
            lo, hi = x.min(), x.max()
            if rule == "quantile":
                ts = np.quantile(x, [k / (S + 1) for k in range(1, S + 1)])
            else:
                ts = [lo + (hi - lo) * (k / (S + 1)) for k in range(1, S + 1)]
        else:
            ts = [0.0] * S
        for t in ts:
            go = x <= t
            lefts = list(_enumerate_trees(X, idx[go], depth - 1, vars_, S, rule))
            rights = list(_enumerate_trees(X, idx[~go], depth - 1, vars_, S, rule))
            for (ls, ll), (rs, rl) in itertools.product(lefts, rights):
                yield _HSplit(j, float(t), ls, rs), ll + rl


def brute_force_fit(table: EstimateTable, config: SearchConfig, limit: float = BRUTE_FORCE_LIMIT) -> FitResult:
    """Exhaustive optimum over every depth-L split tree and every leaf labeling.

    Labelings are restricted to at most G-1 archetype leaves, each holding more
    than ``min_leaf`` types. Only the default minimum-leaf rule is supported.
    """
    if config.min_leaf_rule != "force_ignorance":
        raise ValidationError("brute force supports only the force_ignorance minimum-leaf rule")
    vars_ = config.variables if config.variables is not None else tuple(range(table.n_covariates))
    size = brute_force_size(config, len(vars_))
    if size > limit:
        raise EnumerationTooLarge(size, limit)
    s2 = resolve_sigma2(config.sigma2, table)
    idx_all = np.arange(len(table))
    if len(table) == 1:
        return _single_leaf_fit(table, config)
    P = 2 ** config.depth
    masks = np.array(list(itertools.product((1, 0), repeat=P)), dtype=bool)
    best = None
    for structure, leaf_sets in _enumerate_trees(table.X, idx_all, config.depth, vars_, config.splits,
                                                 config.split_rule):
        delta = np.empty(P)
        ign = np.empty(P)
        ok = np.empty(P, dtype=bool)
        for k, members in enumerate(leaf_sets):
            # direct per-leaf computation, no prefix sums
            if members.size:
                wv = table.w[members]
                mean = wv @ table.phi[members] / wv.sum()
                delta[k] = float(np.sum(wv[:, None] * ((table.phi[members] - mean) ** 2 - table.eta2[members])))
            else:
                delta[k] = 0.0
            ign[k] = float(np.sum(s2[members] * table.w[members]))
            ok[k] = members.size > config.min_leaf
        feasible = (~masks | ok).all(axis=1) & (masks.sum(axis=1) <= config.G - 1)
        totals = np.where(masks, delta, ign).sum(axis=1)
        totals[~feasible] = np.inf
        k = int(np.argmin(totals))
        if best is None or totals[k] < best[0]:
            best = (float(totals[k]), structure, leaf_sets, masks[k])
    loss, structure, leaf_sets, mask = best
    arch = [bool(a) and s.size > 0 for a, s in zip(mask, leaf_sets)]
    nodes, leaves, part = _assemble(table, config, structure, arch, leaf_sets)
    bd = empirical_reward(table, part, config.reward_params())
    meta = {**_meta_of(config, table), "objective": bd.total, "epsilon": 0.0, "helper_loss": loss}
    return FitResult(TreeModel(tuple(nodes), tuple(leaves), config.depth, meta), bd, 0.0, loss, part,
                     ("brute_force",))
