import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gaware.core import Partition
from gaware.errors import EnumerationTooLarge, ValidationError
from gaware.reward import RewardParams, empirical_reward
from gaware.tree import (SearchConfig, brute_force_fit, evaluation_count, fit_gaware_tree, helper_tree,
                         split_values)

from conftest import make_table, table_from
from oracles import corner_design, least_squares_tree


def test_split_values_exclude_endpoints():
    assert split_values(np.array([0.0, 6.0]), 5).tolist() == [1.0, 2.0, 3.0, 4.0, 5.0]
    q = split_values(np.arange(11.0), 1, "quantile")
    assert q.tolist() == [5.0]


def test_separable_clusters():
    t = table_from([0.0, 0.0, 0.0, 5.0, 5.0, 5.0], X=[0, 1, 2, 10, 11, 12])
    h = helper_tree(t, SearchConfig(depth=1, splits=1, min_leaf=1, G=3, sigma2=100.0))
    assert h.loss == pytest.approx(0.0, abs=1e-12)
    assert [lf.archetype for lf in h.leaves] == [True, True]


def exhaustive_depth1(table, S, sigma2, min_leaf):
    """Minimum over every (variable, split, left label, right label) with unlimited archetypes."""
    best = np.inf
    for j in range(table.n_covariates):
        for t in split_values(np.sort(table.X[:, j]), S):
            go = table.X[:, j] <= t
            for la, ra in itertools.product((True, False), repeat=2):
                labels = np.ones(len(table), dtype=int)
                ok = True
                for mask, arch, g in ((go, la, 2), (~go, ra, 3)):
                    if arch and mask.any():
                        ok &= mask.sum() > min_leaf
                        labels[mask] = g
                if ok:
                    part = Partition(table.type_ids, labels, 3)
                    best = min(best, -empirical_reward(table, part, RewardParams(sigma2, 3)).total)
    return best


def test_outlier_goes_to_ignorance():
    t = table_from([0.0, 0.1, -0.1, 0.05, 0.0, 40.0], X=[0, 1, 2, 3, 4, 5])
    cfg = SearchConfig(depth=1, splits=3, min_leaf=0 + 1, G=3, sigma2=0.1)
    h = helper_tree(t, cfg)
    assert h.loss == pytest.approx(exhaustive_depth1(t, 3, 0.1, 1), abs=1e-12)
    fit = fit_gaware_tree(t, cfg)
    assert fit.partition.labels[-1] == 1


def test_depth2_helper_matches_brute_force():
    rng = np.random.default_rng(99)
    t = make_table(rng, 10, r=2)
    cfg = SearchConfig(depth=2, splits=3, min_leaf=1, G=5, sigma2=0.4)
    assert helper_tree(t, cfg).loss == pytest.approx(-brute_force_fit(t, cfg).objective, abs=1e-10)


def small_instance(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(2, 13))
    r = int(rng.integers(1, 3))
    L = int(rng.integers(1, 3))
    t = make_table(rng, n, r=r, discrete=bool(seed % 2))
    cfg = SearchConfig(depth=L, splits=int(rng.integers(1, 4)), min_leaf=int(rng.integers(1, 3)),
                       G=int(2 ** L + 1 + rng.integers(0, 2)), sigma2=float(rng.uniform(0.05, 2.0)),
                       split_rule="quantile" if seed % 3 == 0 else "equal")
    return t, cfg


@settings(max_examples=80, deadline=None)
@given(st.integers(0, 2 ** 31))
def test_exact_when_budget_covers_leaves(seed):
    t, cfg = small_instance(seed)
    fit = fit_gaware_tree(t, cfg)
    assert fit.epsilon == 0.0
    assert fit.objective == pytest.approx(brute_force_fit(t, cfg).objective, abs=1e-10)
    assert fit.tree.validate(t) == []


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2 ** 31))
def test_epsilon_bounds_true_gap(seed):
    rng = np.random.default_rng(seed)
    t = make_table(rng, int(rng.integers(6, 13)), r=2)
    cfg = SearchConfig(depth=2, splits=2, min_leaf=1, G=int(rng.integers(2, 4)), sigma2=float(rng.uniform(0.1, 2)))
    fit = fit_gaware_tree(t, cfg)
    best = brute_force_fit(t, cfg)
    gap = best.objective - fit.objective
    assert fit.epsilon >= 0.0
    assert gap >= -1e-12
    assert fit.epsilon >= gap - 1e-10
    assert fit.tree.validate(t) == []


def test_twelve_type_instance_epsilon():
    rng = np.random.default_rng(2024)
    t = make_table(rng, 12, r=2, eta_scale=0.1)
    cfg = SearchConfig(depth=2, splits=2, min_leaf=1, G=3, sigma2=1.0)
    fit, best = fit_gaware_tree(t, cfg), brute_force_fit(t, cfg)
    assert fit.epsilon == pytest.approx(-fit.objective - fit.helper_loss, abs=1e-12)
    assert 0.0 <= best.objective - fit.objective <= fit.epsilon + 1e-12


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2 ** 31))
def test_no_abstention_limit_is_least_squares(seed):
    rng = np.random.default_rng(seed)
    t = make_table(rng, int(rng.integers(4, 11)), r=2)
    L, S, n_min = int(rng.integers(1, 3)), int(rng.integers(1, 4)), 1
    cfg = SearchConfig(depth=L, splits=S, min_leaf=n_min, G=2 ** L + 1, sigma2=1e9)
    sse, fitted = least_squares_tree(t, L, S, n_min)
    fit = fit_gaware_tree(t, cfg)
    if not np.isfinite(sse):
        return
    assert fit.breakdown.ignorance_mass == 0.0
    assert np.max(np.abs(fit.tree.predict(t.X) - fitted)) < 1e-10


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2 ** 31))
def test_ignorance_mass_monotone_in_sigma2(seed):
    t, cfg = small_instance(seed)
    masses = [brute_force_fit(t, cfg.with_(sigma2=s)).breakdown.ignorance_mass for s in np.linspace(0.01, 3, 10)]
    assert all(b <= a + 1e-12 for a, b in zip(masses, masses[1:]))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2 ** 31), st.floats(-50, 50))
def test_location_shift_keeps_partition(seed, c):
    t, cfg = small_instance(seed)
    shifted = table_from(t.phi + c, w=t.w, eta2=t.eta2, X=t.X)
    a, b = fit_gaware_tree(t, cfg), fit_gaware_tree(shifted, cfg)
    assert a.objective == pytest.approx(b.objective, abs=1e-9)


@pytest.mark.parametrize("L, S, r", [(1, 1, 1), (1, 5, 3), (2, 2, 2), (2, 3, 3), (3, 2, 2)])
def test_evaluation_count_formula(L, S, r):
    rng = np.random.default_rng(L * 100 + S * 10 + r)
    # continuous covariates and a wide table keep every scope non-empty
    t = make_table(rng, 400, r=r)
    h = helper_tree(t, SearchConfig(depth=L, splits=S, min_leaf=1, G=3))
    assert h.evaluations == evaluation_count(L, S, r)


def test_ignorance_rows_get_no_prediction():
    t = table_from([0.0, 0.0, 0.0, 30.0], X=[0, 1, 2, 3])
    fit = fit_gaware_tree(t, SearchConfig(depth=1, splits=1, min_leaf=1, G=3, sigma2=0.5))
    pred = fit.tree.predict(t.X)[:, 0]
    ign = fit.partition.labels == 1
    assert ign.any() and np.all(np.isnan(pred[ign])) and np.all(np.isfinite(pred[~ign]))


def test_small_table_single_leaf():
    t = table_from([0.0, 1.0, 2.0])
    fit = fit_gaware_tree(t, SearchConfig(depth=2, splits=2, min_leaf=5, G=3, sigma2=10.0))
    assert "single_leaf" in fit.flags and fit.breakdown.ignorance_mass == 1.0


def test_discard_split_rule_reports_infeasibility():
    t = table_from([0.0, 1.0, 2.0, 3.0], X=[0, 1, 2, 3])
    cfg = SearchConfig(depth=1, splits=1, min_leaf=3, G=3, sigma2=10.0, min_leaf_rule="discard_split")
    fit = fit_gaware_tree(t, cfg)
    assert "infeasible_splits" in fit.flags
    assert fit.breakdown.ignorance_mass == 1.0
    # the default rule only forces the small side into ignorance
    assert "infeasible_splits" not in fit_gaware_tree(t, cfg.with_(min_leaf_rule="force_ignorance")).flags


def test_truncation_keeps_best_archetypes():
    t = table_from([0.0, 0.0, 5.0, 5.0, 10.0, 10.0, 15.0, 15.0], X=range(8))
    fit = fit_gaware_tree(t, SearchConfig(depth=2, splits=3, min_leaf=1, G=3, sigma2=100.0))
    assert "truncated" in fit.flags
    assert fit.breakdown.n_archetypes == 2 and fit.epsilon > 0
    assert fit.tree.validate(t) == []


def test_brute_force_guard():
    t = table_from(np.zeros(4), X=np.zeros((4, 3)))
    with pytest.raises(EnumerationTooLarge):
        brute_force_fit(t, SearchConfig(depth=3, splits=5, G=9))
    with pytest.raises(ValidationError):
        brute_force_fit(t, SearchConfig(depth=1, splits=1, min_leaf_rule="discard_split"))


def test_single_type_brute_force():
    t = table_from([1.0])
    fit = brute_force_fit(t, SearchConfig(depth=1, splits=1, G=3, sigma2=1.0, min_leaf=1))
    assert len(fit.tree.leaves) == 1 or fit.breakdown.ignorance_mass in (0.0, 1.0)


def test_contaminated_corner_recovered():
    rng = np.random.default_rng(606)
    hits = 0
    for _ in range(100):
        table, _, corner = corner_design(rng, n=400, scale=3.0)
        fit = fit_gaware_tree(table, SearchConfig(depth=2, splits=5, min_leaf=5, G=4, sigma2=1.0))
        ign = fit.partition.labels == 1
        hits += bool(ign[corner].mean() >= 0.9)
    assert hits >= 95
