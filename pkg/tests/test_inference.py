import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gaware.core import Partition
from gaware.errors import ValidationError
from gaware.estimates import SplitPair
from gaware.inference import (fit_out_of_sample, influence_terms, norm_ppf, prune_partition_set, single_test,
                              test_statistic as t_stat, variance_bound)
from gaware.tree import SearchConfig

from conftest import make_table, table_from
from oracles import gaussian_halves


def random_partitions(rng, table, G=4):
    a = Partition(table.type_ids, rng.integers(1, G + 1, size=len(table)), G)
    b = Partition(table.type_ids, rng.integers(1, G + 1, size=len(table)), G)
    return a, b


def test_norm_ppf_values():
    assert norm_ppf(0.5) == 0.0
    assert norm_ppf(0.975) == pytest.approx(1.959963984540054, abs=1e-14)
    assert norm_ppf(1e-10) == pytest.approx(-6.361340902404056, abs=1e-12)
    with pytest.raises(ValidationError):
        norm_ppf(1.0)


def test_identical_partitions():
    rng = np.random.default_rng(1)
    t = make_table(rng, 20)
    a, _ = random_partitions(rng, t)
    assert t_stat(t, a, a, 1.0) == 0.0
    assert np.all(influence_terms(t, a, a) == 0.0)
    rep = single_test(t, a, a, 1.0, 0.05)
    assert rep.degenerate and rep.retained and rep.v2_hat == 0.0


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2 ** 31))
def test_antisymmetry_and_nonnegative_variance(seed):
    rng = np.random.default_rng(seed)
    t = make_table(rng, 15)
    a, b = random_partitions(rng, t)
    assert t_stat(t, a, b, 0.8) == pytest.approx(-t_stat(t, b, a, 0.8), abs=1e-12)
    assert variance_bound(t, a, b) >= 0.0


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2 ** 31))
def test_group_centering_never_larger(seed):
    rng = np.random.default_rng(seed)
    t = make_table(rng, 25)
    a, b = random_partitions(rng, t)
    assert variance_bound(t, a, b, per_group=True) <= variance_bound(t, a, b) + 1e-12


def test_worse_candidate_has_positive_statistic():
    t = table_from([0.0] * 5 + [4.0] * 5, X=range(10))
    perfect = Partition(t.type_ids, [2] * 5 + [3] * 5, 3)
    ignorant = Partition(t.type_ids, [1] * 10, 3)
    assert t_stat(t, ignorant, perfect, 100.0) == pytest.approx(100.0)


def test_critical_value_and_retention_monotone_in_gamma():
    rng = np.random.default_rng(4)
    t = make_table(rng, 60)
    cands = [random_partitions(rng, t)[0] for _ in range(6)]
    ref = random_partitions(rng, t)[1]
    pair = SplitPair(t, t, ())
    previous, kept_before = np.inf, -1
    for gamma in (0.01, 0.05, 0.1, 0.3, 0.6):
        reps = [single_test(t, c, ref, 1.0, gamma) for c in cands]
        q = reps[0].critical_value
        assert q <= previous
        previous = q
        kept = sum(r.retained for r in reps)
        if kept_before >= 0:
            assert kept <= kept_before
        kept_before = kept
    with pytest.warns(UserWarning, match="non-independent"):
        _, flags = fit_out_of_sample(pair, SearchConfig(depth=1, splits=2, min_leaf=1, G=3))
    assert flags == ("non-independent halves",)


def test_reference_candidate_is_retained():
    rng = np.random.default_rng(5)
    pair = gaussian_halves(rng, np.repeat([0.0, 2.0], 50), 0.2)
    cfg = SearchConfig(depth=1, splits=3, min_leaf=1, G=3, sigma2=1.0)
    alpha_o, _ = fit_out_of_sample(pair, cfg)
    retained, reports = prune_partition_set(pair, [alpha_o], 0.1, cfg, alpha_o=alpha_o)
    assert len(retained) == 1 and reports[0].degenerate and reports[0].t_hat == 0.0
    with pytest.raises(ValidationError):
        prune_partition_set(pair, [], 0.1, cfg)


def test_bonferroni_level():
    rng = np.random.default_rng(6)
    pair = gaussian_halves(rng, np.zeros(40), 0.2)
    cfg = SearchConfig(depth=1, splits=2, min_leaf=1, G=3)
    t = pair.main
    cands = [Partition(t.type_ids, np.full(40, g), 3) for g in (1, 2, 3)]
    _, reports = prune_partition_set(pair, cands, 0.3, cfg, names=["a", "b", "c"])
    assert [r.gamma_star for r in reports] == [pytest.approx(0.1)] * 3
    assert [r.candidate for r in reports] == ["a", "b", "c"]


def test_out_of_sample_fit_recovers_true_partition():
    rng = np.random.default_rng(17)
    n = 2000
    x = np.linspace(0, 1, n)
    phi = np.where(x <= 0.5, 0.0, 1.0)
    truth = (x > 0.5).astype(int)
    cfg = SearchConfig(depth=1, splits=5, min_leaf=10, G=3, sigma2=1.0, split_rule="quantile")
    hits = 0
    for _ in range(200):
        pair = gaussian_halves(rng, phi, 1.0, X=x)
        alpha_o, _ = fit_out_of_sample(pair, cfg)
        lab = alpha_o.labels
        hits += bool(np.all(lab > 1) and np.array_equal(lab == lab[-1], truth == 1))
    assert hits >= 180


def test_power_grows_with_types():
    rng = np.random.default_rng(23)
    cfg = SearchConfig(depth=1, splits=3, min_leaf=5, G=3, sigma2=0.35, split_rule="quantile")
    rates = []
    for n in (250, 1000, 4000):
        x = np.linspace(0, 1, n)
        phi = np.where(x <= 0.5, 0.0, 1.0)
        rejections = 0
        for _ in range(60):
            pair = gaussian_halves(rng, phi, 2.0, X=x)
            ign = Partition(pair.main.type_ids, np.ones(n, dtype=int), 3)
            _, reps = prune_partition_set(pair, [ign], 0.1, cfg)
            rejections += not reps[0].retained
        rates.append(rejections / 60)
    assert rates[0] <= rates[1] <= rates[2]
    assert rates[2] > rates[0]
