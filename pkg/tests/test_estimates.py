import numpy as np
import pytest

from gaware.core import RawStudy
from gaware.errors import ValidationError
from gaware.estimates import (ConstantOracle, FunctionOracle, KNNMean, RidgeCV, ZeroOracle, assign_types,
                              crossfit_outcome_models, dr_pseudo_outcomes, ipw_pseudo_outcomes, match_groups,
                              matched_variance_table, parametric_variance_table, split_for_inference)


def study_of(Y, D, o, X, env=None):
    n = len(Y)
    X = np.asarray(X, dtype=float).reshape(n, -1)
    return RawStudy(np.asarray(Y, dtype=float)[:, None], D, o, X, env or ("e",) * n, ("y",),
                    tuple(f"c{j}" for j in range(X.shape[1])))


class Arms:
    """Known arm means; the cross-fitter asks for arm 1 and then arm 0 in every fold."""

    def __init__(self, treated, control):
        self.pair = (treated, control)
        self.k = 0

    def fit(self, X, y):
        self.k += 1
        return self.pair[(self.k - 1) % 2].fit(X, y)


def linear_study(rng, n_types=40, units=6, noise=1.0, p=0.5):
    """Types on a 1-D grid; E[Y|X,D] = 1 + 2x + D(0.5 + x)."""
    x = np.repeat(np.linspace(0, 1, n_types), units)
    n = x.size
    D = (rng.uniform(size=n) < p).astype(float)
    Y = 1 + 2 * x + D * (0.5 + x) + noise * rng.standard_normal(n)
    return study_of(Y, D, np.full(n, p), x, tuple("ab"[i % 2] for i in range(n)))


def test_ipw_hand_example():
    t = ipw_pseudo_outcomes(study_of([2.0, 1.0], [1.0, 0.0], [0.5, 0.5], [0.0, 0.0]))
    assert t.phi[0, 0] == 1.0
    assert t.eta2[0, 0] == 9.0


def test_ipw_all_zero_outcomes():
    t = ipw_pseudo_outcomes(study_of([0.0] * 4, [1, 0, 1, 0], [0.3] * 4, [0, 0, 1, 1]))
    assert np.all(t.phi == 0) and np.all(t.eta2 == 0)


def test_ipw_small_types_listed():
    with pytest.raises(ValidationError, match="x1"):
        ipw_pseudo_outcomes(study_of([1.0, 2.0, 3.0], [1, 0, 1], [0.5] * 3, [0, 0, 1]))


def test_propensity_bounds():
    with pytest.raises(ValidationError, match="propensity"):
        study_of([1.0], [1.0], [1.0], [0.0])


def test_type_keys():
    s = study_of([1.0, 2.0, 3.0], [1, 0, 1], [0.5] * 3, [[1, 2], [0, 5], [1, 2]])
    assert assign_types(s, "covariates").tolist() == ["x1", "x0", "x1"]
    assert assign_types(s, "unit").tolist() == ["u0", "u1", "u2"]
    assert assign_types(s, ["a", "b", "a"]).tolist() == ["a", "b", "a"]
    with pytest.raises(ValidationError):
        assign_types(s, ["a"])


def test_ipw_unbiased_and_variance_calibrated():
    rng = np.random.default_rng(3)
    reps, units, p = 4000, 5, 0.4
    phis, etas = [], []
    for _ in range(reps):
        D = (rng.uniform(size=units) < p).astype(float)
        Y = 0.3 + D * 1.5 + rng.standard_normal(units)
        t = ipw_pseudo_outcomes(study_of(Y, D, [p] * units, [0.0] * units))
        phis.append(t.phi[0, 0])
        etas.append(t.eta2[0, 0])
    phis, etas = np.array(phis), np.array(etas)
    se = phis.std(ddof=1) / np.sqrt(reps)
    assert abs(phis.mean() - 1.5) < 3 * se
    # the mean variance estimate tracks the Monte Carlo variance of the estimate
    var_mc = phis.var(ddof=1)
    se_var = var_mc * np.sqrt(2 / (reps - 1))
    se_eta = etas.std(ddof=1) / np.sqrt(reps)
    assert abs(etas.mean() - var_mc) < 3 * np.hypot(se_var, se_eta)


def test_dr_with_zero_oracle_is_ipw(rng):
    s = linear_study(rng)
    a = ipw_pseudo_outcomes(s)
    b = dr_pseudo_outcomes(s, ZeroOracle(), folds=2)
    assert np.array_equal(a.phi, b.phi) and np.array_equal(a.eta2, b.eta2)


def test_dr_with_true_means_reduces_variance():
    rng = np.random.default_rng(11)
    truth1 = FunctionOracle(lambda X: 1 + 2 * X[:, 0] + 0.5 + X[:, 0])
    truth0 = FunctionOracle(lambda X: 1 + 2 * X[:, 0])

    ipw_var, dr_var = [], []
    for _ in range(200):
        s = linear_study(rng, n_types=20, units=8)
        ipw_var.append(ipw_pseudo_outcomes(s).eta2.mean())
        dr_var.append(dr_pseudo_outcomes(s, Arms(truth1, truth0), folds=2).eta2.mean())
    assert np.mean(dr_var) < np.mean(ipw_var)


def test_crossfit_fallback_warns():
    class Broken:
        def fit(self, X, y):
            raise np.linalg.LinAlgError("singular")

    rng = np.random.default_rng(0)
    with pytest.warns(UserWarning, match="fell back"):
        cf = crossfit_outcome_models(linear_study(rng, 5, 4), Broken(), folds=2)
    assert cf.fallbacks > 0


def test_ridge_and_knn_recover_linear_signal():
    rng = np.random.default_rng(5)
    X = rng.uniform(size=(300, 2))
    y = 2 * X[:, 0] - X[:, 1] + 0.05 * rng.standard_normal(300)
    Z = rng.uniform(size=(50, 2))
    target = 2 * Z[:, 0] - Z[:, 1]
    assert np.max(np.abs(RidgeCV().fit(X, y)(Z) - target)) < 0.1
    assert np.mean(np.abs(KNNMean(10).fit(X, y)(Z) - target)) < 0.15
    assert np.all(ConstantOracle().fit(X, y)(Z) == y.mean())


def test_matching_exact_ties():
    X = np.array([[0.0], [1.0], [0.0], [1.0]])
    assert match_groups(X, 1) == [[0, 2], [1, 3]]


def test_matching_collinear_points():
    X = np.arange(6, dtype=float)[:, None]
    groups = match_groups(X, 2)
    assert groups == [[0, 1, 2], [3, 4, 5]]
    assert [float(np.median(X[g])) for g in groups] == [1.0, 4.0]


def test_matching_is_a_partition(rng):
    X = rng.integers(0, 3, size=(37, 2)).astype(float)
    groups = match_groups(X, 3)
    flat = sorted(u for g in groups for u in g)
    assert flat == list(range(37))
    assert all(len(g) >= 4 for g in groups)


def test_matched_table_zero_variance_groups():
    X = [0.0, 0.0, 1.0, 1.0]
    s = study_of([2.0, 2.0, 3.0, 3.0], [1, 1, 1, 1], [0.5] * 4, X)
    t = matched_variance_table(s, ZeroOracle(), folds=2, match_size=1)
    assert len(t) == 2 and np.all(t.eta2 == 0)
    assert t.X[:, 0].tolist() == [0.0, 1.0]


def test_matched_small_environment_kept_whole():
    s = study_of([1.0, 2.0, 3.0, 4.0, 5.0, 6.0], [1, 0, 1, 0, 1, 0], [0.5] * 6, [0, 1, 2, 3, 4, 5],
                 env=("a", "a", "a", "a", "b", "b"))
    with pytest.warns(UserWarning, match="one group"):
        t = matched_variance_table(s, ZeroOracle(), folds=2, match_size=3)
    assert t.type_ids == ("a-g00000", "b-g00000")
    assert t.provenance["small_environments"] == ["b"]


def test_parametric_zero_noise_with_true_oracle():
    x = np.repeat(np.linspace(0, 1, 10), 4)
    D = np.tile([1.0, 0.0], 20)
    Y = 1 + x + D * x
    s = study_of(Y, D, [0.5] * 40, x)
    oracle = Arms(FunctionOracle(lambda X: 1 + 2 * X[:, 0]), FunctionOracle(lambda X: 1 + X[:, 0]))
    t = parametric_variance_table(s, oracle, folds=2, key="covariates")
    assert np.max(t.eta2) < 1e-28   # rounding residue only


def test_parametric_constant_variance_model_is_pooled_mean():
    rng = np.random.default_rng(9)
    s = linear_study(rng, n_types=10, units=4)
    off = parametric_variance_table(s, ZeroOracle(), folds=2, model_variance=False, key="unit")
    on = parametric_variance_table(s, ZeroOracle(), folds=2, model_variance=True, key="unit",
                                   variance_oracle=ConstantOracle())
    env = np.array(s.env)
    for e in ("a", "b"):
        m = env == e
        assert np.allclose(on.eta2[m], off.eta2[m].mean(), rtol=1e-12)


def test_parametric_homoskedastic_mean_variance():
    rng = np.random.default_rng(21)
    means, truth = [], 1 / 0.5 + 1 / 0.5   # noise var 1 in each arm, p = 0.5
    for _ in range(300):
        n = 200
        D = (rng.uniform(size=n) < 0.5).astype(float)
        Y = rng.standard_normal(n)
        s = study_of(Y, D, [0.5] * n, rng.uniform(size=n))
        t = parametric_variance_table(s, ConstantOracle(), folds=2, model_variance=True, key="unit")
        means.append(t.eta2.mean())   # one unit per type
    assert abs(np.mean(means) - truth) < 0.1 * truth


def test_split_for_inference():
    s = study_of(np.arange(11.0), [1, 0] * 5 + [1], [0.5] * 11, [0] * 4 + [1] * 3 + [2] * 4)
    pair = split_for_inference(s, seed=4)
    assert pair.excluded == ("x1",)
    assert pair.main.type_ids == pair.holdout.type_ids == ("x0", "x2")
    assert np.array_equal(pair.main.w, pair.holdout.w)
    again = split_for_inference(s, seed=4)
    assert again.main.equals(pair.main) and again.holdout.equals(pair.holdout)


def test_split_halves_uncorrelated_under_null():
    rng = np.random.default_rng(8)
    a, b = [], []
    for _ in range(1000):
        n = 8
        D = np.tile([1.0, 0.0], 4)
        s = study_of(rng.standard_normal(n), D, [0.5] * n, [0.0] * n)
        pair = split_for_inference(s, seed=int(rng.integers(1 << 30)))
        a.append(pair.main.phi[0, 0])
        b.append(pair.holdout.phi[0, 0])
    r = np.corrcoef(a, b)[0, 1]
    assert abs(r) < 3 / np.sqrt(1000)
