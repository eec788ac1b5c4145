import itertools

import numpy as np
import pytest
from scipy import stats

from app.core.exceptions import InsufficientDataError
from app.stats.design import DesignMatrix
from app.stats.inference import ks_two_sample, permutation_pvalues, subsample_rows, wilcoxon_signed_rank
from app.stats.linear import ols_fit


def linear_design(rng, n=150, slope=1.0) -> DesignMatrix:
    x, z = rng.normal(size=(2, n))
    y = 0.5 + slope * x + rng.normal(size=n)
    return DesignMatrix(X=np.column_stack([np.ones(n), x, z]), names=["const", "x", "z"], y=y)


def test_permutation_strong_effect_has_minimal_p(rng):
    X = linear_design(rng, slope=2.0)
    result = permutation_pvalues(ols_fit, X, n_perm=99, seed=3)

    assert result.n_success == 99
    assert result.failures == 0
    assert result.exceedances["x"] == 0
    assert result.p_values["x"] == pytest.approx(1 / 100)
    assert 0 < result.p_values["z"] <= 1


def test_permutation_p_values_follow_exceedances(rng):
    X = linear_design(rng, slope=0.0)
    result = permutation_pvalues(ols_fit, X, n_perm=50, seed=11)

    for name, p in result.p_values.items():
        assert p == pytest.approx((1 + result.exceedances[name]) / (1 + result.n_success))


def test_permutation_is_deterministic(rng):
    X = linear_design(rng, slope=0.1)
    a = permutation_pvalues(ols_fit, X, n_perm=30, subsample=100, seed=5)
    b = permutation_pvalues(ols_fit, X, n_perm=30, subsample=100, seed=5)

    assert a.p_values == b.p_values
    assert a.n_obs == 100


def test_permutation_rejects_zero_permutations(rng):
    with pytest.raises(ValueError):
        permutation_pvalues(ols_fit, linear_design(rng), n_perm=0)


def test_stratified_subsample(rng):
    strata = np.array([0] * 30 + [1] * 5 + [2] * 20)
    rows = subsample_rows(len(strata), 10, rng, strata)

    assert np.all(np.diff(rows) > 0)
    assert np.bincount(strata[rows]).tolist() == [10, 5, 10]


def _enumerated_tails(differences):
    d = np.asarray(differences, dtype=float)
    d = d[d != 0]
    ranks = stats.rankdata(np.abs(d))
    observed = ranks[d > 0].sum()
    totals = np.array([ranks[list(signs)].sum() for signs in itertools.product([False, True], repeat=len(d))])
    return np.mean(totals >= observed - 1e-9), np.mean(totals <= observed + 1e-9)


@pytest.mark.parametrize(
    "differences",
    [
        [1.2, -0.4, 2.5, 3.1, -0.9, 0.7],
        [1, 1, -1, 2, 2, -2, 3, 0, 0],
        [-5, -4, -3, 1, -2, -6, -7],
        [0.5, 1.5, 2.5, 3.5, 4.5, -0.25, 5.5, 6.5, 7.5, -8.5],
        [2, 2, 2, -2],
    ],
)
def test_wilcoxon_exact_matches_sign_enumeration(differences):
    result = wilcoxon_signed_rank(differences)
    p_greater, p_less = _enumerated_tails(differences)

    assert result.exact
    assert result.p_greater == pytest.approx(p_greater, abs=1e-12)
    assert result.p_less == pytest.approx(p_less, abs=1e-12)
    assert result.p_value == pytest.approx(min(1.0, 2 * min(p_greater, p_less)), abs=1e-12)


def test_wilcoxon_random_small_samples(rng):
    for _ in range(25):
        n = int(rng.integers(3, 11))
        differences = np.round(rng.normal(0.3, 1.0, size=n), 1)
        if not np.any(differences != 0):
            continue
        p_greater, _ = _enumerated_tails(differences)
        assert wilcoxon_signed_rank(differences).p_greater == pytest.approx(p_greater, abs=1e-12)


def test_wilcoxon_large_sample_uses_normal_approximation(rng):
    differences = rng.normal(0.5, 1.0, size=200)
    result = wilcoxon_signed_rank(differences)
    reference = stats.wilcoxon(differences, alternative="greater", correction=False, method="approx")

    assert not result.exact
    assert result.n == 200
    assert result.z > 0
    assert result.p_greater == pytest.approx(reference.pvalue, rel=1e-6)


def test_wilcoxon_all_zero_differences():
    with pytest.raises(InsufficientDataError):
        wilcoxon_signed_rank([0.0, 0.0, 0.0])


def _ecdf_gap(a, b):
    points = np.concatenate([a, b])
    return max(abs(np.mean(a <= p) - np.mean(b <= p)) for p in points)


def test_ks_statistic_matches_exhaustive_gap(rng):
    for _ in range(100):
        a = np.round(rng.normal(size=int(rng.integers(1, 30))), 1)
        b = np.round(rng.normal(0.3, 1.2, size=int(rng.integers(1, 30))), 1)
        result = ks_two_sample(a, b)
        assert result.statistic == pytest.approx(_ecdf_gap(a, b), abs=1e-12)
        assert 0 <= result.p_value <= 1


def test_ks_identical_samples():
    result = ks_two_sample([1, 2, 3], [3, 2, 1])

    assert result.statistic == 0
    assert result.p_value == 1.0


def test_ks_empty_sample():
    with pytest.raises(InsufficientDataError):
        ks_two_sample([], [1.0])
