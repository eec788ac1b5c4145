import numpy as np
import pandas as pd
import pytest
from scipy import stats

from app.core.exceptions import NoEstimableGroupsError, RankDeficiencyError
from app.stats.design import DesignMatrix
from app.stats.linear import (
    categorical_means,
    fe_ols_fit,
    ols_fit,
    pearson_matrix,
    power_sequence_r2,
    vif,
)


def design(X, y, names, constant=True, groups=None) -> DesignMatrix:
    X = np.asarray(X, dtype=float)
    if constant:
        X = np.column_stack([np.ones(len(y)), X])
        names = ["const", *names]
    return DesignMatrix(X=X, names=list(names), y=y, groups=groups)


def test_ols_matches_linregress(rng):
    x = rng.normal(size=200)
    y = 1.5 - 2.0 * x + rng.normal(scale=0.5, size=200)
    fit = ols_fit(design(x[:, None], y, ["x"]))
    reference = stats.linregress(x, y)

    assert fit.coefficients["x"] == pytest.approx(reference.slope, rel=1e-10)
    assert fit.coefficients["const"] == pytest.approx(reference.intercept, rel=1e-10)
    assert fit.std_errors["x"] == pytest.approx(reference.stderr, rel=1e-8)
    assert fit.p_values["x"] == pytest.approx(reference.pvalue, abs=1e-12)
    assert fit.r_squared == pytest.approx(reference.rvalue**2, rel=1e-10)
    # one regressor: F = t^2
    assert fit.f_statistic == pytest.approx(fit.statistics["x"] ** 2, rel=1e-8)


def test_ols_rejects_collinear_columns(rng):
    x = rng.normal(size=50)
    with pytest.raises(RankDeficiencyError) as error:
        ols_fit(design(np.column_stack([x, 2 * x]), rng.normal(size=50), ["a", "b"]))
    assert set(error.value.columns) <= {"a", "b"}


def dummy_ols(X: np.ndarray, y: np.ndarray, groups: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    labels = np.unique(groups)
    dummies = (groups[:, None] == labels[None, :]).astype(float)
    full = np.column_stack([X, dummies])
    beta, *_ = np.linalg.lstsq(full, y, rcond=None)
    resid = y - full @ beta
    sigma2 = resid @ resid / (len(y) - full.shape[1])
    cov = sigma2 * np.linalg.inv(full.T @ full)
    k = X.shape[1]
    return beta[:k], np.sqrt(np.diag(cov)[:k])


def test_within_estimator_matches_dummy_regression(rng):
    for _ in range(100):
        n_groups = int(rng.integers(2, 8))
        sizes = rng.integers(2, 7, size=n_groups)
        groups = np.repeat(np.arange(n_groups), sizes).astype(str)
        n = len(groups)
        effects = rng.normal(size=n_groups)[np.repeat(np.arange(n_groups), sizes)]
        X = rng.normal(size=(n, 2)) + effects[:, None]
        y = X @ np.array([0.7, -1.2]) + 2 * effects + rng.normal(size=n)
        if n - 2 - n_groups < 1:
            continue

        fit = fe_ols_fit(design(X, y, ["a", "b"], groups=groups))
        beta, se = dummy_ols(X, y, groups)
        np.testing.assert_allclose([fit.coefficients["a"], fit.coefficients["b"]], beta, rtol=1e-8)
        np.testing.assert_allclose([fit.std_errors["a"], fit.std_errors["b"]], se, rtol=1e-8)


def test_fixed_effects_drop_singletons_and_invariant_columns(rng):
    groups = np.array(["a"] * 5 + ["b"] * 5 + ["c"])
    level = np.array([1.0] * 5 + [3.0] * 5 + [2.0])
    x = rng.normal(size=11)
    y = 2 * x + level + rng.normal(scale=0.1, size=11)
    fit = fe_ols_fit(design(np.column_stack([x, level]), y, ["x", "level"], groups=groups))

    assert fit.n_groups == 2 and fit.n_groups_dropped == 1
    assert fit.n_obs == 10
    assert fit.dropped_columns == ["level"]
    assert fit.names == ["x"]
    assert fit.group_effects["b"] - fit.group_effects["a"] == pytest.approx(2.0, abs=0.2)


def test_fixed_effects_need_repeated_groups(rng):
    groups = np.array(["a", "b", "c"])
    with pytest.raises(NoEstimableGroupsError):
        fe_ols_fit(design(rng.normal(size=(3, 1)), rng.normal(size=3), ["x"], groups=groups))


def test_vif_identity(rng):
    z = rng.normal(size=(300, 3))
    z[:, 2] += 0.8 * z[:, 0]
    X = design(z, rng.normal(size=300), ["a", "b", "c"])
    table = vif(X).set_index("regressor")

    for j, name in enumerate(["a", "b", "c"]):
        others = np.column_stack([np.ones(300), np.delete(z, j, axis=1)])
        beta, *_ = np.linalg.lstsq(others, z[:, j], rcond=None)
        resid = z[:, j] - others @ beta
        r2 = 1 - resid @ resid / ((z[:, j] - z[:, j].mean()) @ (z[:, j] - z[:, j].mean()))
        assert table.loc[name, "vif"] == pytest.approx(1 / (1 - r2), rel=1e-10)


def test_vif_flags_exact_collinearity(rng):
    a = rng.normal(size=40)
    table = vif(design(np.column_stack([a, 3 * a]), rng.normal(size=40), ["a", "b"]))
    assert table["collinear"].all()
    assert np.isinf(table["vif"]).all()


def test_power_sequence(rng):
    x = rng.uniform(0, 1, size=300)
    y = (x - 0.5) ** 2
    table = power_sequence_r2(x, y, max_power=4)

    assert list(table["power"]) == [1, 2, 3, 4]
    assert table.loc[1, "r_squared"] == pytest.approx(1.0, abs=1e-10)
    assert table.loc[1, "improvement"] > 0.9
    assert abs(table.loc[2, "improvement"]) < 1e-10


def test_pearson_matrix_flags_constant_columns(rng):
    table = pd.DataFrame({"a": rng.normal(size=20), "b": rng.normal(size=20), "flat": np.ones(20)})
    corr = pearson_matrix(table)

    assert corr.loc["a", "b"] == pytest.approx(np.corrcoef(table["a"], table["b"])[0, 1])
    assert corr.loc["a", "b"] == corr.loc["b", "a"]
    assert np.isnan(corr.loc["flat", "a"]) and np.isnan(corr.loc["flat", "flat"])
    assert corr.attrs["undefined"] == ["flat"]


def test_categorical_means():
    x = [0.0, 0.1, 0.3, 0.6, 0.8, 1.0]
    y = [1.0, 3.0, 5.0, 7.0, 9.0, 11.0]
    table = categorical_means(x, y)

    assert list(table["n"]) == [2, 1, 1, 2]
    assert list(table["mean"]) == [2.0, 5.0, 7.0, 10.0]
    half = stats.t.ppf(0.975, 1) * np.std([1.0, 3.0], ddof=1) / np.sqrt(2)
    assert table.loc[0, "ci_high"] == pytest.approx(2.0 + half)
    assert np.isnan(table.loc[1, "ci_low"])


def test_categorical_means_bin_edges():
    x = [0.0, 0.2499, 0.25, 0.5, 0.74, 0.75, 1.0, 1.2]
    table = categorical_means(x, np.arange(len(x), dtype=float))
    assert list(table["n"]) == [2, 1, 2, 2]
    assert list(table["mean"]) == [0.5, 2.0, 3.5, 5.5]


def test_fixed_effects_adjusted_r2_counts_absorbed_groups(rng):
    groups = np.repeat(np.arange(6), 5).astype(str)
    X = rng.normal(size=(30, 2))
    y = X @ np.array([0.5, -0.3]) + np.repeat(rng.normal(size=6), 5) + rng.normal(size=30)
    fit = fe_ols_fit(design(X, y, ["a", "b"], groups=groups))

    dummies = (groups[:, None] == np.unique(groups)[None, :]).astype(float)
    full = np.column_stack([X, dummies])
    resid = y - full @ np.linalg.lstsq(full, y, rcond=None)[0]
    within = y - pd.Series(y).groupby(groups).transform("mean").to_numpy()
    n, k, n_groups = 30, 2, 6
    expected = 1 - (resid @ resid / (n - k - n_groups)) / (within @ within / (n - n_groups))

    assert fit.r_squared == pytest.approx(1 - (resid @ resid) / (within @ within), rel=1e-9)
    assert fit.adj_r_squared == pytest.approx(expected, rel=1e-9)
    assert fit.adj_r_squared < fit.r_squared
