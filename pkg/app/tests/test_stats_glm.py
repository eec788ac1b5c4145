import math

import numpy as np
import pandas as pd
import pytest
from scipy import optimize, special, stats

from app.core.exceptions import NoEstimableGroupsError, SeparationError
from app.stats.design import DesignMatrix, standardizing_map
from app.stats.glm import (
    CLOSURE_REGRESSORS,
    fe_negbin_fit,
    logit_fit,
    logit_predict,
    matched_closure_sample,
    negbin_fit,
    negbin_loglike,
    poisson_fit,
)
from app.tests import example


def with_constant(X: np.ndarray, y: np.ndarray, names: list[str], groups=None) -> DesignMatrix:
    return DesignMatrix(np.column_stack([np.ones(len(y)), X]), ["const", *names], y, groups=groups)


def nb2_draw(rng: np.random.Generator, mu: np.ndarray, alpha: float) -> np.ndarray:
    if alpha == 0:
        return rng.poisson(mu)
    return rng.poisson(rng.gamma(1 / alpha, alpha * mu))


# ---------------------------------------------------------------- logit


def test_reference_closure_predictions():
    coefficients = example.CLOSURE_COEFFICIENTS
    observed = logit_predict(coefficients, {"observed": 1, "min_legs_weight": 1, "observed_x_min_legs_weight": 1})
    rewired = logit_predict(coefficients, {"observed": 0, "min_legs_weight": 1, "observed_x_min_legs_weight": 0})

    assert observed == pytest.approx(0.549, abs=0.002)
    assert rewired == pytest.approx(0.133, abs=0.002)


def test_reference_odds_ratios():
    for name, ratio in example.CLOSURE_ODDS_RATIOS.items():
        assert math.exp(example.CLOSURE_COEFFICIENTS[name]) == pytest.approx(ratio, rel=1e-3, abs=1e-3)


def test_logit_matches_direct_maximization(rng):
    x = rng.normal(size=(500, 2))
    eta = -0.5 + x @ np.array([1.0, -0.7])
    y = (rng.random(500) < special.expit(eta)).astype(float)
    X = with_constant(x, y, ["a", "b"])
    fit = logit_fit(X)

    reference = optimize.minimize(
        lambda b: -np.sum(y * (X.X @ b) - np.logaddexp(0, X.X @ b)),
        np.zeros(3),
        jac=lambda b: -X.X.T @ (y - special.expit(X.X @ b)),
        method="BFGS",
        options={"gtol": 1e-10},
    )
    np.testing.assert_allclose(fit.params, reference.x, atol=1e-5)
    assert fit.odds_ratios["a"] == pytest.approx(math.exp(fit.coefficients["a"]))
    assert fit.chi_square == pytest.approx(2 * (fit.log_likelihood - fit.log_likelihood_null))
    assert 0 < fit.pseudo_r_squared < 1
    assert "odds_ratio.a" in fit.to_summary()


def test_logit_separation(rng):
    x = np.linspace(-1, 1, 40)
    y = (x > 0).astype(float)
    with pytest.raises(SeparationError):
        logit_fit(with_constant(x[:, None], y, ["x"]))
    with pytest.raises(SeparationError):
        logit_fit(with_constant(x[:, None], np.ones(40), ["x"]))


def triad_frame(w1, w2) -> pd.DataFrame:
    w2 = np.asarray(w2)
    return pd.DataFrame(
        {"session_id": "s", "i": "a", "j": "b", "k": "c", "w1": w1, "w2": w2, "w3": w2 + 1, "label": "closed"}
    )


def test_matched_closure_sample(rng):
    observed = triad_frame(rng.integers(0, 3, 30), rng.integers(1, 6, 30))
    rewired = triad_frame(rng.integers(0, 2, 100), rng.integers(1, 4, 100))
    X = matched_closure_sample(observed, rewired, seed=5)

    assert X.names == ["const", *CLOSURE_REGRESSORS]
    assert X.n == 60
    assert X.column("observed").sum() == 30
    np.testing.assert_array_equal(X.column("observed_x_min_legs_weight"), X.column("observed") * X.column("min_legs_weight"))
    np.testing.assert_array_equal(X.X, matched_closure_sample(observed, rewired, seed=5).X)


def test_closure_fit_recovers_interaction(rng):
    n = 4000
    observed_w = rng.integers(1, 8, n)
    rewired_w = rng.integers(1, 8, n)
    coefficients = example.CLOSURE_COEFFICIENTS
    p_obs = special.expit(coefficients["const"] + coefficients["observed"] + (coefficients["min_legs_weight"] + coefficients["observed_x_min_legs_weight"]) * np.log(observed_w))
    p_rew = special.expit(coefficients["const"] + coefficients["min_legs_weight"] * np.log(rewired_w))
    observed = triad_frame((rng.random(n) < p_obs).astype(int), np.log(observed_w))
    rewired = triad_frame((rng.random(n) < p_rew).astype(int), np.log(rewired_w))
    fit = logit_fit(matched_closure_sample(observed, rewired, seed=1))

    for name, value in coefficients.items():
        assert abs(fit.coefficients[name] - value) < 4 * fit.std_errors[name]


# ---------------------------------------------------------------- count models


def test_negbin_loglike_matches_scipy(rng):
    X = np.column_stack([np.ones(50), rng.normal(size=50)])
    beta = np.array([0.5, 0.3])
    y = nb2_draw(rng, np.exp(X @ beta), 0.8)
    mu = np.exp(X @ beta)
    for alpha in (0.8, 1e-3):
        reference = stats.nbinom.logpmf(y, 1 / alpha, 1 / (1 + alpha * mu)).sum()
        assert negbin_loglike(beta, alpha, X, y) == pytest.approx(reference, rel=1e-9)
    assert negbin_loglike(beta, 0.0, X, y) == pytest.approx(stats.poisson.logpmf(y, mu).sum(), rel=1e-12)
    assert negbin_loglike(beta, 1e-12, X, y) == pytest.approx(negbin_loglike(beta, 0.0, X, y), rel=1e-8)


def test_poisson_fit(rng):
    x = rng.normal(size=800)
    y = rng.poisson(np.exp(0.4 + 0.6 * x))
    fit = poisson_fit(with_constant(x[:, None], y, ["x"]))
    assert fit.coefficients["x"] == pytest.approx(0.6, abs=0.08)
    assert fit.link == "log"


def test_negbin_fit(rng):
    x = rng.normal(size=2000)
    y = nb2_draw(rng, np.exp(1.0 + 0.5 * x), 0.5)
    fit = negbin_fit(with_constant(x[:, None], y, ["x"]))

    assert fit.model == "negbin"
    assert fit.alpha == pytest.approx(0.5, abs=0.1)
    assert fit.alpha_pvalue < 0.01
    assert abs(fit.coefficients["x"] - 0.5) < 4 * fit.std_errors["x"]
    assert fit.chi_square > 0


def test_negbin_on_poisson_data_reaches_the_boundary(rng):
    x = rng.normal(size=1000)
    y = rng.poisson(np.exp(0.5 + 0.3 * x))
    fit = negbin_fit(with_constant(x[:, None], y, ["x"]))
    assert fit.alpha < 0.05
    assert fit.alpha_lr_statistic >= 0


def test_standardizing_map(rng):
    X = np.column_stack([np.ones(200), rng.integers(1990, 1996, 200), rng.poisson(300, 200)]).astype(float)
    Z = X @ standardizing_map(X, ["const", "year", "sessions"])
    np.testing.assert_allclose(Z[:, 0], 1.0)
    np.testing.assert_allclose(Z[:, 1:].mean(axis=0), 0.0, atol=1e-9)
    np.testing.assert_allclose(Z[:, 1:].std(axis=0), 1.0)

    Z = X[:, 1:] @ standardizing_map(X[:, 1:], ["year", "sessions"])
    np.testing.assert_allclose(np.sqrt(np.mean(Z**2, axis=0)), 1.0)


def test_negbin_converges_on_unscaled_regressors(rng):
    n = 1500
    year = rng.integers(1990, 1996, n).astype(float)
    sessions = rng.poisson(400, n).astype(float)
    y = nb2_draw(rng, np.exp(0.3 + 0.1 * (year - 1990) + 0.002 * sessions), 0.2)

    raw = negbin_fit(with_constant(np.column_stack([year, sessions]), y, ["year", "sessions"]))
    shifted = negbin_fit(with_constant(np.column_stack([year - 1990, sessions / 100]), y, ["year", "sessions"]))

    assert raw.converged
    assert raw.alpha == pytest.approx(shifted.alpha, rel=1e-4)
    assert raw.log_likelihood == pytest.approx(shifted.log_likelihood, rel=1e-8)
    assert raw.coefficients["year"] == pytest.approx(shifted.coefficients["year"], rel=1e-4)
    assert raw.coefficients["sessions"] * 100 == pytest.approx(shifted.coefficients["sessions"], rel=1e-4)
    assert raw.std_errors["year"] == pytest.approx(shifted.std_errors["year"], rel=1e-3)


def test_fe_negbin_invariant_to_regressor_scale(rng):
    groups = np.repeat(["a", "b", "c"], 60)
    year = rng.integers(1990, 1996, 180).astype(float)
    y = nb2_draw(rng, np.exp(np.where(groups == "a", 0.5, 1.0) + 0.2 * (year - 1990)), 0.3)
    raw = fe_negbin_fit(with_constant(year[:, None], y, ["year"], groups=groups))
    shifted = fe_negbin_fit(with_constant((year - 1990)[:, None], y, ["year"], groups=groups))
    assert raw.coefficients["year"] == pytest.approx(shifted.coefficients["year"], rel=1e-4)
    assert raw.log_likelihood == pytest.approx(shifted.log_likelihood, rel=1e-8)


@pytest.mark.slow
def test_negbin_recovery_over_replications():
    rng = np.random.default_rng(2024)
    beta = np.array([0.8, 0.4, -0.3])
    covered = rejected = 0
    for _ in range(200):
        x = rng.normal(size=(2000, 2))
        y = nb2_draw(rng, np.exp(beta[0] + x @ beta[1:]), 0.5)
        fit = negbin_fit(with_constant(x, y, ["a", "b"]))
        z = stats.norm.ppf(0.975)
        covered += sum(abs(fit.params[i] - beta[i]) <= z * fit.std_errors[name] for i, name in enumerate(fit.names))
        rejected += fit.alpha_pvalue < 0.05
    assert covered >= 0.9 * 200 * len(beta)
    assert rejected >= 0.95 * 200


@pytest.mark.slow
def test_alpha_test_size_on_poisson_data():
    rng = np.random.default_rng(77)
    rejected = 0
    for _ in range(200):
        x = rng.normal(size=(2000, 1))
        y = rng.poisson(np.exp(0.8 + 0.4 * x[:, 0]))
        rejected += negbin_fit(with_constant(x, y, ["a"])).alpha_pvalue < 0.05
    assert rejected <= 0.10 * 200


def conditional_loglike(beta: float, x: np.ndarray, y: np.ndarray, groups: np.ndarray) -> float:
    total = 0.0
    for g in np.unique(groups):
        lam = np.exp(beta * x[groups == g])
        yg = y[groups == g]
        total += (
            special.gammaln(lam.sum())
            + special.gammaln(yg.sum() + 1)
            - special.gammaln(yg.sum() + lam.sum())
            + np.sum(special.gammaln(lam + yg) - special.gammaln(lam) - special.gammaln(yg + 1))
        )
    return total


def test_fe_negbin_matches_grid_search(rng):
    groups = np.repeat(["a", "b"], 40)
    x = rng.normal(size=80)
    y = nb2_draw(rng, np.exp(np.where(groups == "a", 0.5, 1.5) + 0.6 * x), 0.4)
    fit = fe_negbin_fit(DesignMatrix(x[:, None], ["x"], y, groups=groups))

    coarse = np.arange(-3, 3, 0.01)
    best = coarse[np.argmax([conditional_loglike(b, x, y, groups) for b in coarse])]
    fine = np.arange(best - 0.01, best + 0.01, 1e-5)
    best = fine[np.argmax([conditional_loglike(b, x, y, groups) for b in fine])]

    assert fit.coefficients["x"] == pytest.approx(best, abs=1e-3)
    assert fit.log_likelihood == pytest.approx(conditional_loglike(fit.coefficients["x"], x, y, groups), rel=1e-9)
    assert set(fit.group_effects) == {"a", "b"}


def test_fe_negbin_drops_uninformative_groups(rng):
    groups = np.array(["a"] * 20 + ["b"] * 20 + ["solo"] + ["zero"] * 5)
    x = rng.normal(size=46)
    y = nb2_draw(rng, np.exp(1.0 + 0.5 * x), 0.3)
    y[groups == "zero"] = 0
    fit = fe_negbin_fit(with_constant(x[:, None], y.astype(float), ["x"], groups=groups))

    assert fit.n_groups == 2 and fit.n_groups_dropped == 2
    assert fit.n_obs == 40


def test_fe_negbin_needs_informative_groups():
    X = DesignMatrix(np.arange(4.0)[:, None], ["x"], np.zeros(4), groups=np.array(["a", "a", "b", "b"]))
    with pytest.raises(NoEstimableGroupsError):
        fe_negbin_fit(X)
