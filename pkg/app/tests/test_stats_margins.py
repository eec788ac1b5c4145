import numpy as np
import pandas as pd
import pytest
from scipy import special

from app.core.exceptions import InsufficientDataError, UnknownRegressorError
from app.schemas.fit import FitResult
from app.stats.design import DesignMatrix
from app.stats.linear import ols_fit
from app.stats.margins import (
    bivariate_quadratic,
    grid_from_step,
    interaction_design,
    marginal_predictions,
    prediction_rows,
)

NAMES = ["const", "d", "d_sq", "x"]
COEFFICIENTS = {"const": 1.0, "d": 2.0, "d_sq": -2.0, "x": 0.5}


def fit(link: str = "identity", model: str = "ols", baseline_offset: float = 0.0, cov=None) -> FitResult:
    cov = np.zeros((4, 4)) if cov is None else cov
    return FitResult(
        model=model,
        link=link,
        names=NAMES,
        coefficients=COEFFICIENTS,
        std_errors=dict.fromkeys(NAMES, 0.0),
        statistics=dict.fromkeys(NAMES, 0.0),
        p_values=dict.fromkeys(NAMES, 1.0),
        covariance=cov.tolist(),
        n_obs=100,
        regressor_means={"const": 1.0, "d": 0.3, "d_sq": 0.15, "x": 4.0},
        products={"d_sq": ["d", "d"]},
        baseline_offset=baseline_offset,
    )


def test_prediction_rows_rebuild_products():
    rows = prediction_rows(fit(), "d", [0.0, 0.5, 1.0])

    assert rows[:, 0].tolist() == [1.0, 1.0, 1.0]
    assert rows[:, 1].tolist() == [0.0, 0.5, 1.0]
    assert rows[:, 2].tolist() == [0.0, 0.25, 1.0]
    assert rows[:, 3].tolist() == [4.0, 4.0, 4.0]


def test_prediction_rows_hold_values_fixed():
    rows = prediction_rows(fit(), "x", [1.0, 2.0], at={"d": 0.5})

    assert rows[:, 1].tolist() == [0.5, 0.5]
    assert rows[:, 2].tolist() == [0.25, 0.25]
    assert rows[:, 3].tolist() == [1.0, 2.0]


def test_identity_predictions():
    table = marginal_predictions(fit(), "d", [0.0, 0.5, 1.0])

    # 1 + 2d - 2d^2 + 0.5 * 4
    assert table["prediction"].tolist() == pytest.approx([3.0, 3.5, 3.0])
    assert (table["ci_low"] == table["prediction"]).all()


def test_log_link_with_offset():
    table = marginal_predictions(fit(link="log", model="negbin", baseline_offset=-1.0), "d", [0.5])

    assert table["linear_predictor"][0] == pytest.approx(2.5)
    assert table["prediction"][0] == pytest.approx(np.exp(2.5))


def test_logit_link_interval():
    cov = np.diag([0.0, 0.04, 0.0, 0.0])
    table = marginal_predictions(fit(link="logit", model="logit", cov=cov), "d", [1.0])
    p = special.expit(3.0)

    assert table["prediction"][0] == pytest.approx(p)
    assert table["se"][0] == pytest.approx(p * (1 - p) * 0.2)
    assert table["ci_high"][0] - table["prediction"][0] == pytest.approx(1.959964 * p * (1 - p) * 0.2, rel=1e-5)


@pytest.mark.parametrize("vary, at", [("nonsense", None), ("d", {"missing": 1.0})])
def test_unknown_regressor(vary, at):
    with pytest.raises(UnknownRegressorError):
        prediction_rows(fit(), vary, [0.0], at)


def test_grid_from_step():
    assert grid_from_step(0.25).tolist() == [0.0, 0.25, 0.5, 0.75, 1.0]
    assert grid_from_step(0.1, 0.2, 0.5).tolist() == [0.2, 0.3, 0.4, 0.5]


def test_interaction_design(rng):
    values = rng.uniform(size=10)
    X = DesignMatrix(X=np.column_stack([np.ones(10), values, values**2]), names=["const", "d_forbidden", "d_forbidden_sq"], y=rng.normal(size=10))
    flag = np.array([0, 1] * 5)
    extended = interaction_design(X, flag)

    assert extended.names[-3:] == ["leader", "leader_x_d_forbidden", "leader_x_d_forbidden_sq"]
    assert np.allclose(extended.column("leader_x_d_forbidden_sq"), flag * values**2)
    assert extended.products["leader_x_d_forbidden"] == ["leader", "d_forbidden"]

    with pytest.raises(InsufficientDataError):
        interaction_design(X, np.ones(10))
    with pytest.raises(ValueError):
        interaction_design(X, flag[:5])
    with pytest.raises(UnknownRegressorError):
        interaction_design(X, flag, base="d_closed")


def test_bivariate_quadratic_recovers_a_parabola(rng):
    x = rng.uniform(size=200)
    y = 1.0 + 4.0 * x - 4.0 * x**2 + rng.normal(scale=0.01, size=200)
    table = bivariate_quadratic(x, y, [0.0, 0.5, 1.0])

    assert table["prediction"].tolist() == pytest.approx([1.0, 2.0, 1.0], abs=0.01)
    assert (table["ci_low"] < table["prediction"]).all()


def test_quadratic_fit_feeds_predictions(rng):
    frame = pd.DataFrame({"d": rng.uniform(size=100)})
    frame["d_sq"] = frame["d"] ** 2
    frame["y"] = 2 * frame["d"] - frame["d_sq"] + rng.normal(scale=0.1, size=100)
    result = ols_fit(DesignMatrix.from_frame(frame, "y", ["d", "d_sq"], products={"d_sq": ["d", "d"]}))
    table = marginal_predictions(result, "d", [0.0, 1.0])

    b = result.coefficients
    assert table["prediction"][1] == pytest.approx(b["const"] + b["d"] + b["d_sq"])
