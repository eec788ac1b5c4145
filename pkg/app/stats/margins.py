"""Predictions at representative covariate values."""
from collections.abc import Callable, Mapping, Sequence

import numpy as np
import pandas as pd
from scipy import special, stats

from app.core.exceptions import InsufficientDataError, UnknownRegressorError
from app.schemas.fit import FitResult
from app.stats.design import CONSTANT, DesignMatrix
from app.stats.linear import ols_fit


def _base_names(fit: FitResult) -> set[str]:
    names = set(fit.names)
    for factors in fit.products.values():
        names.update(factors)
    return names - {CONSTANT}


def prediction_rows(
    fit: FitResult,
    vary: str,
    grid: Sequence[float],
    at: Mapping[str, float] | None = None,
) -> np.ndarray:
    """Regressor rows at the means, with `vary` on the grid and `at` held fixed.

    Product columns are rebuilt from their factors so squares and
    interactions follow the varied value.
    """
    known = _base_names(fit)
    for name in [vary, *(at or {})]:
        if name not in known:
            raise UnknownRegressorError(f"{name!r} is not a regressor of the {fit.model} fit")

    rows = np.empty((len(grid), len(fit.names)))
    for r, value in enumerate(grid):
        values = {name: fit.regressor_means.get(name, 0.0) for name in fit.names}
        values.update(at or {})
        values[vary] = float(value)
        for name, factors in fit.products.items():
            if name in (at or {}):
                continue
            values[name] = float(np.prod([values.get(f, fit.regressor_means.get(f, 0.0)) for f in factors]))
        values[CONSTANT] = 1.0
        rows[r] = [values[name] for name in fit.names]
    return rows


def marginal_predictions(
    fit: FitResult,
    vary: str,
    grid: Sequence[float],
    at: Mapping[str, float] | None = None,
    level: float = 0.95,
) -> pd.DataFrame:
    """Prediction and delta-method interval along `vary`, others at their means.

    The link of the fit decides the response scale: identity for least
    squares, exp for count models, logistic for logit. `baseline_offset`
    (the mean group effect of fixed-effects fits) enters the linear predictor.
    """
    rows = prediction_rows(fit, vary, grid, at)
    eta = rows @ fit.params + fit.baseline_offset
    se_eta = np.sqrt(np.clip(np.einsum("ij,jk,ik->i", rows, fit.cov, rows), 0, None))
    if fit.link == "log":
        prediction = np.exp(eta)
        se = prediction * se_eta
    elif fit.link == "logit":
        prediction = special.expit(eta)
        se = prediction * (1 - prediction) * se_eta
    else:
        prediction, se = eta, se_eta
    z = stats.norm.ppf(0.5 + level / 2)
    return pd.DataFrame(
        {
            "value": np.asarray(grid, dtype=float),
            "prediction": prediction,
            "ci_low": prediction - z * se,
            "ci_high": prediction + z * se,
            "linear_predictor": eta,
            "se": se,
        }
    )


def grid_from_step(step: float, low: float = 0.0, high: float = 1.0) -> np.ndarray:
    return np.round(np.linspace(low, high, int(round((high - low) / step)) + 1), 10)


def interaction_design(X: DesignMatrix, flag: Sequence[float], name: str = "leader", base: str = "d_forbidden") -> DesignMatrix:
    """X plus the flag and its products with `base` and `base`²."""
    flag = np.asarray(flag, dtype=float)
    if len(flag) != X.n:
        raise ValueError("flag must have one value per row")
    if flag.min() == flag.max():
        raise InsufficientDataError("flag does not vary")
    if base not in X.names:
        raise UnknownRegressorError(f"{base!r} is not a column of the design")
    values = X.column(base)
    return (
        X.add(name, flag)
        .add(f"{name}_x_{base}", flag * values, [name, base])
        .add(f"{name}_x_{base}_sq", flag * values**2, [name, base, base])
    )


def leader_interaction_fit(
    X: DesignMatrix,
    flag: Sequence[float],
    fitter: Callable[[DesignMatrix], FitResult],
    name: str = "leader",
    base: str = "d_forbidden",
) -> FitResult:
    """Base model with a flag plus its linear and quadratic interactions with `base`."""
    return fitter(interaction_design(X, flag, name, base))


def bivariate_quadratic(x: Sequence[float], y: Sequence[float], grid: Sequence[float], name: str = "x") -> pd.DataFrame:
    """Fitted y = b0 + b1 x + b2 x² with delta-method bands on `grid`."""
    x = np.asarray(x, dtype=float)
    design = DesignMatrix(
        X=np.column_stack([np.ones(len(x)), x, x**2]),
        names=[CONSTANT, name, f"{name}_sq"],
        y=np.asarray(y, dtype=float),
        products={f"{name}_sq": [name, name]},
    )
    return marginal_predictions(ols_fit(design), name, grid)
