"""Least-squares estimators and descriptive companions."""
import logging
from collections.abc import Sequence

import numpy as np
import pandas as pd
from scipy import stats

from app.core.exceptions import InsufficientDataError, NoEstimableGroupsError
from app.schemas.fit import FitResult
from app.stats.design import CONSTANT, DesignMatrix, check_rank, coefficient_table, invert

logger = logging.getLogger(__name__)


def _least_squares(X: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, np.ndarray, float]:
    beta = np.linalg.lstsq(X, y, rcond=None)[0]
    resid = y - X @ beta
    return beta, resid, float(resid @ resid)


def ols_fit(X: DesignMatrix) -> FitResult:
    """Classical OLS with t-test p-values, R² and the overall F test."""
    check_rank(X.X, X.names)
    n, k = X.n, X.k
    df_resid = n - k
    if df_resid < 1:
        raise InsufficientDataError(f"{n} rows leave no residual degrees of freedom for {k} coefficients")

    beta, resid, ssr = _least_squares(X.X, X.y)
    sigma2 = ssr / df_resid
    cov = sigma2 * invert(X.X.T @ X.X)

    centred = X.y - X.y.mean() if X.has_constant else X.y
    sst = float(centred @ centred)
    r2 = 1.0 - ssr / sst if sst > 0 else float("nan")
    df_model = k - 1 if X.has_constant else k
    adj_r2 = 1.0 - (1.0 - r2) * (n - (1 if X.has_constant else 0)) / df_resid
    f_stat = f_p = None
    if df_model > 0 and sst > 0:
        f_stat = ((sst - ssr) / df_model) / sigma2 if sigma2 > 0 else float("inf")
        f_p = float(stats.f.sf(f_stat, df_model, df_resid))
    ll = -0.5 * n * (np.log(2 * np.pi) + np.log(ssr / n) + 1) if ssr > 0 else float("inf")

    return FitResult(
        model="ols",
        link="identity",
        outcome=X.outcome,
        names=list(X.names),
        covariance=cov.tolist(),
        n_obs=n,
        log_likelihood=float(ll),
        r_squared=float(r2),
        adj_r_squared=float(adj_r2),
        f_statistic=f_stat,
        f_pvalue=f_p,
        regressor_means=X.means(),
        products=dict(X.products),
        **coefficient_table(X.names, beta, cov, df_resid),
    )


def _drop_singletons(X: DesignMatrix) -> tuple[DesignMatrix, int]:
    labels = pd.Series(X.groups)
    sizes = labels.map(labels.value_counts())
    keep = (sizes > 1).to_numpy()
    dropped = int(labels[~keep].nunique())
    return X.take(np.flatnonzero(keep)), dropped


def fe_ols_fit(X: DesignMatrix) -> FitResult:
    """Within estimator with one fixed effect per group.

    Singleton groups are absorbed perfectly and dropped; regressors that are
    constant within every group are dropped with a warning. Group effects are
    the group means of y - Xβ.
    """
    if X.groups is None:
        raise ValueError("fixed effects need group labels")
    X = X.drop([CONSTANT]) if X.has_constant else X
    X, dropped_groups = _drop_singletons(X)
    if X.n == 0:
        raise NoEstimableGroupsError("every group is a singleton")

    groups = pd.Series(X.groups)
    frame = pd.DataFrame(X.X, columns=X.names)
    X_within = (frame - frame.groupby(groups.values).transform("mean")).to_numpy()
    y_within = X.y - pd.Series(X.y).groupby(groups.values).transform("mean").to_numpy()

    scale = np.linalg.norm(X.X, axis=0)
    constant_within = np.linalg.norm(X_within, axis=0) <= 1e-10 * np.maximum(scale, 1.0)
    dropped_columns = [name for name, flat in zip(X.names, constant_within) if flat]
    if dropped_columns:
        logger.warning("Dropping regressors constant within groups: %s", ", ".join(dropped_columns))
    names = [name for name, flat in zip(X.names, constant_within) if not flat]
    if not names:
        raise NoEstimableGroupsError("no regressor varies within groups")
    X_within = X_within[:, ~constant_within]
    raw = X.X[:, ~constant_within]
    check_rank(X_within, names)

    n, k, n_groups = X.n, len(names), int(groups.nunique())
    df_resid = n - k - n_groups
    if df_resid < 1:
        raise InsufficientDataError(f"{n} rows, {k} slopes and {n_groups} groups leave no degrees of freedom")

    beta, _, ssr = _least_squares(X_within, y_within)
    sigma2 = ssr / df_resid
    cov = sigma2 * invert(X_within.T @ X_within)

    level = pd.Series(X.y - raw @ beta)
    effects = level.groupby(groups.values).mean()
    # within R²: the group means absorb n_groups degrees of freedom of the total
    sst = float(y_within @ y_within)
    r2 = 1.0 - ssr / sst if sst > 0 else float("nan")
    f_stat = (r2 / k) / ((1.0 - r2) / df_resid) if sst > 0 and r2 < 1 else float("nan")

    return FitResult(
        model="fe_ols",
        link="identity",
        outcome=X.outcome,
        names=names,
        covariance=cov.tolist(),
        n_obs=n,
        n_groups=n_groups,
        n_groups_dropped=dropped_groups,
        dropped_columns=dropped_columns,
        r_squared=float(r2),
        adj_r_squared=float(1.0 - (1.0 - r2) * (n - n_groups) / df_resid),
        f_statistic=float(f_stat),
        f_pvalue=float(stats.f.sf(f_stat, k, df_resid)) if np.isfinite(f_stat) else None,
        group_effects={str(g): float(v) for g, v in effects.items()},
        baseline_offset=float(level.mean()),
        regressor_means={name: float(raw[:, i].mean()) for i, name in enumerate(names)},
        products={name: f for name, f in X.products.items() if name in names},
        **coefficient_table(names, beta, cov, df_resid),
    )


def _r_squared(X: np.ndarray, y: np.ndarray, centred: bool = True) -> float:
    _, _, ssr = _least_squares(X, y)
    base = y - y.mean() if centred else y
    sst = float(base @ base)
    return 1.0 - ssr / sst if sst > 0 else float("nan")


def vif(X: DesignMatrix) -> pd.DataFrame:
    """VIF_j = 1 / (1 - R²_j) from regressing each column on all the others."""
    regressors = [name for name in X.names if name != CONSTANT]
    if len(regressors) < 2:
        raise InsufficientDataError("VIF needs at least two regressors")
    rows = []
    for name in regressors:
        others = [i for i, other in enumerate(X.names) if other != name]
        r2 = _r_squared(X.X[:, others], X.column(name), centred=X.has_constant)
        tolerance = 1.0 - r2
        flagged = not np.isfinite(r2) or tolerance < 1e-12
        value = float("inf") if flagged else 1.0 / tolerance
        if flagged:
            logger.warning("Regressor %s is collinear with the others; VIF is infinite", name)
        rows.append({"regressor": name, "vif": value, "r_squared": r2, "collinear": flagged})
    return pd.DataFrame(rows)


def power_sequence_r2(x: Sequence[float], y: Sequence[float], max_power: int = 8) -> pd.DataFrame:
    """R² gain from each added power of x, on standardised x."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if len(x) != len(y):
        raise ValueError("x and y must have the same length")
    if len(x) <= max_power + 1:
        raise InsufficientDataError(f"{len(x)} rows cannot support powers up to {max_power}")
    sd = x.std()
    if sd == 0:
        raise InsufficientDataError("x has zero variance")
    z = (x - x.mean()) / sd

    rows, previous = [], 0.0
    for power in range(1, max_power + 1):
        design = np.column_stack([z**p for p in range(power + 1)])
        rank = np.linalg.matrix_rank(design)
        if rank < design.shape[1]:
            logger.warning("Power %d design lost rank (%d of %d columns)", power, rank, design.shape[1])
        r2 = _r_squared(design, y)
        rows.append(
            {"power": power, "r_squared": r2, "improvement": r2 - previous, "rank_deficient": rank < design.shape[1]}
        )
        previous = r2
    return pd.DataFrame(rows)


def pearson_matrix(table: pd.DataFrame) -> pd.DataFrame:
    """Symmetric correlation matrix; zero-variance columns give NaN entries.

    The names of such columns are listed in `result.attrs["undefined"]`.
    """
    if len(table) < 2:
        raise InsufficientDataError("correlations need at least two rows")
    values = table.to_numpy(dtype=float)
    centred = values - values.mean(axis=0)
    norms = np.sqrt((centred**2).sum(axis=0))
    undefined = [name for name, norm in zip(table.columns, norms) if norm == 0]
    with np.errstate(divide="ignore", invalid="ignore"):
        unit = centred / norms
        corr = unit.T @ unit
    corr = np.clip((corr + corr.T) / 2, -1.0, 1.0)
    defined = norms > 0
    corr[np.diag_indices_from(corr)] = np.where(defined, 1.0, np.nan)
    if undefined:
        logger.warning("Correlations undefined for zero-variance columns: %s", ", ".join(undefined))
    result = pd.DataFrame(corr, index=table.columns, columns=table.columns)
    result.attrs["undefined"] = undefined
    return result


def categorical_means(
    x: Sequence[float],
    y: Sequence[float],
    edges: Sequence[float] = (0.0, 0.25, 0.5, 0.75, 1.0),
    level: float = 0.95,
) -> pd.DataFrame:
    """Mean of y per bin of x with t intervals; the last bin is closed."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    edges = np.asarray(edges, dtype=float)
    bins = np.clip(np.searchsorted(edges, x, side="right") - 1, 0, len(edges) - 2)
    inside = (x >= edges[0]) & (x <= edges[-1])
    rows = []
    for b in range(len(edges) - 1):
        values = y[inside & (bins == b)]
        n = len(values)
        mean = float(values.mean()) if n else float("nan")
        half = float("nan")
        if n > 1:
            half = float(stats.t.ppf(0.5 + level / 2, n - 1) * values.std(ddof=1) / np.sqrt(n))
        rows.append(
            {
                "bin": b,
                "low": edges[b],
                "high": edges[b + 1],
                "n": n,
                "mean": mean,
                "ci_low": mean - half,
                "ci_high": mean + half,
            }
        )
    return pd.DataFrame(rows)
