"""Maximum likelihood fitters: logit, Poisson, NB2 and conditional fixed-effects NB."""
import logging
import math
from collections.abc import Iterable, Mapping

import numpy as np
import pandas as pd
from scipy import optimize, special, stats

from app.core.exceptions import (
    ConvergenceError,
    InsufficientDataError,
    NoEstimableGroupsError,
    SeparationError,
)
from app.schemas.census import TriadObservation
from app.schemas.fit import FitResult
from app.services.triads import observations_frame
from app.stats.design import CONSTANT, DesignMatrix, check_rank, coefficient_table, invert, standardizing_map
from app.stats.optimize import OptimizeResult, newton_maximize, numeric_hessian

logger = logging.getLogger(__name__)

DEFAULT_MAX_ITER = 200
# lower bound of ln(alpha); reaching it means no detectable overdispersion
LOG_ALPHA_FLOOR = -20.0
LOG_ALPHA_CEILING = 10.0

CLOSURE_REGRESSORS = ["observed", "min_legs_weight", "observed_x_min_legs_weight"]


def _check_counts(y: np.ndarray) -> None:
    if (y < 0).any() or not np.allclose(y, np.round(y)):
        raise ValueError("outcome must be non-negative integers")


def _fit_statistics(ll: float, ll_null: float | None, k: int, has_constant: bool) -> dict:
    """McFadden pseudo-R² (plain and adjusted) and the model chi-square."""
    if ll_null is None or ll_null == 0:
        return {}
    df = k - 1 if has_constant else k
    chi_square = max(0.0, 2.0 * (ll - ll_null))
    return {
        "log_likelihood_null": ll_null,
        "pseudo_r_squared": 1.0 - ll / ll_null,
        "adj_pseudo_r_squared": 1.0 - (ll - k) / ll_null,
        "chi_square": chi_square,
        "chi_square_pvalue": float(stats.chi2.sf(chi_square, df)) if df > 0 else None,
    }


# ---------------------------------------------------------------- logit


def _logit_loglike(eta: np.ndarray, y: np.ndarray) -> float:
    return float(np.sum(y * eta - np.logaddexp(0.0, eta)))


def logit_fit(X: DesignMatrix, max_iter: int = DEFAULT_MAX_ITER, tol: float = 1e-10) -> FitResult:
    """Logistic regression by iteratively reweighted least squares with step halving."""
    y = X.y
    if not np.isin(y, (0.0, 1.0)).all():
        raise ValueError("logit outcome must be 0 or 1")
    if y.min() == y.max():
        raise SeparationError("outcome does not vary")
    check_rank(X.X, X.names)

    beta = np.zeros(X.k)
    eta = X.X @ beta
    ll = _logit_loglike(eta, y)
    converged = False
    iteration = 0
    for iteration in range(1, max_iter + 1):
        p = special.expit(eta)
        gradient = X.X.T @ (y - p)
        hessian = (X.X * (p * (1 - p))[:, None]).T @ X.X
        step = np.linalg.lstsq(hessian, gradient, rcond=None)[0]
        t = 1.0
        while True:
            candidate = beta + t * step
            candidate_eta = X.X @ candidate
            candidate_ll = _logit_loglike(candidate_eta, y)
            if candidate_ll >= ll or t < 1e-10:
                break
            t /= 2
        beta, eta, improvement, ll = candidate, candidate_eta, candidate_ll - ll, candidate_ll
        if ll > -1e-8 * X.n:
            raise SeparationError("regressors predict the outcome perfectly")
        if abs(improvement) < tol * (1.0 + abs(ll)) and np.max(np.abs(t * step)) < 1e-6:
            converged = True
            break

    p = special.expit(eta)
    gradient = X.X.T @ (y - p)
    if not converged:
        if np.max(np.abs(eta)) > 30:
            raise SeparationError("fitted probabilities saturate; outcome is quasi-separated")
        raise ConvergenceError(f"logit did not converge in {max_iter} iterations", float(np.linalg.norm(gradient)))

    hessian = (X.X * (p * (1 - p))[:, None]).T @ X.X
    cov = invert(hessian)
    share = y.mean()
    ll_null = X.n * (share * math.log(share) + (1 - share) * math.log(1 - share))
    logger.info("Logit converged in %d iterations, ll=%.4f", iteration, ll)
    return FitResult(
        model="logit",
        link="logit",
        outcome=X.outcome,
        names=list(X.names),
        covariance=cov.tolist(),
        n_obs=X.n,
        log_likelihood=ll,
        regressor_means=X.means(),
        products=dict(X.products),
        converged=True,
        iterations=iteration,
        gradient_norm=float(np.linalg.norm(gradient)),
        **_fit_statistics(ll, ll_null, X.k, X.has_constant),
        **coefficient_table(X.names, beta, cov),
    )


def logit_predict(coefficients: FitResult | Mapping[str, float], row: Mapping[str, float]) -> float:
    """Closure probability at `row`; the constant is 1 unless given."""
    if isinstance(coefficients, FitResult):
        coefficients = coefficients.coefficients
    eta = sum(value * (1.0 if name == CONSTANT and name not in row else row[name]) for name, value in coefficients.items())
    return float(special.expit(eta))


def matched_closure_sample(
    observed: pd.DataFrame | Iterable[TriadObservation],
    rewired: pd.DataFrame | Iterable[TriadObservation],
    seed: int,
) -> DesignMatrix:
    """Every observed triad plus as many rewired triads drawn without replacement.

    Outcome is closure (w1 > 0); regressors are the observed-origin flag, the
    minimal legs weight and their product.
    """
    observed = observed if isinstance(observed, pd.DataFrame) else observations_frame(observed)
    rewired = rewired if isinstance(rewired, pd.DataFrame) else observations_frame(rewired)
    n = len(observed)
    if n == 0:
        raise InsufficientDataError("no observed triads")
    if len(rewired) < n:
        raise InsufficientDataError(f"{len(rewired)} rewired triads cannot match {n} observed ones")

    rng = np.random.default_rng(seed)
    drawn = np.sort(rng.choice(len(rewired), size=n, replace=False))
    flag = np.concatenate([np.ones(n), np.zeros(n)])
    weight = np.concatenate([observed["w2"].to_numpy(float), rewired["w2"].to_numpy(float)[drawn]])
    closed = np.concatenate([observed["w1"].to_numpy() > 0, rewired["w1"].to_numpy()[drawn] > 0]).astype(float)
    return DesignMatrix(
        X=np.column_stack([np.ones(2 * n), flag, weight, flag * weight]),
        names=[CONSTANT, *CLOSURE_REGRESSORS],
        y=closed,
        outcome="closed",
        products={"observed_x_min_legs_weight": ["observed", "min_legs_weight"]},
    )


# ---------------------------------------------------------------- count models


def _poisson_loglike(beta: np.ndarray, X: np.ndarray, y: np.ndarray) -> float:
    eta = X @ beta
    return float(np.sum(y * eta - np.exp(eta) - special.gammaln(y + 1)))


def _poisson_start(X: DesignMatrix) -> np.ndarray:
    beta = np.zeros(X.k)
    if X.has_constant:
        beta[X.names.index(CONSTANT)] = math.log(max(X.y.mean(), 1e-8))
    return beta


def _maximize_poisson(Z: np.ndarray, y: np.ndarray, start: np.ndarray, max_iter: int) -> OptimizeResult:
    return newton_maximize(
        lambda b: _poisson_loglike(b, Z, y),
        lambda b: Z.T @ (y - np.exp(Z @ b)),
        start,
        hess=lambda b: -(Z * np.exp(Z @ b)[:, None]).T @ Z,
        max_iter=max_iter,
        scale=max(1.0, len(y)),
        gtol=1e-9,
    )


def poisson_fit(X: DesignMatrix, max_iter: int = DEFAULT_MAX_ITER) -> FitResult:
    """Poisson ML, maximized on the standardized design and mapped back."""
    _check_counts(X.y)
    check_rank(X.X, X.names)
    y = X.y
    A = standardizing_map(X.X, X.names)
    result = _maximize_poisson(X.X @ A, y, _poisson_start(X), max_iter)
    if not result.converged:
        raise ConvergenceError("Poisson fit did not converge", result.gradient_norm)
    cov = A @ invert(-result.hessian) @ A.T
    mean = y.mean()
    ll_null = float(np.sum(y * math.log(mean) - mean - special.gammaln(y + 1))) if mean > 0 else None
    return FitResult(
        model="poisson",
        link="log",
        outcome=X.outcome,
        names=list(X.names),
        covariance=cov.tolist(),
        n_obs=X.n,
        log_likelihood=result.value,
        regressor_means=X.means(),
        products=dict(X.products),
        converged=True,
        iterations=result.iterations,
        gradient_norm=result.gradient_norm,
        **_fit_statistics(result.value, ll_null, X.k, X.has_constant),
        **coefficient_table(X.names, A @ result.x, cov),
    )


def _log1p_table(alpha: float, y_max: int) -> tuple[np.ndarray, np.ndarray]:
    """Cumulative sums over j < y of log1p(alpha j) and of j / (1 + alpha j)."""
    j = np.arange(y_max, dtype=float)
    logs = np.concatenate([[0.0], np.cumsum(np.log1p(alpha * j))])
    ratios = np.concatenate([[0.0], np.cumsum(j / (1.0 + alpha * j))])
    return logs, ratios


def negbin_loglike(beta: np.ndarray, alpha: float, X: np.ndarray, y: np.ndarray) -> float:
    """NB2 log-likelihood, mean exp(Xβ) and variance μ + αμ²; Poisson at α = 0.

    Written so it stays accurate as α → 0:
    Σ_{j<y} log1p(αj) - lnΓ(y+1) + y ln μ - (y + 1/α) log1p(αμ).
    """
    y = np.asarray(y, dtype=float)
    eta = np.asarray(X) @ np.asarray(beta)
    mu = np.exp(eta)
    if alpha == 0:
        return float(np.sum(y * eta - mu - special.gammaln(y + 1)))
    counts = y.astype(np.int64)
    logs, _ = _log1p_table(alpha, int(counts.max(initial=0)))
    return float(
        np.sum(logs[counts] - special.gammaln(y + 1) + y * eta - (y + 1.0 / alpha) * np.log1p(alpha * mu))
    )


def _negbin_gradient(params: np.ndarray, X: np.ndarray, y: np.ndarray, counts: np.ndarray) -> np.ndarray:
    beta, log_alpha = params[:-1], params[-1]
    alpha = math.exp(log_alpha)
    mu = np.exp(X @ beta)
    grad_beta = X.T @ ((y - mu) / (1.0 + alpha * mu))
    _, ratios = _log1p_table(alpha, int(counts.max(initial=0)))
    d_alpha = np.sum(ratios[counts] + np.log1p(alpha * mu) / alpha**2 - (y + 1.0 / alpha) * mu / (1.0 + alpha * mu))
    return np.append(grad_beta, alpha * d_alpha)


def _negbin_score(beta: np.ndarray, alpha: float, X: np.ndarray, y: np.ndarray) -> np.ndarray:
    mu = np.exp(X @ beta)
    return X.T @ ((y - mu) / (1.0 + alpha * mu))


def _negbin_hessian(beta: np.ndarray, alpha: float, X: np.ndarray, y: np.ndarray) -> np.ndarray:
    mu = np.exp(X @ beta)
    weights = mu * (1.0 + alpha * y) / (1.0 + alpha * mu) ** 2
    return -(X * weights[:, None]).T @ X


def _maximize_negbin(Z: np.ndarray, y: np.ndarray, beta0: np.ndarray, max_iter: int, tol: float = 1e-10) -> OptimizeResult:
    """Alternate Newton steps in β at fixed α with a bounded search over ln α.

    β and α are orthogonal in NB2, so the cycle converges in a few rounds.
    It stops when a round gains less than `tol` relative to the log-likelihood.
    The returned Hessian is the joint one in (β, ln α).
    """
    counts = y.astype(np.int64)
    beta = np.asarray(beta0, dtype=float)
    mu0 = np.exp(Z @ beta)
    moment = np.mean(((y - mu0) ** 2 - mu0) / np.maximum(mu0, 1e-8) ** 2)
    log_alpha = math.log(min(max(moment, 1e-3), 10.0))
    value = negbin_loglike(beta, math.exp(log_alpha), Z, y)
    converged = False
    rounds = 0

    for rounds in range(1, max_iter + 1):
        alpha = math.exp(log_alpha)
        inner = newton_maximize(
            lambda b: negbin_loglike(b, alpha, Z, y),
            lambda b: _negbin_score(b, alpha, Z, y),
            beta,
            hess=lambda b: _negbin_hessian(b, alpha, Z, y),
            max_iter=max_iter,
            scale=max(1.0, len(y)),
            gtol=1e-9,
        )
        beta = inner.x
        profile = optimize.minimize_scalar(
            lambda a: -negbin_loglike(beta, math.exp(a), Z, y),
            bounds=(LOG_ALPHA_FLOOR, LOG_ALPHA_CEILING),
            method="bounded",
            options={"xatol": 1e-9},
        )
        if -profile.fun >= inner.value:
            log_alpha = float(profile.x)
        # the profile is flat near α = 0; land on the floor when it is as good
        floor_value = negbin_loglike(beta, math.exp(LOG_ALPHA_FLOOR), Z, y)
        if floor_value >= max(-profile.fun, inner.value) - 1e-9 * (1.0 + abs(floor_value)):
            log_alpha = LOG_ALPHA_FLOOR
        previous, value = value, negbin_loglike(beta, math.exp(log_alpha), Z, y)
        if inner.converged and abs(value - previous) <= tol * (1.0 + abs(value)):
            converged = True
            break

    params = np.append(beta, log_alpha)
    gradient = _negbin_gradient(params, Z, y, counts)
    at_bound = np.zeros(len(params), dtype=bool)
    at_bound[-1] = log_alpha <= LOG_ALPHA_FLOOR
    return OptimizeResult(
        x=params,
        value=float(value),
        gradient=gradient,
        hessian=numeric_hessian(lambda p: _negbin_gradient(p, Z, y, counts), params),
        iterations=rounds,
        converged=converged,
        gradient_norm=float(np.linalg.norm(gradient[~at_bound])),
        at_bound=at_bound,
    )


def negbin_fit(X: DesignMatrix, max_iter: int = DEFAULT_MAX_ITER) -> FitResult:
    """NB2 maximum likelihood with a likelihood-ratio test of α = 0.

    α is estimated as ln α, floored at LOG_ALPHA_FLOOR; a fit on the floor is
    the Poisson boundary and counts as converged. The likelihood is maximized
    on the standardized design; coefficients and covariance are mapped back.
    """
    _check_counts(X.y)
    check_rank(X.X, X.names)
    poisson = poisson_fit(X, max_iter)
    A = standardizing_map(X.X, X.names)
    result = _maximize_negbin(X.X @ A, X.y, np.linalg.solve(A, poisson.params), max_iter)
    if not result.converged:
        raise ConvergenceError("negative binomial fit did not converge", result.gradient_norm)

    beta, log_alpha = A @ result.x[:-1], result.x[-1]
    alpha = math.exp(log_alpha)
    if result.at_bound[-1]:
        cov = invert(-result.hessian[:-1, :-1])
        alpha_se = float("nan")
    else:
        full = invert(-result.hessian)
        cov = full[:-1, :-1]
        alpha_se = alpha * math.sqrt(max(full[-1, -1], 0.0))
    cov = A @ cov @ A.T

    lr = max(0.0, 2.0 * (result.value - poisson.log_likelihood))
    ll_null = None
    if X.k > 1 or not X.has_constant:
        intercept = DesignMatrix(np.ones((X.n, 1)), [CONSTANT], X.y, X.outcome)
        null = _maximize_negbin(intercept.X, intercept.y, _poisson_start(intercept), max_iter)
        ll_null = null.value
    logger.info(
        "NB2 converged in %d rounds: ll=%.4f, alpha=%.4g, LR(alpha=0)=%.3f",
        result.iterations, result.value, alpha, lr,
    )
    return FitResult(
        model="negbin",
        link="log",
        outcome=X.outcome,
        names=list(X.names),
        covariance=cov.tolist(),
        n_obs=X.n,
        log_likelihood=result.value,
        alpha=alpha,
        alpha_se=alpha_se,
        alpha_lr_statistic=lr,
        alpha_pvalue=0.5 * float(stats.chi2.sf(lr, 1)),
        regressor_means=X.means(),
        products=dict(X.products),
        converged=True,
        iterations=result.iterations,
        gradient_norm=result.gradient_norm,
        **_fit_statistics(result.value, ll_null, X.k, X.has_constant),
        **coefficient_table(X.names, beta, cov),
    )


# ---------------------------------------------------------------- conditional FE negative binomial


class _ConditionalNegbin:
    """Conditional likelihood of the fixed-effects negative binomial, summed over groups.

    Per group with λ = exp(Xβ):
    lnΓ(Σλ) + lnΓ(Σy + 1) - lnΓ(Σy + Σλ) + Σ[lnΓ(λ + y) - lnΓ(λ) - lnΓ(y + 1)]
    """

    def __init__(self, X: np.ndarray, y: np.ndarray, codes: np.ndarray, n_groups: int):
        self.X, self.y, self.codes, self.n_groups = X, y, codes, n_groups
        self.y_sums = np.bincount(codes, weights=y, minlength=n_groups)
        self._constant = float(np.sum(special.gammaln(self.y_sums + 1)) - np.sum(special.gammaln(y + 1)))

    def _lambda(self, beta: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        lam = np.exp(self.X @ beta)
        return lam, np.bincount(self.codes, weights=lam, minlength=self.n_groups)

    def loglike(self, beta: np.ndarray) -> float:
        lam, sums = self._lambda(beta)
        return float(
            np.sum(special.gammaln(sums) - special.gammaln(self.y_sums + sums))
            + np.sum(special.gammaln(lam + self.y) - special.gammaln(lam))
            + self._constant
        )

    def gradient(self, beta: np.ndarray) -> np.ndarray:
        lam, sums = self._lambda(beta)
        group_term = special.digamma(sums) - special.digamma(self.y_sums + sums)
        d_lambda = group_term[self.codes] + special.digamma(lam + self.y) - special.digamma(lam)
        return self.X.T @ (lam * d_lambda)


def fe_negbin_fit(X: DesignMatrix, max_iter: int = DEFAULT_MAX_ITER) -> FitResult:
    """Conditional fixed-effects negative binomial.

    Groups whose conditional contribution is constant (singletons and groups
    with all-zero outcomes) are dropped and counted. The reported group
    effects are ln(Σy / Σλ̂) per retained group.
    """
    if X.groups is None:
        raise ValueError("fixed effects need group labels")
    _check_counts(X.y)
    labels = pd.Series(X.groups)
    sizes = labels.map(labels.value_counts())
    totals = pd.Series(X.y).groupby(labels.values).transform("sum")
    keep = ((sizes > 1) & (totals > 0)).to_numpy()
    dropped = int(labels.nunique() - labels[keep].nunique())
    if not keep.any():
        raise NoEstimableGroupsError("every group is a singleton or has no positive outcome")
    X = X.take(np.flatnonzero(keep))
    check_rank(X.X, X.names)

    codes, uniques = pd.factorize(pd.Series(X.groups), sort=True)
    A = standardizing_map(X.X, X.names)
    model = _ConditionalNegbin(X.X @ A, X.y, codes, len(uniques))
    try:
        start = np.linalg.solve(A, poisson_fit(X, max_iter).params)
    except ConvergenceError:
        start = _poisson_start(X)
    result = newton_maximize(model.loglike, model.gradient, start, max_iter=max_iter, scale=max(1.0, X.n))
    if not result.converged:
        raise ConvergenceError("fixed-effects negative binomial did not converge", result.gradient_norm)
    beta = A @ result.x
    cov = A @ invert(-result.hessian) @ A.T

    lam, sums = model._lambda(result.x)
    effects = np.log(model.y_sums / sums)
    ll_null = None
    if X.has_constant and X.k > 1:
        intercept = _ConditionalNegbin(np.ones((X.n, 1)), X.y, codes, len(uniques))
        null = newton_maximize(intercept.loglike, intercept.gradient, np.zeros(1), max_iter=max_iter)
        ll_null = null.value
    logger.info(
        "FE negative binomial converged in %d iterations over %d groups (%d dropped)",
        result.iterations, len(uniques), dropped,
    )
    return FitResult(
        model="fe_negbin",
        link="log",
        outcome=X.outcome,
        names=list(X.names),
        covariance=cov.tolist(),
        n_obs=X.n,
        n_groups=len(uniques),
        n_groups_dropped=dropped,
        log_likelihood=result.value,
        group_effects={str(g): float(v) for g, v in zip(uniques, effects)},
        baseline_offset=float(np.sum(effects[codes]) / X.n),
        regressor_means=X.means(),
        products=dict(X.products),
        converged=True,
        iterations=result.iterations,
        gradient_norm=result.gradient_norm,
        **_fit_statistics(result.value, ll_null, X.k, X.has_constant),
        **coefficient_table(X.names, beta, cov),
    )
