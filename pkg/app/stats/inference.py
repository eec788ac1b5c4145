"""Resampling and rank-based tests."""
import logging
from collections.abc import Callable, Sequence
from dataclasses import dataclass, field

import numpy as np
from rich.progress import track
from scipy import stats

from app.core.exceptions import InsufficientDataError, TriadLabError
from app.core.logging import console
from app.schemas.fit import FitResult
from app.stats.design import DesignMatrix

logger = logging.getLogger(__name__)

EXACT_WILCOXON_MAX_N = 25


@dataclass
class PermutationResult:
    observed: dict[str, float]
    p_values: dict[str, float]
    n_permutations: int
    n_success: int
    failures: int
    # rows the test ran on after subsampling
    n_obs: int
    exceedances: dict[str, int] = field(default_factory=dict)


def subsample_rows(n: int, size: int | None, rng: np.random.Generator, strata: np.ndarray | None = None) -> np.ndarray:
    """Sorted row indices: `size` rows uniformly, or `size` per stratum."""
    if size is None:
        return np.arange(n)
    if strata is None:
        return np.arange(n) if size >= n else np.sort(rng.choice(n, size=size, replace=False))
    chosen = []
    for value in np.unique(strata):
        rows = np.flatnonzero(strata == value)
        chosen.append(rows if size >= len(rows) else rng.choice(rows, size=size, replace=False))
    return np.sort(np.concatenate(chosen))


def permutation_pvalues(
    fitter: Callable[[DesignMatrix], FitResult],
    X: DesignMatrix,
    n_perm: int,
    subsample: int | None = None,
    seed: int = 0,
    strata: str | None = None,
) -> PermutationResult:
    """p = (1 + #{|β*| >= |β̂|}) / (1 + successful permutations), per coefficient.

    With `strata` naming a regressor, the subsample draws `subsample` rows per
    distinct value of that regressor. Fits that fail on a permuted outcome are
    counted, never silently dropped from the denominator's bookkeeping.
    """
    if n_perm < 1:
        raise ValueError(f"n_perm must be at least 1, got {n_perm}")
    rng = np.random.default_rng(seed)
    rows = subsample_rows(X.n, subsample, rng, None if strata is None else X.column(strata))
    X = X.take(rows)
    fit = fitter(X)
    observed = np.abs(fit.params)

    exceed = np.zeros(len(fit.names), dtype=np.int64)
    success = failures = 0
    for _ in track(range(n_perm), description="Permuting", console=console, transient=True):
        permuted = X.with_outcome(rng.permutation(X.y))
        try:
            refit = fitter(permuted)
        except (TriadLabError, np.linalg.LinAlgError, ValueError) as error:
            failures += 1
            logger.debug("Permutation fit failed: %s", error)
            continue
        coefficients = np.array([refit.coefficients.get(name, np.nan) for name in fit.names])
        exceed += np.abs(coefficients) >= observed
        success += 1

    if failures:
        logger.warning("%d of %d permutation fits failed", failures, n_perm)
    p = (1 + exceed) / (1 + success)
    return PermutationResult(
        observed=dict(fit.coefficients),
        p_values={name: float(value) for name, value in zip(fit.names, p)},
        n_permutations=n_perm,
        n_success=success,
        failures=failures,
        n_obs=X.n,
        exceedances={name: int(value) for name, value in zip(fit.names, exceed)},
    )


@dataclass(frozen=True)
class WilcoxonResult:
    # sum of ranks of the positive differences
    statistic: float
    z: float
    p_value: float
    # one-sided: differences tend to be positive / negative
    p_greater: float
    p_less: float
    n: int
    exact: bool


def _exact_signed_rank(ranks: np.ndarray, statistic: float) -> tuple[float, float]:
    """Exact tail probabilities of W+ by dynamic programming over doubled ranks."""
    doubled = np.rint(2 * ranks).astype(np.int64)
    counts = np.zeros(int(doubled.sum()) + 1)
    counts[0] = 1.0
    for r in doubled:
        shifted = np.zeros_like(counts)
        shifted[r:] = counts[: len(counts) - r]
        counts = counts + shifted
    probabilities = counts / counts.sum()
    target = int(round(2 * statistic))
    return float(probabilities[target:].sum()), float(probabilities[: target + 1].sum())


def wilcoxon_signed_rank(differences: Sequence[float]) -> WilcoxonResult:
    """Signed-rank test of zero median; zeros dropped, ties mid-ranked.

    p-values are exact when at most EXACT_WILCOXON_MAX_N differences remain,
    otherwise from the tie-corrected normal approximation. Z is always
    reported.
    """
    d = np.asarray(differences, dtype=float)
    d = d[d != 0]
    n = len(d)
    if n == 0:
        raise InsufficientDataError("all differences are zero")
    ranks = stats.rankdata(np.abs(d))
    statistic = float(ranks[d > 0].sum())

    mean = n * (n + 1) / 4
    _, ties = np.unique(ranks, return_counts=True)
    variance = n * (n + 1) * (2 * n + 1) / 24 - np.sum(ties**3 - ties) / 48
    z = (statistic - mean) / np.sqrt(variance) if variance > 0 else float("nan")

    exact = n <= EXACT_WILCOXON_MAX_N
    if exact:
        p_greater, p_less = _exact_signed_rank(ranks, statistic)
    else:
        p_greater, p_less = float(stats.norm.sf(z)), float(stats.norm.cdf(z))
    return WilcoxonResult(
        statistic=statistic,
        z=float(z),
        p_value=min(1.0, 2 * min(p_greater, p_less)),
        p_greater=p_greater,
        p_less=p_less,
        n=n,
        exact=exact,
    )


@dataclass(frozen=True)
class KSResult:
    statistic: float
    p_value: float
    n_a: int
    n_b: int


def ks_two_sample(a: Sequence[float], b: Sequence[float]) -> KSResult:
    """Largest ECDF gap, with the small-sample corrected asymptotic p-value."""
    a = np.sort(np.asarray(a, dtype=float))
    b = np.sort(np.asarray(b, dtype=float))
    if len(a) == 0 or len(b) == 0:
        raise InsufficientDataError("both samples must be non-empty")
    points = np.concatenate([a, b])
    gap = np.abs(np.searchsorted(a, points, side="right") / len(a) - np.searchsorted(b, points, side="right") / len(b))
    statistic = float(gap.max())
    en = np.sqrt(len(a) * len(b) / (len(a) + len(b)))
    p = float(stats.kstwobign.sf((en + 0.12 + 0.11 / en) * statistic)) if statistic > 0 else 1.0
    return KSResult(statistic=statistic, p_value=min(1.0, p), n_a=len(a), n_b=len(b))
