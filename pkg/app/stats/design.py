"""Design matrices and the coefficient table shared by every fitter."""
from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field

import numpy as np
import pandas as pd
from scipy import linalg, stats

from app.core.exceptions import InsufficientDataError, RankDeficiencyError

CONSTANT = "const"


@dataclass
class DesignMatrix:
    """Regressors, outcome and optional group labels, one row per observation.

    `products` records columns built as products of other columns (squares,
    interactions) so predictions can rebuild them from varied base values.
    """

    X: np.ndarray
    names: list[str]
    y: np.ndarray
    outcome: str = "y"
    groups: np.ndarray | None = None
    products: dict[str, list[str]] = field(default_factory=dict)

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=float)
        self.y = np.asarray(self.y, dtype=float)
        if self.X.ndim != 2 or self.X.shape[1] != len(self.names):
            raise ValueError(f"X has shape {self.X.shape} for {len(self.names)} names")
        if len(set(self.names)) != len(self.names):
            raise ValueError("column names must be unique")
        if self.X.shape[0] != self.y.shape[0]:
            raise ValueError(f"{self.X.shape[0]} rows of X but {self.y.shape[0]} outcomes")
        if not (np.isfinite(self.X).all() and np.isfinite(self.y).all()):
            raise ValueError("design contains missing or infinite cells")
        if self.groups is not None:
            self.groups = np.asarray(self.groups)
            if self.groups.shape[0] != self.X.shape[0]:
                raise ValueError("groups must have one label per row")
        self.products = {name: list(factors) for name, factors in self.products.items() if name in self.names}

    @classmethod
    def from_frame(
        cls,
        frame: pd.DataFrame,
        outcome: str,
        regressors: Sequence[str],
        constant: bool = True,
        groups: str | None = None,
        products: Mapping[str, Sequence[str]] | None = None,
    ) -> "DesignMatrix":
        missing = [c for c in [outcome, *regressors] if c not in frame.columns]
        if missing:
            raise KeyError(f"columns not in table: {', '.join(missing)}")
        names = ([CONSTANT] if constant else []) + list(regressors)
        X = frame[list(regressors)].to_numpy(dtype=float)
        if constant:
            X = np.column_stack([np.ones(len(frame)), X])
        return cls(
            X=X,
            names=names,
            y=frame[outcome].to_numpy(dtype=float),
            outcome=outcome,
            groups=None if groups is None else frame[groups].astype(str).to_numpy(),
            products=dict(products or {}),
        )

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def k(self) -> int:
        return self.X.shape[1]

    @property
    def has_constant(self) -> bool:
        return CONSTANT in self.names

    def column(self, name: str) -> np.ndarray:
        return self.X[:, self.names.index(name)]

    def means(self) -> dict[str, float]:
        return {name: float(value) for name, value in zip(self.names, self.X.mean(axis=0))}

    def take(self, rows: np.ndarray) -> "DesignMatrix":
        return DesignMatrix(
            X=self.X[rows],
            names=list(self.names),
            y=self.y[rows],
            outcome=self.outcome,
            groups=None if self.groups is None else self.groups[rows],
            products=self.products,
        )

    def with_outcome(self, y: np.ndarray) -> "DesignMatrix":
        return DesignMatrix(self.X, list(self.names), y, self.outcome, self.groups, self.products)

    def drop(self, columns: Sequence[str]) -> "DesignMatrix":
        keep = [i for i, name in enumerate(self.names) if name not in set(columns)]
        return DesignMatrix(
            X=self.X[:, keep],
            names=[self.names[i] for i in keep],
            y=self.y,
            outcome=self.outcome,
            groups=self.groups,
            products=self.products,
        )

    def add(self, name: str, values: np.ndarray, factors: Sequence[str] | None = None) -> "DesignMatrix":
        products = dict(self.products)
        if factors is not None:
            products[name] = list(factors)
        return DesignMatrix(
            X=np.column_stack([self.X, values]),
            names=[*self.names, name],
            y=self.y,
            outcome=self.outcome,
            groups=self.groups,
            products=products,
        )


def check_rank(X: np.ndarray, names: Sequence[str], rtol: float = 1e-10) -> None:
    """Raise with the columns a pivoted QR leaves outside the numerical rank."""
    if X.shape[0] < X.shape[1]:
        raise InsufficientDataError(f"{X.shape[0]} rows for {X.shape[1]} coefficients")
    if X.shape[1] == 0:
        return
    _, r, pivot = linalg.qr(X, mode="economic", pivoting=True)
    diagonal = np.abs(np.diag(r))
    rank = int((diagonal > rtol * max(diagonal[0], 1e-300)).sum())
    if rank < X.shape[1]:
        raise RankDeficiencyError(sorted(names[i] for i in pivot[rank:]))


def coefficient_table(
    names: Sequence[str],
    beta: np.ndarray,
    cov: np.ndarray,
    df: int | None = None,
) -> dict[str, dict[str, float]]:
    """Wald statistics: t with `df` degrees of freedom, normal when df is None."""
    se = np.sqrt(np.clip(np.diag(cov), 0, None))
    with np.errstate(divide="ignore", invalid="ignore"):
        statistic = beta / se
    if df is None:
        p = 2 * stats.norm.sf(np.abs(statistic))
    else:
        p = 2 * stats.t.sf(np.abs(statistic), df)
    return {
        "coefficients": dict(zip(names, map(float, beta))),
        "std_errors": dict(zip(names, map(float, se))),
        "statistics": dict(zip(names, map(float, statistic))),
        "p_values": dict(zip(names, map(float, p))),
    }


def invert(matrix: np.ndarray) -> np.ndarray:
    """Inverse of a symmetric positive definite matrix, pseudo-inverse as fallback."""
    try:
        return linalg.inv(matrix, check_finite=False)
    except linalg.LinAlgError:
        return linalg.pinvh(matrix)


def standardizing_map(X: np.ndarray, names: Sequence[str]) -> np.ndarray:
    """A such that X @ A has every non-constant column at unit scale.

    With a constant present the columns are also centred; without one they are
    divided by their root mean square. Coefficients g fitted on X @ A are the
    coefficients A @ g of X, and their covariance is A C Aᵀ.
    """
    k = X.shape[1]
    A = np.eye(k)
    const = list(names).index(CONSTANT) if CONSTANT in names else None
    for j in range(k):
        if j == const:
            continue
        column = X[:, j]
        if const is not None:
            scale = float(column.std())
            if scale > 0:
                A[const, j] = -float(column.mean()) / scale
        else:
            scale = float(np.sqrt(np.mean(column**2)))
        if scale > 0:
            A[j, j] = 1.0 / scale
    return A
