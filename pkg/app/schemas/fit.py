import math

import numpy as np
from pydantic import BaseModel, ConfigDict, Field


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return str(value).lower()
    if isinstance(value, float):
        if math.isnan(value):
            return "nan"
        if math.isinf(value):
            return "inf" if value > 0 else "-inf"
        return f"{value:.10g}"
    return str(value)


class FitResult(BaseModel):
    """Estimation output shared by every fitter.

    Coefficient-level fields are keyed by regressor name in `names` order;
    `covariance` is the covariance of the coefficients in the same order.
    `baseline_offset` is added to the linear predictor when predicting at
    covariate values (the mean group effect for fixed effects models).
    """

    model_config = ConfigDict(ser_json_inf_nan="constants")

    model: str
    link: str = "identity"
    outcome: str = "y"
    names: list[str]
    coefficients: dict[str, float]
    std_errors: dict[str, float]
    statistics: dict[str, float]
    p_values: dict[str, float]
    covariance: list[list[float]]

    n_obs: int = Field(ge=0)
    n_groups: int | None = None
    n_groups_dropped: int = 0
    dropped_columns: list[str] = Field(default_factory=list)

    log_likelihood: float | None = None
    log_likelihood_null: float | None = None
    r_squared: float | None = None
    adj_r_squared: float | None = None
    f_statistic: float | None = None
    f_pvalue: float | None = None
    pseudo_r_squared: float | None = None
    adj_pseudo_r_squared: float | None = None
    chi_square: float | None = None
    chi_square_pvalue: float | None = None

    alpha: float | None = Field(default=None, ge=0)
    alpha_se: float | None = None
    alpha_lr_statistic: float | None = None
    alpha_pvalue: float | None = None

    group_effects: dict[str, float] = Field(default_factory=dict)
    baseline_offset: float = 0.0
    regressor_means: dict[str, float] = Field(default_factory=dict)
    # derived columns as products of base columns, e.g. d_forbidden_sq -> [d_forbidden, d_forbidden]
    products: dict[str, list[str]] = Field(default_factory=dict)

    converged: bool = True
    iterations: int = 0
    gradient_norm: float = 0.0
    permutation_p_values: dict[str, float] = Field(default_factory=dict)
    permutation_failures: int = 0

    @property
    def params(self) -> np.ndarray:
        return np.array([self.coefficients[name] for name in self.names])

    @property
    def cov(self) -> np.ndarray:
        return np.array(self.covariance, dtype=float).reshape(len(self.names), len(self.names))

    @property
    def odds_ratios(self) -> dict[str, float]:
        return {name: math.exp(value) for name, value in self.coefficients.items()}

    @property
    def has_constant(self) -> bool:
        return "const" in self.names

    def to_summary(self) -> str:
        """Flat `key = value` text, one line per statistic, keys sorted."""
        lines: dict[str, str] = {}
        for key in (
            "model", "link", "outcome", "n_obs", "n_groups", "n_groups_dropped",
            "log_likelihood", "log_likelihood_null", "r_squared", "adj_r_squared",
            "f_statistic", "f_pvalue", "pseudo_r_squared", "adj_pseudo_r_squared",
            "chi_square", "chi_square_pvalue", "alpha", "alpha_se",
            "alpha_lr_statistic", "alpha_pvalue", "baseline_offset", "converged",
            "iterations", "gradient_norm", "permutation_failures",
        ):
            lines[key] = _fmt(getattr(self, key))
        lines["dropped_columns"] = ",".join(self.dropped_columns)
        for name in self.names:
            lines[f"coef.{name}"] = _fmt(self.coefficients[name])
            lines[f"se.{name}"] = _fmt(self.std_errors[name])
            lines[f"stat.{name}"] = _fmt(self.statistics[name])
            lines[f"p.{name}"] = _fmt(self.p_values[name])
            if self.link == "logit":
                lines[f"odds_ratio.{name}"] = _fmt(math.exp(self.coefficients[name]))
        for name, value in self.permutation_p_values.items():
            lines[f"perm_p.{name}"] = _fmt(value)
        return "".join(f"{key} = {lines[key]}\n" for key in sorted(lines))
