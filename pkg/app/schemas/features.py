from pydantic import BaseModel, Field, model_validator


class FeatureRow(BaseModel):
    session_id: str
    leader_id: str
    releases: int = Field(ge=1)
    log10_releases: float
    d_forbidden: float = Field(ge=0, le=1)
    d_forbidden_sq: float
    d_closed: float = Field(ge=0, le=1)
    d_closed_sq: float
    d_open: float = Field(ge=0, le=1)
    median_tie_strength: float = Field(ge=0)
    median_tie_strength_sq: float
    distinctiveness: float | None = Field(default=None, ge=0, le=1)
    n_musicians: int = Field(ge=1)
    newbies_proportion: float = Field(ge=0, le=1)
    median_past_releases: float = Field(ge=0)
    past_sessions_total: int = Field(ge=0)
    year: int

    @model_validator(mode="after")
    def check_simplex(self) -> "FeatureRow":
        if abs(self.d_open + self.d_closed + self.d_forbidden - 1.0) > 1e-12:
            raise ValueError("triad densities must sum to one")
        return self


FEATURE_COLUMNS: list[str] = list(FeatureRow.model_fields)

# Regressors of the success models, in table order
SUCCESS_REGRESSORS: list[str] = [
    "d_forbidden",
    "d_forbidden_sq",
    "d_closed",
    "d_closed_sq",
    "median_tie_strength",
    "median_tie_strength_sq",
    "distinctiveness",
    "n_musicians",
    "newbies_proportion",
    "median_past_releases",
    "past_sessions_total",
    "year",
]

SQUARED_TERMS: dict[str, list[str]] = {
    "d_forbidden_sq": ["d_forbidden", "d_forbidden"],
    "d_closed_sq": ["d_closed", "d_closed"],
    "median_tie_strength_sq": ["median_tie_strength", "median_tie_strength"],
}
