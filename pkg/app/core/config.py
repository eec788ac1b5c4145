"""Application configuration."""
import hashlib
from pathlib import Path
from typing import Literal

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator
from pydantic_settings import BaseSettings, SettingsConfigDict

from app.core.exceptions import ConfigError

# Project root: two levels up from app/core/config.py
ROOT_DIR = Path(__file__).resolve().parent.parent.parent
ENV_PATH = ROOT_DIR / ".env"


class Settings(BaseSettings):
    """Application settings."""

    APP_TITLE: str = "triadlab"
    APP_DESCRIPTION: str = "Forbidden triads in temporal collaboration networks"

    LOG_LEVEL: str = "INFO"

    # Dataset year bounds checked at ingest
    MIN_YEAR: int = 1890
    MAX_YEAR: int = 2030

    # Worker processes for world generation
    N_JOBS: int = Field(default=1, ge=1)

    OUTPUT_DIR: str = "out"

    model_config = SettingsConfigDict(
        env_file=str(ENV_PATH),
        env_prefix="TRIADLAB_",
        env_ignore_empty=True,
        extra="ignore",
    )


settings = Settings()


class SynthParams(BaseModel):
    """Parameters of the synthetic corpus generator."""

    model_config = ConfigDict(extra="forbid")

    n_musicians: int = Field(default=120, gt=0)
    n_leaders: int = Field(default=20, gt=0)
    n_instruments: int = Field(default=12, ge=2)
    first_year: int = 1950
    n_years: int = Field(default=5, gt=0)
    sessions_per_year: int = Field(default=40, gt=0)
    min_size: int = Field(default=3, ge=1)
    max_size: int = Field(default=7, ge=1)
    # musicians taking part in a given year
    activity: float = Field(default=0.8, gt=0, le=1)
    # share of a session's sidemen drawn from the leader's circle
    loyalty: float = Field(default=0.7, ge=0, le=1)
    roster_size: int = Field(default=8, ge=2)
    # probability that a musician doubles on a second instrument
    doubling: float = Field(default=0.1, ge=0, le=1)
    # ln E[releases - 1] = success_base + success_linear*d + success_quadratic*d^2
    success_base: float = 1.0
    success_linear: float = 0.0
    success_quadratic: float = 0.0
    success_theta: int = Field(default=2, ge=2)
    success_alpha: float = Field(default=0.3, ge=0)

    @model_validator(mode="after")
    def check_sizes(self) -> "SynthParams":
        if self.min_size > self.max_size:
            raise ValueError("min_size must not exceed max_size")
        return self


class PipelineConfig(BaseModel):
    """Every configurable of the analysis, one field per flat-file key."""

    model_config = ConfigDict(extra="forbid")

    sessions_path: Path | None = None
    personnel_path: Path | None = None
    records_path: Path | None = None
    synthetic: bool = False
    synth: SynthParams = Field(default_factory=SynthParams)

    theta: int = Field(default=2, ge=2)
    theta_sweep: list[int] = Field(default=[2, 3, 5, 10], min_length=1)

    window_years: int = Field(default=1, ge=1)
    window_variants: list[int] = Field(default=[2, 5, 10], min_length=1)
    # zero skips every rewire-dependent output
    n_worlds: int = Field(default=100, ge=0)
    master_seed: int = Field(default=20170101, ge=0)
    qualification: Literal["span", "both_years"] = "span"
    repair_attempts: int = Field(default=100, gt=0)

    cutoff_year: int = 2000
    cutoff_sweep: list[int] = Field(default=[2000, 1995, 1990], min_length=1)
    exclude_leaders_path: Path | None = None
    focus_leader: str | None = None

    quantiles: int = Field(default=10_000, gt=0)
    smoothing_window: int | None = Field(default=None, gt=0)
    n_permutations: int = Field(default=10_000, gt=0)
    permutation_subsample: int | None = Field(default=500_000, gt=0)

    lowess_f: float = Field(default=0.5, gt=0, le=1)
    kde_bandwidth: float | None = Field(default=None, gt=0)
    top_k: int = Field(default=200, gt=0)
    horizon: int = Field(default=5, gt=0)
    release_offset: int = Field(default=0, ge=0, le=1)

    max_iter: int = Field(default=200, gt=0)
    margins_step: float = Field(default=0.01, gt=0, le=1)
    n_jobs: int = Field(default=settings.N_JOBS, ge=1)

    @field_validator("theta_sweep", "window_variants", "cutoff_sweep", mode="before")
    @classmethod
    def split_list(cls, value):
        if isinstance(value, str):
            return [part.strip() for part in value.split(",") if part.strip()]
        return value

    @field_validator("theta_sweep")
    @classmethod
    def check_thresholds(cls, value: list[int]) -> list[int]:
        if any(theta < 2 for theta in value):
            raise ValueError("thresholds must be >= 2")
        return value

    @model_validator(mode="after")
    def check_inputs(self) -> "PipelineConfig":
        if not self.synthetic and (self.sessions_path is None) != (self.personnel_path is None):
            raise ValueError("sessions_path and personnel_path go together")
        return self

    @property
    def effective_smoothing_window(self) -> int:
        return self.smoothing_window or max(1, self.quantiles // 100)

    def to_flat(self) -> dict[str, str]:
        """Flat key-value view, inverse of the config file parser."""
        flat: dict[str, str] = {}
        for key, value in self.model_dump(exclude={"synth"}).items():
            if value is None:
                flat[key] = ""
            elif isinstance(value, list):
                flat[key] = ",".join(str(item) for item in value)
            else:
                flat[key] = str(value)
        for key, value in self.synth.model_dump().items():
            flat[f"synth_{key}"] = str(value)
        return dict(sorted(flat.items()))

    def digest(self) -> str:
        text = "\n".join(f"{key} = {value}" for key, value in self.to_flat().items())
        return hashlib.sha256(text.encode("utf-8")).hexdigest()


def parse_flat_config(text: str) -> dict:
    """Parse `key = value` lines; `#` starts a comment, empty values mean unset."""
    values: dict = {}
    synth: dict = {}
    seen: set[str] = set()
    for line_no, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {line_no}: expected 'key = value', got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        target, name = (synth, key.removeprefix("synth_")) if key.startswith("synth_") else (values, key)
        if key in seen:
            raise ConfigError(f"line {line_no}: duplicate key {key!r}")
        seen.add(key)
        if value != "":
            target[name] = value
    if synth:
        values["synth"] = synth
    return values


def load_pipeline_config(path: Path | str) -> PipelineConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as error:
        raise ConfigError(f"cannot read config {path}: {error}") from error
    values = parse_flat_config(text)
    unknown = set(values) - set(PipelineConfig.model_fields)
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")
    try:
        config = PipelineConfig.model_validate(values)
    except ValidationError as error:
        raise ConfigError(str(error)) from error
    # relative dataset paths resolve against the config file
    for field in ("sessions_path", "personnel_path", "records_path", "exclude_leaders_path"):
        value = getattr(config, field)
        if value is not None and not value.is_absolute():
            config = config.model_copy(update={field: path.parent / value})
    return config
