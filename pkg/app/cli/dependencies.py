"""Resolve command line arguments into datasets, tables and services."""
import logging
from collections.abc import Iterable
from pathlib import Path

import numpy as np
import pandas as pd

from app.core.config import PipelineConfig, load_pipeline_config
from app.core.exceptions import ConfigError
from app.schemas.census import SessionCensus
from app.schemas.fit import FitResult
from app.schemas.records import Dataset
from app.services.graph import CoPlayIndex, build_index
from app.services.records import open_dataset
from app.services.triads import censuses_from_table
from app.stats.margins import grid_from_step
from app.storage.files import inputs_digest, is_current, read_frame, read_model

logger = logging.getLogger(__name__)

# short names accepted on the command line
MODEL_ALIASES = {"ols": "ols", "nb": "negbin", "negbin": "negbin"}

_ID_COLUMNS = {"session_id": str, "leader_id": str}


def get_dataset(directory: Path | str) -> Dataset:
    return open_dataset(directory)


def get_index(d: Dataset) -> CoPlayIndex:
    return build_index(d)


def get_censuses(path: Path | str) -> dict[str, SessionCensus]:
    return censuses_from_table(read_frame(path, dtype=_ID_COLUMNS))


def get_features(path: Path | str) -> pd.DataFrame:
    return read_frame(path, dtype=_ID_COLUMNS)


def get_fit(path: Path | str) -> FitResult:
    return read_model(FitResult, path)


def get_config(path: Path | str) -> PipelineConfig:
    return load_pipeline_config(path)


def resolve_model(model: str, fixed_effects: str | None) -> str:
    """Model key of the success fitters for `--model` and `--fixed-effects`."""
    base = MODEL_ALIASES[model]
    if fixed_effects is None:
        return base
    if fixed_effects != "leader":
        raise ConfigError(f"fixed effects are only available by leader, got {fixed_effects!r}")
    return f"fe_{base}"


def parse_grid(text: str) -> np.ndarray:
    """`low:high:step` or a comma-separated list of values."""
    if ":" in text:
        try:
            low, high, step = (float(part) for part in text.split(":"))
        except ValueError:
            raise ConfigError(f"grid must be low:high:step, got {text!r}") from None
        if step <= 0 or high < low:
            raise ConfigError(f"empty grid {text!r}")
        return grid_from_step(step, low, high)
    try:
        return np.array([float(part) for part in text.split(",")])
    except ValueError:
        raise ConfigError(f"grid values must be numbers, got {text!r}") from None


def stage_digest(inputs: Iterable[Path | str | None], **params) -> str:
    """Digest of a command's input files and parameters."""
    extra = ";".join(f"{key}={params[key]}" for key in sorted(params))
    paths = []
    for path in inputs:
        if path is None:
            continue
        path = Path(path)
        # dataset directories stand for their two tables
        paths += [path / "sessions.csv", path / "personnel.csv"] if path.is_dir() else [path]
    return inputs_digest(paths, extra)


def up_to_date(output: Path | str, digest: str) -> bool:
    if is_current(output, digest):
        logger.info("%s is up to date, nothing to do", output)
        return True
    return False
