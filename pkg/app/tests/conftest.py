import numpy as np
import pandas as pd
import pytest

from app.core.config import PipelineConfig, SynthParams
from app.core.logging import configure_logging
from app.schemas.records import Dataset
from app.services.graph import CoPlayIndex, build_index, session_weight_matrix
from app.services.synth import synth_corpus
from app.tests import example


@pytest.fixture(scope="session")
def kind_of_blue() -> Dataset:
    return example.kind_of_blue_dataset()


@pytest.fixture(scope="session")
def kob_index(kind_of_blue: Dataset) -> CoPlayIndex:
    return build_index(kind_of_blue)


@pytest.fixture(scope="session")
def kob_matrix(kind_of_blue: Dataset, kob_index: CoPlayIndex) -> pd.DataFrame:
    return session_weight_matrix(kob_index, kind_of_blue[example.KIND_OF_BLUE_ID])


# Corpus large enough for the rewiring checks: 200 sessions, 5 years
@pytest.fixture(scope="session")
def corpus_params() -> SynthParams:
    return SynthParams(n_musicians=120, n_leaders=20, n_instruments=12, n_years=5, sessions_per_year=40)


@pytest.fixture(scope="session")
def corpus(corpus_params: SynthParams) -> Dataset:
    return synth_corpus(corpus_params, seed=7)


@pytest.fixture(scope="session")
def corpus_index(corpus: Dataset) -> CoPlayIndex:
    return build_index(corpus)


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(12345)


# Small synthetic pipeline configuration, fast enough for end-to-end runs
@pytest.fixture
def small_config() -> PipelineConfig:
    return PipelineConfig(
        synthetic=True,
        synth=SynthParams(n_musicians=80, n_leaders=10, n_years=4, sessions_per_year=30, first_year=1990),
        cutoff_year=2000,
        n_worlds=3,
        window_variants=[2],
        theta_sweep=[2, 3],
        cutoff_sweep=[1993, 1992],
        quantiles=50,
        n_permutations=20,
        permutation_subsample=None,
        top_k=20,
        horizon=2,
    )


@pytest.fixture(scope="session", autouse=True)
def setup_and_teardown():
    print("🧪 starting tests...")
    configure_logging("WARNING")
    yield
    print("✅ finished!")
