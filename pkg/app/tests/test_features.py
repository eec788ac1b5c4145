import math

import numpy as np
import pytest
from pydantic import ValidationError

from app.core.exceptions import InsufficientDataError, SessionMismatchError
from app.schemas.features import FEATURE_COLUMNS, FeatureRow
from app.schemas.records import Dataset
from app.services.features import (
    EXCLUDED_LEADER,
    EXCLUSION_REASONS,
    NO_CONNECTED_TRIADS,
    RIGHT_CENSORING,
    assemble_features,
    dependent_variable,
    distinctiveness,
    instrument_ranking,
    median_past_releases,
    median_tie_strength,
    newbies_proportion,
    past_sessions_total,
)
from app.services.graph import build_index
from app.services.triads import census_sessions
from app.tests import example


@pytest.fixture(scope="module")
def kob_censuses(kind_of_blue, kob_index):
    return census_sessions(kind_of_blue, kob_index, 2)


def test_kind_of_blue_covariates(kind_of_blue, kob_index, kob_matrix):
    s = kind_of_blue[example.KIND_OF_BLUE_ID]
    assert median_tie_strength(kob_matrix) == 8.0
    assert past_sessions_total(kob_index, s) == 185
    assert newbies_proportion(kob_index, s) == 0.0
    assert median_past_releases(kob_index, s) >= 1.0


def test_tie_strength_needs_two_musicians():
    with pytest.raises(InsufficientDataError):
        median_tie_strength(np.zeros((1, 1)))


def test_newbies():
    d = Dataset(
        [
            example.session("s1", 1960, {"a": "tp", "b": "bass"}),
            example.session("s2", 1961, {"a": "tp", "b": "bass", "c": "dr", "e": "p"}),
        ]
    )
    assert newbies_proportion(build_index(d), d["s2"]) == 0.5
    assert newbies_proportion(build_index(d), d["s1"]) == 1.0


def test_dependent_variable():
    assert dependent_variable(10) == pytest.approx(1.0)
    assert dependent_variable(9, offset=1) == pytest.approx(1.0)
    assert dependent_variable(1) == 0.0


def test_instrument_ranking_breaks_ties_by_id():
    d = Dataset(
        [
            example.session("s1", 1960, {"a": "tp", "b": "bass"}),
            example.session("s2", 1960, {"c": "tp", "e": "as"}),
        ]
    )
    assert instrument_ranking(d, 10) == ["tp", "as", "bass"]
    assert instrument_ranking(d, 2) == ["tp", "as"]


def test_distinctiveness():
    d = Dataset(
        [
            example.session("p1", 1958, {"a": "tp", "b": "bass"}),
            example.session("p2", 1959, {"a": "dr"}),
            example.session("same", 1960, {"x": "tp", "y": "bass"}),
        ]
    )
    # against (tp, bass) cosine 1 and (dr) cosine 0: mean distance 0.5
    assert distinctiveness(d, d["same"]) == pytest.approx(0.5)
    assert distinctiveness(d, d["p2"]) == pytest.approx(1.0)
    assert distinctiveness(d, d["p1"]) is None
    assert distinctiveness(d, d["same"], horizon=1) == pytest.approx(1.0)


def test_assemble_features(kind_of_blue, kob_index, kob_censuses):
    table = assemble_features(kind_of_blue, kob_index, kob_censuses, theta=2, cutoff_year=2000)

    assert list(table.frame.columns) == FEATURE_COLUMNS
    assert len(table) + sum(table.exclusions.values()) == len(kind_of_blue)
    assert table.exclusions[NO_CONNECTED_TRIADS] > 0

    row = table.frame.set_index("session_id").loc[example.KIND_OF_BLUE_ID]
    assert row["d_forbidden"] == pytest.approx(0.1)
    assert row["d_forbidden_sq"] == pytest.approx(0.01)
    assert row["d_closed"] == pytest.approx(0.8)
    assert row["past_sessions_total"] == 185
    assert row["n_musicians"] == 6
    assert row["log10_releases"] == pytest.approx(math.log10(40))

    frame = table.exclusion_frame()
    assert list(frame["reason"]) == list(EXCLUSION_REASONS)


def test_exclusions(kind_of_blue, kob_index, kob_censuses):
    censored = assemble_features(kind_of_blue, kob_index, kob_censuses, cutoff_year=1958)
    assert example.KIND_OF_BLUE_ID not in set(censored.frame["session_id"])
    assert censored.exclusions[RIGHT_CENSORING] == 1

    without_davis = assemble_features(kind_of_blue, kob_index, kob_censuses, exclusions={"davis"})
    assert example.KIND_OF_BLUE_ID not in set(without_davis.frame["session_id"])
    assert without_davis.exclusions[EXCLUDED_LEADER] >= 1


def test_release_offset(kind_of_blue, kob_index, kob_censuses):
    table = assemble_features(kind_of_blue, kob_index, kob_censuses, release_offset=1)
    row = table.frame.set_index("session_id").loc[example.KIND_OF_BLUE_ID]
    assert row["log10_releases"] == pytest.approx(math.log10(41))


def test_missing_census_is_an_error(kind_of_blue, kob_index, kob_censuses):
    partial = dict(kob_censuses)
    partial.pop(example.KIND_OF_BLUE_ID)
    with pytest.raises(SessionMismatchError):
        assemble_features(kind_of_blue, kob_index, partial)


def test_feature_row_checks_simplex():
    with pytest.raises(ValidationError):
        FeatureRow(
            session_id="s",
            leader_id="l",
            releases=1,
            log10_releases=0.0,
            d_forbidden=0.5,
            d_forbidden_sq=0.25,
            d_closed=0.5,
            d_closed_sq=0.25,
            d_open=0.5,
            median_tie_strength=1.0,
            median_tie_strength_sq=1.0,
            n_musicians=3,
            newbies_proportion=0.0,
            median_past_releases=0.0,
            past_sessions_total=0,
            year=1960,
        )


def test_corpus_features_are_complete(corpus, corpus_index):
    censuses = census_sessions(corpus, corpus_index, 2)
    table = assemble_features(corpus, corpus_index, censuses, top_k=200, horizon=5)
    assert len(table) > 0.5 * len(corpus)
    assert table.frame[FEATURE_COLUMNS].notna().all().all()
