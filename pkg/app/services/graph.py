"""Time-indexed co-play weights.

Every query is strictly backward looking: a weight "as of" year t counts
sessions from year t-1 backwards, so sessions of the same year never feed
each other's weights.
"""
import logging
from bisect import bisect_left, bisect_right
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from itertools import accumulate, combinations

import numpy as np
import pandas as pd

from app.schemas.records import Dataset, SessionRecord

logger = logging.getLogger(__name__)


def _pair(a: str, b: str) -> tuple[str, str]:
    return (a, b) if a < b else (b, a)


@dataclass
class MusicianHistory:
    years: list[int] = field(default_factory=list)
    # cumulative session counts aligned with `years`
    cumulative: list[int] = field(default_factory=list)
    instruments: dict[int, frozenset[str]] = field(default_factory=dict)
    # one entry per session, chronological
    release_years: list[int] = field(default_factory=list)
    releases: list[int] = field(default_factory=list)


@dataclass(frozen=True)
class MusicianStats:
    total_prior_sessions: int
    prior_releases: tuple[int, ...]
    instruments: frozenset[str]


class CoPlayIndex:
    """Cumulative pair weights and musician histories, built once, read-only."""

    def __init__(
        self,
        pair_deltas: dict[tuple[str, str], dict[int, int]],
        histories: dict[str, MusicianHistory],
    ):
        self._pairs: dict[tuple[str, str], tuple[list[int], list[int]]] = {}
        for pair, per_year in pair_deltas.items():
            years = sorted(per_year)
            self._pairs[pair] = (years, list(accumulate(per_year[year] for year in years)))
        self._histories = histories

    @classmethod
    def build(cls, d: Dataset) -> "CoPlayIndex":
        pair_deltas: dict[tuple[str, str], dict[int, int]] = defaultdict(dict)
        per_year_counts: dict[str, Counter] = defaultdict(Counter)
        instruments: dict[str, dict[int, set[str]]] = defaultdict(lambda: defaultdict(set))
        histories: dict[str, MusicianHistory] = defaultdict(MusicianHistory)

        for session in d:
            for a, b in combinations(session.musicians, 2):
                per_year = pair_deltas[_pair(a, b)]
                per_year[session.year] = per_year.get(session.year, 0) + 1
            for entry in session.personnel:
                per_year_counts[entry.musician_id][session.year] += 1
                instruments[entry.musician_id][session.year] |= entry.instruments
                history = histories[entry.musician_id]
                history.release_years.append(session.year)
                history.releases.append(session.releases)

        for musician, counts in per_year_counts.items():
            history = histories[musician]
            history.years = sorted(counts)
            history.cumulative = list(accumulate(counts[year] for year in history.years))
            history.instruments = {
                year: frozenset(played) for year, played in instruments[musician].items()
            }

        logger.info("Indexed %d musician pairs over %d musicians", len(pair_deltas), len(histories))
        return cls(dict(pair_deltas), dict(histories))

    def weight(self, a: str, b: str, as_of_year: int) -> int:
        if a == b:
            raise ValueError(f"co-play weight of {a!r} with itself is undefined")
        entry = self._pairs.get(_pair(a, b))
        if entry is None:
            return 0
        years, cumulative = entry
        position = bisect_left(years, as_of_year)
        return cumulative[position - 1] if position else 0

    def total_sessions(self, m: str, as_of_year: int) -> int:
        history = self._histories.get(m)
        if history is None:
            return 0
        position = bisect_left(history.years, as_of_year)
        return history.cumulative[position - 1] if position else 0

    def prior_releases(self, m: str, as_of_year: int) -> tuple[int, ...]:
        history = self._histories.get(m)
        if history is None:
            return ()
        return tuple(history.releases[: bisect_left(history.release_years, as_of_year)])

    def instruments_in_span(self, m: str, first_year: int, last_year: int) -> frozenset[str]:
        """Instruments played in any year of the inclusive range."""
        history = self._histories.get(m)
        if history is None:
            return frozenset()
        start, stop = bisect_left(history.years, first_year), bisect_right(history.years, last_year)
        played: set[str] = set()
        for year in history.years[start:stop]:
            played |= history.instruments[year]
        return frozenset(played)


def build_index(d: Dataset) -> CoPlayIndex:
    return CoPlayIndex.build(d)


def coplay_weight(ix: CoPlayIndex, a: str, b: str, as_of_year: int) -> int:
    return ix.weight(a, b, as_of_year)


def musician_total_sessions(ix: CoPlayIndex, m: str, as_of_year: int) -> int:
    return ix.total_sessions(m, as_of_year)


def prior_release_counts(ix: CoPlayIndex, m: str, as_of_year: int) -> tuple[int, ...]:
    return ix.prior_releases(m, as_of_year)


def instruments_in_span(ix: CoPlayIndex, m: str, first_year: int, last_year: int) -> frozenset[str]:
    return ix.instruments_in_span(m, first_year, last_year)


def session_weight_matrix(ix: CoPlayIndex, s: SessionRecord) -> pd.DataFrame:
    """Weight matrix over the session's musicians, in personnel order.

    Off-diagonal cells are co-play weights as of the session year; the diagonal
    carries each musician's total prior sessions.
    """
    musicians = list(s.musicians)
    values = np.zeros((len(musicians), len(musicians)), dtype=np.int64)
    for i, a in enumerate(musicians):
        values[i, i] = ix.total_sessions(a, s.year)
        for j in range(i + 1, len(musicians)):
            values[i, j] = values[j, i] = ix.weight(a, musicians[j], s.year)
    return pd.DataFrame(values, index=musicians, columns=musicians)


def musician_stats(
    ix: CoPlayIndex,
    m: str,
    as_of_year: int,
    span: tuple[int, int] | None = None,
) -> MusicianStats:
    """History of `m` before `as_of_year`; instruments over the inclusive `span`
    (default: the year before and the year itself)."""
    first, last = span if span is not None else (as_of_year - 1, as_of_year)
    return MusicianStats(
        total_prior_sessions=ix.total_sessions(m, as_of_year),
        prior_releases=ix.prior_releases(m, as_of_year),
        instruments=ix.instruments_in_span(m, first, last),
    )
