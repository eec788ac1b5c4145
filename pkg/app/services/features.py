"""Session covariates and the regression table."""
import logging
import math
from collections import Counter
from collections.abc import Iterable, Mapping
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from app.core.exceptions import InsufficientDataError, SessionMismatchError
from app.schemas.census import SessionCensus
from app.schemas.features import FEATURE_COLUMNS, FeatureRow
from app.schemas.records import Dataset, SessionRecord
from app.services.graph import CoPlayIndex, session_weight_matrix
from app.services.triads import DEFAULT_THETA

logger = logging.getLogger(__name__)

# Exclusion reasons, in the order they are checked
RIGHT_CENSORING = "right-censoring window"
EXCLUDED_LEADER = "excluded leader"
NO_RELEASES = "no releases"
NO_CONNECTED_TRIADS = "no connected triads"
MISSING_DISTINCTIVENESS = "missing distinctiveness"
EXCLUSION_REASONS = (
    RIGHT_CENSORING,
    EXCLUDED_LEADER,
    NO_RELEASES,
    NO_CONNECTED_TRIADS,
    MISSING_DISTINCTIVENESS,
)


def median_tie_strength(matrix) -> float:
    """Median over all off-diagonal pair weights, zeros included."""
    values = np.asarray(matrix)
    n = values.shape[0]
    if n < 2:
        raise InsufficientDataError("tie strength needs at least two musicians")
    upper = values[np.triu_indices(n, k=1)]
    return float(np.median(upper))


def instrument_ranking(d: Dataset | Iterable[SessionRecord], top_k: int = 200) -> list[str]:
    """The `top_k` instruments by slot count; ties go to the smaller id."""
    counts: Counter = Counter()
    for s in d:
        for entry in s.personnel:
            counts.update(entry.instruments)
    ranked = sorted(counts.items(), key=lambda item: (-item[1], item[0]))
    return [instrument for instrument, _ in ranked[:top_k]]


class InstrumentSpace:
    """Instrument-count vectors of sessions in the space of ranked instruments.

    Per-year sums of unit vectors make the mean cosine distance to every
    session of a horizon a single dot product.
    """

    def __init__(self, d: Dataset, ranking: list[str], horizon: int = 5):
        self.ranking = ranking
        self.horizon = horizon
        self._position = {instrument: i for i, instrument in enumerate(ranking)}
        self._unit_sums: dict[int, np.ndarray] = {}
        self._counts: Counter = Counter()
        for s in d:
            unit = self.unit(s)
            total = self._unit_sums.setdefault(s.year, np.zeros(len(ranking)))
            if unit is not None:
                total += unit
            self._counts[s.year] += 1

    def vector(self, s: SessionRecord) -> np.ndarray:
        v = np.zeros(len(self.ranking))
        for entry in s.personnel:
            for instrument in entry.instruments:
                position = self._position.get(instrument)
                if position is not None:
                    v[position] += 1
        return v

    def unit(self, s: SessionRecord) -> np.ndarray | None:
        v = self.vector(s)
        norm = np.linalg.norm(v)
        return None if norm == 0 else v / norm

    def distinctiveness(self, s: SessionRecord) -> float | None:
        unit = self.unit(s)
        if unit is None:
            return None
        years = range(s.year - self.horizon, s.year)
        n = sum(self._counts[year] for year in years)
        if n == 0:
            return None
        # zero vectors in the horizon add nothing to the sum, i.e. distance 1
        similarity = sum(float(unit @ self._unit_sums[year]) for year in years if year in self._unit_sums)
        return min(1.0, max(0.0, 1.0 - similarity / n))


def distinctiveness(d: Dataset, s: SessionRecord, top_k: int = 200, horizon: int = 5) -> float | None:
    return InstrumentSpace(d, instrument_ranking(d, top_k), horizon).distinctiveness(s)


def newbies_proportion(ix: CoPlayIndex, s: SessionRecord) -> float:
    """Share of musicians with no session before the session's year."""
    return sum(ix.total_sessions(m, s.year) == 0 for m in s.musicians) / s.size


def median_past_releases(ix: CoPlayIndex, s: SessionRecord) -> float:
    pooled = [count for m in s.musicians for count in ix.prior_releases(m, s.year)]
    return float(np.median(pooled)) if pooled else 0.0


def past_sessions_total(ix: CoPlayIndex, s: SessionRecord) -> int:
    return sum(ix.total_sessions(m, s.year) for m in s.musicians)


def dependent_variable(releases: int, offset: int = 0) -> float:
    return math.log10(releases + offset)


@dataclass
class FeatureTable:
    frame: pd.DataFrame
    exclusions: Counter = field(default_factory=Counter)

    def __len__(self) -> int:
        return len(self.frame)

    def exclusion_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            [(reason, self.exclusions.get(reason, 0)) for reason in EXCLUSION_REASONS],
            columns=["reason", "sessions"],
        )


def _exclusion_reason(
    s: SessionRecord,
    census: SessionCensus,
    cutoff_year: int | None,
    excluded: set[str],
) -> str | None:
    if cutoff_year is not None and s.year > cutoff_year:
        return RIGHT_CENSORING
    if s.leader_id in excluded:
        return EXCLUDED_LEADER
    if s.releases < 1:
        return NO_RELEASES
    if not census.defined:
        return NO_CONNECTED_TRIADS
    return None


def feature_row(
    ix: CoPlayIndex,
    s: SessionRecord,
    census: SessionCensus,
    distinct: float | None,
    release_offset: int = 0,
) -> FeatureRow:
    tie = median_tie_strength(session_weight_matrix(ix, s))
    return FeatureRow(
        session_id=s.session_id,
        leader_id=s.leader_id,
        releases=s.releases,
        log10_releases=dependent_variable(s.releases, release_offset),
        d_forbidden=census.d_forbidden,
        d_forbidden_sq=census.d_forbidden**2,
        d_closed=census.d_closed,
        d_closed_sq=census.d_closed**2,
        d_open=census.d_open,
        median_tie_strength=tie,
        median_tie_strength_sq=tie**2,
        distinctiveness=distinct,
        n_musicians=s.size,
        newbies_proportion=newbies_proportion(ix, s),
        median_past_releases=median_past_releases(ix, s),
        past_sessions_total=past_sessions_total(ix, s),
        year=s.year,
    )


def assemble_features(
    d: Dataset,
    ix: CoPlayIndex,
    censuses: Mapping[str, SessionCensus],
    theta: int = DEFAULT_THETA,
    cutoff_year: int | None = 2000,
    exclusions: Iterable[str] | None = None,
    top_k: int = 200,
    horizon: int = 5,
    release_offset: int = 0,
) -> FeatureTable:
    """One FeatureRow per usable session, in (year, session_id) order.

    `exclusions` are leader ids whose sessions are dropped. Every dropped
    session is counted under the first reason that applies.
    """
    excluded = set(exclusions or ())
    missing = [s.session_id for s in d if s.session_id not in censuses]
    if missing:
        raise SessionMismatchError(f"{len(missing)} sessions have no census, e.g. {missing[0]!r}")

    # ranking over the analysed period only
    eligible = [s for s in d if cutoff_year is None or s.year <= cutoff_year]
    space = InstrumentSpace(d, instrument_ranking(eligible, top_k), horizon)

    rows: list[dict] = []
    dropped: Counter = Counter()
    for s in d:
        census = censuses[s.session_id]
        if census.theta != theta:
            raise ValueError(f"census of {s.session_id!r} is at theta={census.theta}, expected {theta}")
        reason = _exclusion_reason(s, census, cutoff_year, excluded)
        distinct = None
        if reason is None:
            distinct = space.distinctiveness(s)
            if distinct is None:
                reason = MISSING_DISTINCTIVENESS
        if reason is not None:
            dropped[reason] += 1
            continue
        rows.append(feature_row(ix, s, census, distinct, release_offset).model_dump())

    logger.info(
        "Assembled %d feature rows; excluded %s",
        len(rows),
        ", ".join(f"{reason}: {dropped[reason]}" for reason in EXCLUSION_REASONS if dropped[reason]) or "none",
    )
    return FeatureTable(frame=pd.DataFrame(rows, columns=FEATURE_COLUMNS), exclusions=dropped)
