"""Synthetic session corpora with planted collaboration and success structure."""
import logging
import math

import numpy as np

from app.core.config import SynthParams
from app.core.exceptions import InfeasibleParametersError
from app.schemas.records import Dataset, PersonnelEntry, SessionRecord
from app.services.graph import build_index
from app.services.triads import census_sessions

logger = logging.getLogger(__name__)


def null_params(params: SynthParams) -> SynthParams:
    """The same corpus shape with no leader loyalty and a flat success rule."""
    return params.model_copy(update={"loyalty": 0.0, "success_linear": 0.0, "success_quadratic": 0.0})


def _check(params: SynthParams) -> None:
    if params.n_leaders > params.n_musicians:
        raise InfeasibleParametersError("more leaders than musicians")
    if params.roster_size >= params.n_musicians:
        raise InfeasibleParametersError("leader roster must be smaller than the musician pool")
    expected_active = math.floor(params.activity * params.n_musicians)
    if params.max_size > expected_active:
        raise InfeasibleParametersError(
            f"sessions of {params.max_size} musicians exceed the ~{expected_active} active musicians per year"
        )


def _draw_releases(rng: np.random.Generator, mean: float, alpha: float) -> int:
    """1 + a negative binomial count with the given mean (Poisson when alpha is 0)."""
    rate = rng.gamma(1.0 / alpha, alpha * mean) if alpha > 0 else mean
    return 1 + int(rng.poisson(rate))


def synth_corpus(params: SynthParams | None = None, seed: int = 0) -> Dataset:
    """Draw a corpus year by year.

    Each leader has a fixed circle of `roster_size` sidemen; a session's
    sidemen come from the circle with probability `loyalty` and uniformly from
    the year's active musicians otherwise. Releases are 1 plus a negative
    binomial count whose log mean is quadratic in the session's forbidden
    triad density at `success_theta`.
    """
    params = params or SynthParams()
    _check(params)
    rng = np.random.default_rng(seed)

    instruments = [f"i{k:02d}" for k in range(params.n_instruments)]
    popularity = 1.0 / np.arange(1, params.n_instruments + 1)
    popularity /= popularity.sum()
    musicians = [f"m{k:04d}" for k in range(params.n_musicians)]
    plays: dict[str, frozenset[str]] = {}
    for m in musicians:
        primary = instruments[rng.choice(params.n_instruments, p=popularity)]
        played = {primary}
        if rng.random() < params.doubling:
            played.add(instruments[rng.choice(params.n_instruments, p=popularity)])
        plays[m] = frozenset(played)

    leaders = musicians[: params.n_leaders]
    circles = {
        leader: [musicians[i] for i in rng.choice(np.arange(1, params.n_musicians), params.roster_size, replace=False)]
        for leader in leaders
    }

    sessions: list[SessionRecord] = []
    for offset in range(params.n_years):
        year = params.first_year + offset
        active = [m for m in musicians if rng.random() < params.activity]
        active_leaders = [m for m in leaders if m in set(active)] or leaders
        active_set = set(active) | set(active_leaders)
        for k in range(params.sessions_per_year):
            leader = active_leaders[rng.integers(len(active_leaders))]
            size = int(rng.integers(params.min_size, params.max_size + 1))
            members = [leader]
            while len(members) < size:
                circle = [m for m in circles[leader] if m in active_set and m not in members]
                anyone = sorted(active_set.difference(members))
                pool = circle if circle and rng.random() < params.loyalty else anyone
                if not pool:
                    raise InfeasibleParametersError(f"year {year}: not enough active musicians for a session of {size}")
                members.append(pool[rng.integers(len(pool))])
            sessions.append(
                SessionRecord(
                    session_id=f"s{year}-{k:03d}",
                    leader_id=leader,
                    year=year,
                    personnel=tuple(PersonnelEntry(musician_id=m, instruments=plays[m]) for m in members),
                    releases=0,
                )
            )

    draft = Dataset(sessions)
    censuses = census_sessions(draft, build_index(draft), params.success_theta)
    final = []
    for s in draft:
        census = censuses[s.session_id]
        d = census.d_forbidden if census.defined else 0.0
        mean = math.exp(params.success_base + params.success_linear * d + params.success_quadratic * d * d)
        final.append(s.model_copy(update={"releases": _draw_releases(rng, mean, params.success_alpha)}))

    corpus = Dataset(final)
    logger.info(
        "Synthesized %d sessions over %d years (%d musicians, loyalty %.2f)",
        len(corpus), params.n_years, len(corpus.musicians), params.loyalty,
    )
    return corpus
