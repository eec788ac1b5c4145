"""Within-session triad classification, censuses and closure curves."""
import logging
from collections.abc import Iterable, Iterator
from functools import lru_cache
from itertools import combinations

import numpy as np
import pandas as pd

from app.core.exceptions import InsufficientDataError, InvalidThresholdError
from app.schemas.census import Origin, SessionCensus, TriadLabel, TriadObservation
from app.schemas.records import Dataset, SessionRecord
from app.services.graph import CoPlayIndex, session_weight_matrix

logger = logging.getLogger(__name__)

DEFAULT_THETA = 2
THETA_SWEEP = (2, 3, 5, 10)

# integer codes used in vectorised classification
DISCONNECTED, OPEN, CLOSED, FORBIDDEN = 0, 1, 2, 3
_LABELS = {
    DISCONNECTED: TriadLabel.disconnected,
    OPEN: TriadLabel.open,
    CLOSED: TriadLabel.closed,
    FORBIDDEN: TriadLabel.forbidden,
}

CENSUS_COLUMNS = [
    "session_id", "year", "theta", "n_connected", "n_open", "n_closed", "n_forbidden",
    "d_open", "d_closed", "d_forbidden",
]
TRIPLET_COLUMNS = [
    "session_id", "year", "i", "j", "k", "w_ij", "w_ik", "w_jk", "w1", "w2", "w3",
    "label", "origin", "world",
]


def _check_theta(theta: int) -> None:
    if theta < 2:
        raise InvalidThresholdError(f"theta must be >= 2, got {theta}")


def classify_triad(weights: tuple[int, int, int], theta: int = DEFAULT_THETA) -> TriadLabel:
    _check_theta(theta)
    if any(w < 0 for w in weights):
        raise ValueError(f"weights must be non-negative, got {weights}")
    w1, w2, _ = sorted(weights)
    if w1 > 0:
        return TriadLabel.closed
    if w2 == 0:
        return TriadLabel.disconnected
    return TriadLabel.forbidden if w2 >= theta else TriadLabel.open


def _classify_sorted(ordered: np.ndarray, theta: int) -> np.ndarray:
    """Vectorised classify_triad over rows of ascending weight triples."""
    codes = np.full(len(ordered), DISCONNECTED, dtype=np.int8)
    w1, w2 = ordered[:, 0], ordered[:, 1]
    codes[(w1 == 0) & (w2 > 0)] = OPEN
    codes[(w1 == 0) & (w2 >= theta)] = FORBIDDEN
    codes[w1 > 0] = CLOSED
    return codes


@lru_cache(maxsize=128)
def _triples(n: int) -> np.ndarray:
    if n < 3:
        return np.empty((0, 3), dtype=np.intp)
    return np.array(list(combinations(range(n), 3)), dtype=np.intp)


def _triple_weights(values: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """(w_ij, w_ik, w_jk) per triple and the same rows sorted ascending."""
    idx = _triples(values.shape[0])
    i, j, k = idx[:, 0], idx[:, 1], idx[:, 2]
    raw = np.stack([values[i, j], values[i, k], values[j, k]], axis=1)
    return raw, np.sort(raw, axis=1)


def session_census(
    matrix,
    theta: int = DEFAULT_THETA,
    session_id: str = "",
    year: int | None = None,
) -> SessionCensus:
    """Count open, closed and forbidden triads over all C(n, 3) triples.

    Only off-diagonal cells are read. Sessions with fewer than three musicians
    get an empty census with undefined densities.
    """
    _check_theta(theta)
    values = np.asarray(matrix)
    _, ordered = _triple_weights(values)
    counts = np.bincount(_classify_sorted(ordered, theta), minlength=4)
    return SessionCensus(
        session_id=session_id,
        year=year,
        theta=theta,
        n_open=int(counts[OPEN]),
        n_closed=int(counts[CLOSED]),
        n_forbidden=int(counts[FORBIDDEN]),
    )


def session_triads(matrix: pd.DataFrame, theta: int = DEFAULT_THETA) -> pd.DataFrame:
    """Connected triads of one session with their order statistics,
    ranked by class and then by minimal legs weight."""
    _check_theta(theta)
    names = list(matrix.index)
    values = matrix.to_numpy()
    raw, ordered = _triple_weights(values)
    codes = _classify_sorted(ordered, theta)
    idx = _triples(len(names))
    frame = pd.DataFrame(
        {
            "i": [names[a] for a in idx[:, 0]],
            "j": [names[b] for b in idx[:, 1]],
            "k": [names[c] for c in idx[:, 2]],
            "w_ij": raw[:, 0],
            "w_ik": raw[:, 1],
            "w_jk": raw[:, 2],
            "w3": ordered[:, 2],
            "w2": ordered[:, 1],
            "min_legs_weight": ordered[:, 1],
            "label": [_LABELS[c].value for c in codes],
        }
    )
    frame = frame[codes != DISCONNECTED]
    rank = {"forbidden": 0, "open": 1, "closed": 2}
    return (
        frame.assign(_rank=frame["label"].map(rank))
        .sort_values(["_rank", "min_legs_weight"], ascending=[True, False], kind="mergesort")
        .drop(columns="_rank")
        .reset_index(drop=True)
    )


def _sorted_matrix(ix: CoPlayIndex, s: SessionRecord) -> pd.DataFrame:
    matrix = session_weight_matrix(ix, s)
    order = sorted(matrix.index)
    return matrix.loc[order, order]


def census_sessions(d: Dataset, ix: CoPlayIndex, theta: int = DEFAULT_THETA) -> dict[str, SessionCensus]:
    return {
        s.session_id: session_census(session_weight_matrix(ix, s), theta, s.session_id, s.year)
        for s in d
    }


def census_table(censuses: Iterable[SessionCensus]) -> pd.DataFrame:
    rows = [census.model_dump() for census in censuses]
    return pd.DataFrame(rows, columns=CENSUS_COLUMNS)


def censuses_from_table(frame: pd.DataFrame) -> dict[str, SessionCensus]:
    return {
        str(row.session_id): SessionCensus(
            session_id=str(row.session_id),
            year=int(row.year),
            theta=int(row.theta),
            n_open=int(row.n_open),
            n_closed=int(row.n_closed),
            n_forbidden=int(row.n_forbidden),
        )
        for row in frame.itertuples(index=False)
    }


def _session_frame(ix: CoPlayIndex, s: SessionRecord, theta: int) -> pd.DataFrame | None:
    if s.size < 3:
        return None
    matrix = _sorted_matrix(ix, s)
    names = list(matrix.index)
    raw, ordered = _triple_weights(matrix.to_numpy())
    codes = _classify_sorted(ordered, theta)
    keep = codes != DISCONNECTED
    if not keep.any():
        return None
    idx = _triples(len(names))[keep]
    return pd.DataFrame(
        {
            "session_id": s.session_id,
            "year": s.year,
            "i": np.array(names, dtype=object)[idx[:, 0]],
            "j": np.array(names, dtype=object)[idx[:, 1]],
            "k": np.array(names, dtype=object)[idx[:, 2]],
            "w_ij": raw[keep, 0],
            "w_ik": raw[keep, 1],
            "w_jk": raw[keep, 2],
            "w1": ordered[keep, 0],
            "w2": ordered[keep, 1],
            "w3": ordered[keep, 2],
            "label": [_LABELS[c].value for c in codes[keep]],
        }
    )


def triplet_frame(
    d: Dataset,
    ix: CoPlayIndex,
    theta: int = DEFAULT_THETA,
    origin: Origin = Origin.observed,
    world: int | None = None,
) -> pd.DataFrame:
    """Every connected within-session triad, one row each, in session order
    and then lexicographic musician order."""
    _check_theta(theta)
    parts = [frame for s in d if (frame := _session_frame(ix, s, theta)) is not None]
    if not parts:
        return pd.DataFrame(columns=TRIPLET_COLUMNS)
    frame = pd.concat(parts, ignore_index=True)
    frame["origin"] = Origin(origin).value
    frame["world"] = -1 if world is None else world
    return frame[TRIPLET_COLUMNS]


def pooled_triplets(
    d: Dataset,
    ix: CoPlayIndex,
    theta: int = DEFAULT_THETA,
    origin: Origin = Origin.observed,
    world: int | None = None,
) -> Iterator[TriadObservation]:
    _check_theta(theta)
    origin = Origin(origin)
    for s in d:
        frame = _session_frame(ix, s, theta)
        if frame is None:
            continue
        for row in frame.itertuples(index=False):
            yield TriadObservation(
                session_id=row.session_id,
                musicians=(row.i, row.j, row.k),
                weights=(int(row.w_ij), int(row.w_ik), int(row.w_jk)),
                label=TriadLabel(row.label),
                origin=origin,
                world=world,
            )


def observations_frame(obs: Iterable[TriadObservation]) -> pd.DataFrame:
    rows = []
    for o in obs:
        w1, w2, w3 = o.order_stats
        rows.append(
            {
                "session_id": o.session_id,
                "i": o.musicians[0],
                "j": o.musicians[1],
                "k": o.musicians[2],
                "w1": w1,
                "w2": w2,
                "w3": w3,
                "label": o.label.value,
            }
        )
    return pd.DataFrame(rows, columns=["session_id", "i", "j", "k", "w1", "w2", "w3", "label"])


def closure_curve(
    obs: pd.DataFrame | Iterable[TriadObservation],
    n_quantiles: int = 10_000,
    smoothing_window: int | None = None,
) -> pd.DataFrame:
    """Probability of closure by minimal legs weight quantile.

    Triads are ordered by (w2, w3, session_id, triple) so bins are
    deterministic despite ties, then split into `n_quantiles` bins of equal
    size (sizes differ by at most one). `closure_raw` is the per-bin closed
    share; `closure_probability` is its centred moving average.
    """
    frame = obs if isinstance(obs, pd.DataFrame) else observations_frame(obs)
    if frame.empty:
        raise InsufficientDataError("closure curve needs at least one triad")
    if len(frame) < n_quantiles:
        raise InsufficientDataError(f"{len(frame)} triads cannot fill {n_quantiles} quantiles")
    window = smoothing_window or max(1, n_quantiles // 100)

    ordered = frame.assign(_triple=frame["i"] + "|" + frame["j"] + "|" + frame["k"]).sort_values(
        ["w2", "w3", "session_id", "_triple"], kind="mergesort"
    )
    w2 = ordered["w2"].to_numpy(dtype=float)
    closed = (ordered["w1"].to_numpy() > 0).astype(float)

    bins = np.array_split(np.arange(len(ordered)), n_quantiles)
    curve = pd.DataFrame(
        {
            "quantile": np.arange(1, n_quantiles + 1),
            "size": [len(b) for b in bins],
            "mean_w2": [w2[b].mean() for b in bins],
            "min_w2": [w2[b].min() for b in bins],
            "max_w2": [w2[b].max() for b in bins],
            "closure_raw": [closed[b].mean() for b in bins],
        }
    )
    curve["closure_probability"] = (
        curve["closure_raw"].rolling(window, center=True, min_periods=1).mean()
    )
    return curve


def class_shares(frame: pd.DataFrame) -> dict[str, float]:
    """Share of each class among pooled connected triads."""
    if frame.empty:
        return {label: float("nan") for label in ("open", "closed", "forbidden")}
    counts = frame["label"].value_counts()
    return {label: float(counts.get(label, 0)) / len(frame) for label in ("open", "closed", "forbidden")}
