"""Rewired null worlds.

A world reassigns every personnel bundle (one musician's instrument set in
one session) to some musician so that:

* sessions keep their bundles, hence size and instrument combination;
* within each window block every musician fills as many slots as observed;
* a musician only fills a bundle whose every instrument they played in the
  slot's year or the year before (or in both years, in strict mode);
* nobody appears twice in one session.

Slots are filled block by block, tightest pools first. A slot with no direct
candidate gets up to `repair_attempts` random swaps; failing that it is pinned
to its observed musician, evicting whatever blocks that, and counted as
infeasible. Pinned slots are exempt from the qualification check only.
"""
import logging
from collections import Counter, defaultdict, deque
from collections.abc import Mapping, Sequence
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Literal

import numpy as np
import pandas as pd
from rich.progress import track

from app.core.config import settings
from app.core.exceptions import DatasetError, InsufficientDataError, SessionMismatchError
from app.core.logging import console
from app.core.seeds import STAGE_REWIRE, derive_seed
from app.schemas.census import SessionCensus
from app.schemas.records import Dataset, PersonnelEntry, SessionRecord
from app.schemas.world import ConstraintReport, RewiredWorld, Violation, WorldManifest
from app.services.graph import CoPlayIndex, build_index
from app.services.records import dataset_digest
from app.services.triads import DEFAULT_THETA, census_sessions

logger = logging.getLogger(__name__)

Qualification = Literal["span", "both_years"]

DEFAULT_REPAIR_ATTEMPTS = 100
DEFAULT_WINDOW = 1
WINDOW_VARIANTS = (2, 5, 10)

WORLD_COLUMNS = ["session_id", "bundle", "musician_id", "instrument_id"]


def window_block(year: int, first_year: int, window_years: int) -> int:
    """Tumbling calendar blocks of `window_years`, aligned to the first year."""
    if window_years < 1:
        raise ValueError(f"window_years must be >= 1, got {window_years}")
    return (year - first_year) // window_years


@dataclass(frozen=True, slots=True)
class Slot:
    session_id: str
    bundle: int
    year: int
    signature: tuple[str, ...]
    original: str


@dataclass(frozen=True)
class SlotPool:
    block: int
    year: int
    signature: tuple[str, ...]
    slots: tuple[Slot, ...]
    # sorted; qualified and active in the block
    candidates: tuple[str, ...]


class _Qualifier:
    """Instrument lookups on the observed history."""

    def __init__(self, d: Dataset, mode: Qualification):
        if mode not in ("span", "both_years"):
            raise ValueError(f"unknown qualification mode {mode!r}")
        self.mode = mode
        # (year, instrument) -> musicians who played it that year
        self._players: dict[tuple[int, str], set[str]] = defaultdict(set)
        self._played: dict[tuple[str, int], set[str]] = defaultdict(set)
        for s in d:
            for entry in s.personnel:
                self._played[(entry.musician_id, s.year)] |= entry.instruments
                for instrument in entry.instruments:
                    self._players[(s.year, instrument)].add(entry.musician_id)

    def players(self, instrument: str, year: int) -> set[str]:
        current = self._players.get((year, instrument), set())
        previous = self._players.get((year - 1, instrument), set())
        if self.mode == "span":
            return current | previous
        return current & previous

    def candidates(self, signature: tuple[str, ...], year: int, active: set[str]) -> tuple[str, ...]:
        qualified = set(active)
        for instrument in signature:
            qualified &= self.players(instrument, year)
            if not qualified:
                break
        return tuple(sorted(qualified))

    def qualifies(self, m: str, signature: tuple[str, ...], year: int) -> bool:
        current = self._played.get((m, year), set())
        previous = self._played.get((m, year - 1), set())
        if self.mode == "span":
            return set(signature) <= current | previous
        return set(signature) <= current & previous


def _blocks(d: Dataset, window_years: int) -> dict[int, list[SessionRecord]]:
    blocks: dict[int, list[SessionRecord]] = defaultdict(list)
    if not len(d):
        return blocks
    for s in d:
        blocks[window_block(s.year, d.first_year, window_years)].append(s)
    return dict(sorted(blocks.items()))


def activity_counts(d: Dataset, window_years: int) -> dict[int, Counter]:
    """Per block, the number of sessions each musician played."""
    return {
        block: Counter(m for s in sessions for m in s.musicians)
        for block, sessions in _blocks(d, window_years).items()
    }


def build_pools(
    d: Dataset,
    window_years: int = DEFAULT_WINDOW,
    qualification: Qualification = "span",
) -> list[SlotPool]:
    """Group every bundle into a pool by (block, year, instrument signature).

    Candidates are the block's active musicians who qualify for the signature
    in that year; activity budgets are applied when the world is drawn.
    """
    qualifier = _Qualifier(d, qualification)
    pools: list[SlotPool] = []
    for block, sessions in _blocks(d, window_years).items():
        active = {m for s in sessions for m in s.musicians}
        grouped: dict[tuple[int, tuple[str, ...]], list[Slot]] = defaultdict(list)
        for s in sessions:
            for bundle, entry in enumerate(s.personnel):
                grouped[(s.year, entry.signature)].append(
                    Slot(s.session_id, bundle, s.year, entry.signature, entry.musician_id)
                )
        for (year, signature), slots in sorted(grouped.items()):
            pools.append(
                SlotPool(
                    block=block,
                    year=year,
                    signature=signature,
                    slots=tuple(slots),
                    candidates=qualifier.candidates(signature, year, active),
                )
            )
    logger.debug("Built %d slot pools (window %d, %s)", len(pools), window_years, qualification)
    return pools


class _BlockFill:
    """Mutable state of one block while its slots are being filled."""

    def __init__(self, slots: list[Slot], candidates: list[tuple[str, ...]], budget: Counter, rng, attempts: int):
        self.slots = slots
        self.candidates = candidates
        self.remaining = Counter(budget)
        self.rng = rng
        self.attempts = attempts
        self.holder: list[str | None] = [None] * len(slots)
        self.members: dict[str, set[str]] = defaultdict(set)
        self.held_by: dict[str, set[int]] = defaultdict(set)
        self.pinned: set[int] = set()

    def _pick(self, options: Sequence):
        return options[int(self.rng.integers(len(options)))]

    def assign(self, slot: int, m: str) -> None:
        self.holder[slot] = m
        self.members[self.slots[slot].session_id].add(m)
        self.held_by[m].add(slot)
        self.remaining[m] -= 1

    def unassign(self, slot: int) -> None:
        m = self.holder[slot]
        self.holder[slot] = None
        self.members[self.slots[slot].session_id].discard(m)
        self.held_by[m].discard(slot)
        self.remaining[m] += 1

    def direct(self, slot: int) -> list[str]:
        taken = self.members[self.slots[slot].session_id]
        return [m for m in self.candidates[slot] if self.remaining[m] > 0 and m not in taken]

    def repair(self, slot: int) -> bool:
        """Move a qualified but exhausted musician here and backfill their slot."""
        taken = self.members[self.slots[slot].session_id]
        movable = [m for m in self.candidates[slot] if m not in taken]
        if not movable:
            return False
        for _ in range(self.attempts):
            m1 = self._pick(movable)
            held = sorted(self.held_by[m1] - self.pinned)
            if not held:
                continue
            other = self._pick(held)
            replacements = self.direct(other)
            if not replacements:
                continue
            m2 = self._pick(replacements)
            self.unassign(other)
            self.assign(other, m2)
            self.assign(slot, m1)
            return True
        return False

    def pin(self, slot: int, queue: deque) -> None:
        m0 = self.slots[slot].original
        session_id = self.slots[slot].session_id
        if m0 in self.members[session_id]:
            clash = next(s for s in sorted(self.held_by[m0]) if self.slots[s].session_id == session_id)
            self.unassign(clash)
            queue.appendleft(clash)
        if self.remaining[m0] <= 0:
            # m0 holds at least one unpinned slot: its pinned slots are its own originals
            victim = self._pick(sorted(self.held_by[m0] - self.pinned))
            self.unassign(victim)
            queue.appendleft(victim)
        self.assign(slot, m0)
        self.pinned.add(slot)

    def run(self) -> int:
        keys = self.rng.random(len(self.slots))
        order = sorted(range(len(self.slots)), key=lambda i: (len(self.candidates[i]), keys[i]))
        queue = deque(order)
        infeasible = 0
        while queue:
            slot = queue.popleft()
            if self.holder[slot] is not None:
                continue
            options = self.direct(slot)
            if options:
                self.assign(slot, self._pick(options))
            elif not self.repair(slot):
                self.pin(slot, queue)
                infeasible += 1
        return infeasible


class RewireService:
    """Draws rewired worlds for one dataset; pools and budgets are built once."""

    def __init__(
        self,
        d: Dataset,
        window_years: int = DEFAULT_WINDOW,
        qualification: Qualification = "span",
        repair_attempts: int = DEFAULT_REPAIR_ATTEMPTS,
    ):
        self.dataset = d
        self.window_years = window_years
        self.qualification = qualification
        self.repair_attempts = repair_attempts
        self.pools = build_pools(d, window_years, qualification)
        self.budgets = activity_counts(d, window_years)
        self.digest = dataset_digest(d)

    def generate(self, seed: int, index: int = 0) -> RewiredWorld:
        rng = np.random.default_rng(seed)
        assignment = {s.session_id: [""] * s.size for s in self.dataset}
        pinned: list[tuple[str, int]] = []

        by_block: dict[int, list[SlotPool]] = defaultdict(list)
        for pool in self.pools:
            by_block[pool.block].append(pool)

        for block in sorted(by_block):
            slots = [slot for pool in by_block[block] for slot in pool.slots]
            candidates = [pool.candidates for pool in by_block[block] for _ in pool.slots]
            fill = _BlockFill(slots, candidates, self.budgets[block], rng, self.repair_attempts)
            fill.run()
            for i, slot in enumerate(slots):
                assignment[slot.session_id][slot.bundle] = fill.holder[i]
            pinned.extend((slots[i].session_id, slots[i].bundle) for i in sorted(fill.pinned))

        world = RewiredWorld(
            index=index,
            seed=seed,
            window_years=self.window_years,
            qualification=self.qualification,
            dataset_digest=self.digest,
            assignment={session_id: tuple(bundles) for session_id, bundles in assignment.items()},
            pinned=tuple(sorted(pinned)),
        )
        logger.debug("World %d (seed %d): %d infeasible slots", index, seed, world.infeasible_slots)
        return world

    def verify(self, w: RewiredWorld) -> ConstraintReport:
        return verify_world(self.dataset, w)


def generate_world(
    d: Dataset,
    window_years: int = DEFAULT_WINDOW,
    seed: int = 0,
    qualification: Qualification = "span",
    repair_attempts: int = DEFAULT_REPAIR_ATTEMPTS,
) -> RewiredWorld:
    return RewireService(d, window_years, qualification, repair_attempts).generate(seed)


def verify_world(d: Dataset, w: RewiredWorld) -> ConstraintReport:
    """Count violations of each constraint; an empty report means the world is valid."""
    report = ConstraintReport()

    def flag(constraint: str, session_id=None, musician_id=None, detail: str = "") -> None:
        setattr(report, constraint, getattr(report, constraint) + 1)
        report.violations.append(
            Violation(constraint=constraint, session_id=session_id, musician_id=musician_id, detail=detail)
        )

    for session_id in sorted(set(w.assignment) - {s.session_id for s in d}):
        flag("session_size", session_id, detail="session not in dataset")

    pinned = set(w.pinned)
    qualifier = _Qualifier(d, w.qualification)  # type: ignore[arg-type]
    for s in d:
        bundles = w.assignment.get(s.session_id)
        if bundles is None or len(bundles) != s.size:
            found = 0 if bundles is None else len(bundles)
            flag("session_size", s.session_id, detail=f"{found} bundles, expected {s.size}")
            continue
        for musician_id, count in Counter(bundles).items():
            if count > 1:
                flag("uniqueness", s.session_id, musician_id, f"appears {count} times")
        for bundle, (musician_id, entry) in enumerate(zip(bundles, s.personnel)):
            if (s.session_id, bundle) in pinned:
                continue
            if not qualifier.qualifies(musician_id, entry.signature, s.year):
                flag(
                    "qualification",
                    s.session_id,
                    musician_id,
                    f"bundle {bundle} needs {','.join(entry.signature)} in {s.year - 1}-{s.year}",
                )

    observed = activity_counts(d, w.window_years)
    rewired: dict[int, Counter] = defaultdict(Counter)
    for s in d:
        block = window_block(s.year, d.first_year, w.window_years)
        rewired[block].update(w.assignment.get(s.session_id, ()))
    for block in sorted(observed):
        for musician_id in sorted(set(observed[block]) | set(rewired[block])):
            expected, found = observed[block][musician_id], rewired[block][musician_id]
            if expected != found:
                flag("activity", None, musician_id, f"block {block}: {found} sessions, expected {expected}")
    return report


def materialize_world(d: Dataset, w: RewiredWorld) -> Dataset:
    """The rewired history as a Dataset; leaders, years and releases stay put."""
    sessions = []
    for s in d:
        bundles = w.assignment[s.session_id]
        if len(bundles) != s.size:
            raise DatasetError(f"world {w.index}: session {s.session_id!r} has {len(bundles)} bundles")
        sessions.append(
            s.model_copy(
                update={
                    "personnel": tuple(
                        PersonnelEntry(musician_id=m, instruments=entry.instruments)
                        for m, entry in zip(bundles, s.personnel)
                    )
                }
            )
        )
    return Dataset(sessions)


def world_index(d: Dataset, w: RewiredWorld) -> tuple[Dataset, CoPlayIndex]:
    rewired = materialize_world(d, w)
    return rewired, build_index(rewired)


def world_census(d: Dataset, w: RewiredWorld, theta: int = DEFAULT_THETA) -> dict[str, SessionCensus]:
    """Census of every session with weights recomputed from the world's own past."""
    rewired, ix = world_index(d, w)
    return census_sessions(rewired, ix, theta)


@dataclass
class DensityComparison:
    table: pd.DataFrame
    # share of sessions whose mean rewired density exceeds the observed one
    share_rewired_higher: float

    @property
    def differences(self) -> np.ndarray:
        return self.table["difference"].to_numpy(dtype=float)


def compare_forbidden_densities(
    observed: Mapping[str, SessionCensus],
    worlds: Sequence[Mapping[str, SessionCensus]],
    only_with_forbidden: bool = True,
) -> DensityComparison:
    """Observed against mean rewired forbidden density, per session.

    Sessions without connected triads in a world count as zero density there.
    By default only sessions with at least one observed forbidden triad enter.
    """
    if not worlds:
        raise InsufficientDataError("no rewired worlds to compare against")
    expected = set(observed)
    for i, world in enumerate(worlds):
        if set(world) != expected:
            missing, extra = len(expected - set(world)), len(set(world) - expected)
            raise SessionMismatchError(f"world {i}: {missing} sessions missing, {extra} unexpected")

    rows = []
    for session_id in sorted(observed, key=lambda sid: (observed[sid].year or 0, sid)):
        census = observed[session_id]
        if only_with_forbidden and census.n_forbidden < 1:
            continue
        if not census.defined:
            continue
        rewired = np.mean([w[session_id].d_forbidden if w[session_id].defined else 0.0 for w in worlds])
        rows.append(
            {
                "session_id": session_id,
                "year": census.year,
                "observed": census.d_forbidden,
                "rewired_mean": float(rewired),
                "difference": float(rewired) - census.d_forbidden,
            }
        )
    table = pd.DataFrame(rows, columns=["session_id", "year", "observed", "rewired_mean", "difference"])
    share = float((table["difference"] > 0).mean()) if len(table) else float("nan")
    logger.info(
        "Compared %d sessions over %d worlds; rewired higher in %.1f%%",
        len(table), len(worlds), 100 * share if len(table) else float("nan"),
    )
    return DensityComparison(table=table, share_rewired_higher=share)


_worker: RewireService | None = None


def _init_worker(service: RewireService) -> None:
    global _worker
    _worker = service


def _generate_in_worker(job: tuple[int, int]) -> RewiredWorld:
    seed, index = job
    return _worker.generate(seed, index)


def generate_ensemble(
    d: Dataset,
    n_worlds: int = 100,
    window_years: int = DEFAULT_WINDOW,
    master_seed: int = 0,
    qualification: Qualification = "span",
    repair_attempts: int = DEFAULT_REPAIR_ATTEMPTS,
    n_jobs: int | None = None,
) -> list[RewiredWorld]:
    """`n_worlds` worlds, the i-th seeded by `derive_seed(master, rewire, i)`.

    Results come back in index order whatever the number of workers.
    """
    service = RewireService(d, window_years, qualification, repair_attempts)
    jobs = [(derive_seed(master_seed, STAGE_REWIRE, i), i) for i in range(n_worlds)]
    n_jobs = n_jobs or settings.N_JOBS

    if n_jobs > 1 and n_worlds > 1:
        with ProcessPoolExecutor(max_workers=n_jobs, initializer=_init_worker, initargs=(service,)) as pool:
            worlds = list(
                track(pool.map(_generate_in_worker, jobs), total=n_worlds, description="Rewiring", console=console)
            )
    else:
        worlds = [
            service.generate(seed, index)
            for seed, index in track(jobs, description="Rewiring", console=console)
        ]

    total = sum(w.infeasible_slots for w in worlds)
    logger.info(
        "Generated %d worlds (window %d, %s): %d infeasible slots in total",
        n_worlds, window_years, qualification, total,
    )
    return worlds


def world_frame(d: Dataset, w: RewiredWorld) -> pd.DataFrame:
    """personnel.csv-shaped rows of a world, with the bundle index kept."""
    rows = [
        (s.session_id, bundle, musician_id, instrument)
        for s in d
        for bundle, (musician_id, entry) in enumerate(zip(w.assignment[s.session_id], s.personnel))
        for instrument in entry.signature
    ]
    return pd.DataFrame(rows, columns=WORLD_COLUMNS)


def save_world(d: Dataset, w: RewiredWorld, directory: Path | str) -> tuple[Path, Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    stem = f"world_{w.index:03d}"
    table_path, manifest_path = directory / f"{stem}.csv", directory / f"{stem}.json"
    world_frame(d, w).to_csv(table_path, index=False, lineterminator="\n")
    manifest_path.write_text(WorldManifest.of(w).model_dump_json(indent=2), encoding="utf-8")
    return table_path, manifest_path


def load_world(d: Dataset, table_path: Path | str) -> RewiredWorld:
    """Read a world written by `save_world`; the manifest sits next to the table."""
    table_path = Path(table_path)
    manifest = WorldManifest.model_validate_json(
        table_path.with_suffix(".json").read_text(encoding="utf-8")
    )
    if manifest.dataset_digest and manifest.dataset_digest != dataset_digest(d):
        raise DatasetError(f"{table_path}: world was drawn on a different dataset")

    frame = pd.read_csv(table_path, dtype={"session_id": str, "musician_id": str, "instrument_id": str})
    bundles = frame.drop_duplicates(["session_id", "bundle"]).sort_values(["session_id", "bundle"])
    assignment: dict[str, tuple[str, ...]] = {
        str(session_id): tuple(group["musician_id"])
        for session_id, group in bundles.groupby("session_id", sort=True)
    }
    return RewiredWorld(
        index=manifest.index,
        seed=manifest.seed,
        window_years=manifest.window_years,
        qualification=manifest.qualification,
        dataset_digest=manifest.dataset_digest,
        assignment=assignment,
        pinned=tuple(tuple(p) for p in manifest.pinned),
    )
