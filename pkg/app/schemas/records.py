import hashlib
from collections.abc import Iterable, Iterator, Mapping
from types import MappingProxyType

from pydantic import BaseModel, ConfigDict, Field, field_validator

from app.core.exceptions import DatasetError, DuplicateSessionError, EmptyPersonnelError


class PersonnelEntry(BaseModel):
    """One musician in one session, with every instrument they played there."""

    model_config = ConfigDict(frozen=True)

    musician_id: str = Field(min_length=1)
    instruments: frozenset[str] = Field(min_length=1)

    @field_validator("instruments")
    @classmethod
    def check_instruments(cls, value: frozenset[str]) -> frozenset[str]:
        if any(not instrument for instrument in value):
            raise ValueError("instrument ids must be non-empty")
        return value

    @property
    def signature(self) -> tuple[str, ...]:
        """Sorted instrument set, the key rewired slots are pooled by."""
        return tuple(sorted(self.instruments))


class SessionRecord(BaseModel):
    model_config = ConfigDict(frozen=True)

    session_id: str = Field(min_length=1)
    leader_id: str = Field(min_length=1)
    year: int
    personnel: tuple[PersonnelEntry, ...] = Field(min_length=1)
    releases: int = Field(ge=0)

    @field_validator("personnel")
    @classmethod
    def check_unique_musicians(cls, value: tuple[PersonnelEntry, ...]) -> tuple[PersonnelEntry, ...]:
        seen: set[str] = set()
        for entry in value:
            if entry.musician_id in seen:
                raise ValueError(f"musician {entry.musician_id!r} listed twice")
            seen.add(entry.musician_id)
        return value

    @property
    def musicians(self) -> tuple[str, ...]:
        return tuple(entry.musician_id for entry in self.personnel)

    @property
    def size(self) -> int:
        return len(self.personnel)


class Dataset:
    """Validated, immutable collection of sessions.

    Iteration is ordered by (year, session_id). The per-year index is derived
    once at construction.
    """

    def __init__(
        self,
        sessions: Iterable[SessionRecord],
        min_year: int | None = None,
        max_year: int | None = None,
    ):
        by_id: dict[str, SessionRecord] = {}
        for session in sessions:
            if session.session_id in by_id:
                raise DuplicateSessionError(f"duplicate session_id {session.session_id!r}")
            if not session.personnel:
                raise EmptyPersonnelError(f"session {session.session_id!r} has no personnel")
            if min_year is not None and session.year < min_year:
                raise DatasetError(f"session {session.session_id!r}: year {session.year} before {min_year}")
            if max_year is not None and session.year > max_year:
                raise DatasetError(f"session {session.session_id!r}: year {session.year} after {max_year}")
            by_id[session.session_id] = session

        ordered = sorted(by_id.values(), key=lambda s: (s.year, s.session_id))
        self._sessions: tuple[SessionRecord, ...] = tuple(ordered)
        self._by_id = MappingProxyType({s.session_id: s for s in ordered})

        by_year: dict[int, list[SessionRecord]] = {}
        for session in ordered:
            by_year.setdefault(session.year, []).append(session)
        self._by_year = MappingProxyType({year: tuple(group) for year, group in by_year.items()})

    def __reduce__(self):
        # mapping proxies do not pickle; rebuild from the ordered sessions
        return (Dataset, (self._sessions,))

    def __iter__(self) -> Iterator[SessionRecord]:
        return iter(self._sessions)

    def __len__(self) -> int:
        return len(self._sessions)

    def __contains__(self, session_id: object) -> bool:
        return session_id in self._by_id

    def __getitem__(self, session_id: str) -> SessionRecord:
        return self._by_id[session_id]

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Dataset):
            return NotImplemented
        return self._sessions == other._sessions

    def __repr__(self) -> str:
        return f"Dataset(sessions={len(self)}, years={self.years[:1]}..{self.years[-1:]})"

    @property
    def sessions(self) -> tuple[SessionRecord, ...]:
        return self._sessions

    @property
    def by_year(self) -> Mapping[int, tuple[SessionRecord, ...]]:
        return self._by_year

    @property
    def years(self) -> list[int]:
        return sorted(self._by_year)

    @property
    def first_year(self) -> int | None:
        return self._sessions[0].year if self._sessions else None

    @property
    def musicians(self) -> list[str]:
        return sorted({m for session in self._sessions for m in session.musicians})

    @property
    def n_personnel_rows(self) -> int:
        """Number of (musician, instrument) pairings across all sessions."""
        return sum(len(entry.instruments) for s in self._sessions for entry in s.personnel)

    def digest(self) -> str:
        """SHA-256 over the canonical serialization of every session."""
        sha = hashlib.sha256()
        for session in self._sessions:
            sha.update(f"{session.session_id}\t{session.leader_id}\t{session.year}\t{session.releases}\n".encode())
            for entry in session.personnel:
                sha.update(f"\t{entry.musician_id}\t{','.join(entry.signature)}\n".encode())
        return sha.hexdigest()
