import logging
import re
from collections.abc import Iterable
from datetime import datetime
from pathlib import Path

import pandas as pd
from pydantic import ValidationError

from app.core.config import settings
from app.core.exceptions import (
    DatasetError,
    DuplicateSessionError,
    EmptyPersonnelError,
    RecordParseError,
    ReferentialError,
)
from app.schemas.records import Dataset, PersonnelEntry, SessionRecord

logger = logging.getLogger(__name__)

SESSION_COLUMNS = ["session_id", "leader_id", "year", "releases"]
PERSONNEL_COLUMNS = ["session_id", "musician_id", "instrument_id"]

_HEADER = re.compile(r"^\[SESSION\s+(?P<id>\S+)\]$")
_KEYED = re.compile(r"^(?P<key>LEADER|DATE|RELEASES)\s*:\s*(?P<value>.*)$")
_MUSICIAN = re.compile(r"^(?P<id>[^:\s]+)\s*:\s*(?P<instruments>.+)$")


def _parse_year(value: str, line_no: int) -> int:
    if re.fullmatch(r"\d{4}", value):
        return int(value)
    try:
        # full date form, e.g. "March 2, 1959"
        return datetime.strptime(value, "%B %d, %Y").year
    except ValueError:
        raise RecordParseError(f"unrecognised date {value!r}", line_no) from None


def parse_session_record(text_block: str, first_line: int = 1) -> SessionRecord:
    """Parse one `[SESSION id]` block.

    `first_line` is the line number of the block's first line within its
    file, so errors point at the right place.
    """
    lines = [(first_line + offset, raw.strip()) for offset, raw in enumerate(text_block.splitlines())]
    lines = [(line_no, line) for line_no, line in lines if line]
    if not lines:
        raise RecordParseError("empty record", first_line)

    header_line, header = lines[0]
    match = _HEADER.match(header)
    if match is None:
        raise RecordParseError(f"malformed header {header!r}", header_line)
    session_id = match["id"]

    fields: dict[str, tuple[int, str]] = {}
    personnel: dict[str, set[str]] = {}
    for line_no, line in lines[1:]:
        keyed = _KEYED.match(line)
        if keyed is not None:
            key = keyed["key"]
            if key in fields:
                raise RecordParseError(f"duplicate {key} line", line_no)
            if personnel:
                raise RecordParseError(f"{key} line after musician lines", line_no)
            fields[key] = (line_no, keyed["value"].strip())
            continue

        musician = _MUSICIAN.match(line)
        if musician is None:
            raise RecordParseError(f"unrecognised line {line!r}", line_no)
        musician_id = musician["id"]
        if musician_id in personnel:
            raise RecordParseError(f"duplicate musician line for {musician_id!r}", line_no)
        instruments = [part.strip() for part in musician["instruments"].split(",")]
        if any(not instrument for instrument in instruments):
            raise RecordParseError(f"empty instrument for {musician_id!r}", line_no)
        personnel[musician_id] = set(instruments)

    last_line = lines[-1][0]
    if "LEADER" not in fields or not fields["LEADER"][1]:
        raise RecordParseError("missing leader", fields.get("LEADER", (last_line, ""))[0])
    if "DATE" not in fields or not fields["DATE"][1]:
        raise RecordParseError("missing year", fields.get("DATE", (last_line, ""))[0])
    if "RELEASES" not in fields:
        raise RecordParseError("missing releases", last_line)
    if not personnel:
        raise RecordParseError("no musician lines", last_line)

    date_line, date_text = fields["DATE"]
    year = _parse_year(date_text, date_line)
    releases_line, releases_text = fields["RELEASES"]
    if not re.fullmatch(r"\d+", releases_text):
        raise RecordParseError(f"releases must be a non-negative integer, got {releases_text!r}", releases_line)

    return SessionRecord(
        session_id=session_id,
        leader_id=fields["LEADER"][1],
        year=year,
        personnel=tuple(
            PersonnelEntry(musician_id=musician_id, instruments=frozenset(instruments))
            for musician_id, instruments in personnel.items()
        ),
        releases=int(releases_text),
    )


def parse_records(text: str) -> list[SessionRecord]:
    """Parse a file of blank-line separated record blocks."""
    records: list[SessionRecord] = []
    block: list[str] = []
    block_start = 1
    for line_no, line in enumerate(text.splitlines() + [""], start=1):
        if line.strip():
            if not block:
                block_start = line_no
            block.append(line)
        elif block:
            records.append(parse_session_record("\n".join(block), first_line=block_start))
            block = []
    return records


def serialize_session_record(session: SessionRecord) -> str:
    lines = [
        f"[SESSION {session.session_id}]",
        f"LEADER: {session.leader_id}",
        f"DATE: {session.year}",
        f"RELEASES: {session.releases}",
    ]
    lines += [f"{entry.musician_id} : {', '.join(entry.signature)}" for entry in session.personnel]
    return "\n".join(lines) + "\n"


def _read_csv(path: Path | str, columns: list[str]) -> pd.DataFrame:
    frame = pd.read_csv(path, dtype=str, keep_default_na=False, encoding="utf-8")
    frame.columns = [column.strip() for column in frame.columns]
    if list(frame.columns) != columns:
        raise DatasetError(f"{path}: expected header {','.join(columns)}, got {','.join(frame.columns)}")
    return frame.apply(lambda column: column.str.strip())


def _parse_int(value: str, what: str, path, line_no: int) -> int:
    try:
        return int(value)
    except ValueError:
        raise DatasetError(f"{path} line {line_no}: {what} must be an integer, got {value!r}") from None


def load_dataset(
    sessions_table: Path | str,
    personnel_table: Path | str,
    records: Path | str | None = None,
) -> Dataset:
    """Load the sessions/personnel CSV pair, plus optional text records."""
    sessions = _read_csv(sessions_table, SESSION_COLUMNS)
    personnel = _read_csv(personnel_table, PERSONNEL_COLUMNS)

    # line numbers count the header as line 1
    header: dict[str, tuple[str, int, int]] = {}
    for line_no, row in enumerate(sessions.itertuples(index=False), start=2):
        if not row.session_id:
            raise DatasetError(f"{sessions_table} line {line_no}: empty session_id")
        if row.session_id in header:
            raise DuplicateSessionError(f"{sessions_table} line {line_no}: duplicate session_id {row.session_id!r}")
        header[row.session_id] = (
            row.leader_id,
            _parse_int(row.year, "year", sessions_table, line_no),
            _parse_int(row.releases, "releases", sessions_table, line_no),
        )

    members: dict[str, dict[str, set[str]]] = {session_id: {} for session_id in header}
    for line_no, row in enumerate(personnel.itertuples(index=False), start=2):
        if row.session_id not in members:
            raise ReferentialError(
                f"{personnel_table} line {line_no}: unknown session_id {row.session_id!r}"
            )
        if not row.musician_id or not row.instrument_id:
            raise DatasetError(f"{personnel_table} line {line_no}: empty musician_id or instrument_id")
        # rows of the same musician in one session merge into one entry
        members[row.session_id].setdefault(row.musician_id, set()).add(row.instrument_id)

    parsed: list[SessionRecord] = []
    for session_id, (leader_id, year, releases) in header.items():
        if not members[session_id]:
            raise EmptyPersonnelError(f"session {session_id!r} has no personnel rows")
        try:
            parsed.append(
                SessionRecord(
                    session_id=session_id,
                    leader_id=leader_id,
                    year=year,
                    releases=releases,
                    personnel=tuple(
                        PersonnelEntry(musician_id=musician_id, instruments=frozenset(instruments))
                        for musician_id, instruments in members[session_id].items()
                    ),
                )
            )
        except ValidationError as error:
            raise DatasetError(f"session {session_id!r}: {error}") from error

    if records is not None:
        extra = parse_records(Path(records).read_text(encoding="utf-8"))
        logger.info("Parsed %d text records from %s", len(extra), records)
        parsed.extend(extra)

    dataset = Dataset(parsed, min_year=settings.MIN_YEAR, max_year=settings.MAX_YEAR)
    logger.info(
        "Loaded %d sessions, %d personnel rows (%d musicians)",
        len(dataset),
        len(personnel),
        len(dataset.musicians),
    )
    return dataset


def dataset_frames(d: Dataset) -> tuple[pd.DataFrame, pd.DataFrame]:
    """Canonical sessions/personnel tables for a dataset."""
    sessions = pd.DataFrame(
        [(s.session_id, s.leader_id, s.year, s.releases) for s in d],
        columns=SESSION_COLUMNS,
    )
    personnel = pd.DataFrame(
        [
            (s.session_id, entry.musician_id, instrument)
            for s in d
            for entry in s.personnel
            for instrument in entry.signature
        ],
        columns=PERSONNEL_COLUMNS,
    )
    return sessions, personnel


def save_dataset(d: Dataset, directory: Path | str) -> tuple[Path, Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    sessions, personnel = dataset_frames(d)
    sessions_path, personnel_path = directory / "sessions.csv", directory / "personnel.csv"
    sessions.to_csv(sessions_path, index=False, lineterminator="\n")
    personnel.to_csv(personnel_path, index=False, lineterminator="\n")
    return sessions_path, personnel_path


def dataset_digest(d: Dataset) -> str:
    """Identity of a dataset; rewired worlds are a function of it, the window and the seed."""
    return d.digest()


def open_dataset(directory: Path | str) -> Dataset:
    """Load a dataset directory written by `save_dataset`."""
    directory = Path(directory)
    return load_dataset(directory / "sessions.csv", directory / "personnel.csv")


def filter_dataset(
    d: Dataset,
    max_year: int | None = None,
    excluded_leaders: Iterable[str] | None = None,
) -> Dataset:
    excluded = set(excluded_leaders or ())
    return Dataset(
        s
        for s in d
        if (max_year is None or s.year <= max_year) and s.leader_id not in excluded
    )


def read_leader_list(path: Path | str) -> set[str]:
    """One leader id per line; blank lines and `#` comments ignored."""
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    return {line.split("#", 1)[0].strip() for line in lines} - {""}
