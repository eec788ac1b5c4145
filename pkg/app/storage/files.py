"""Flat-file persistence: CSV tables, JSON models, key-value summaries, digests."""
import hashlib
import json
import logging
import math
from collections.abc import Iterable, Mapping
from pathlib import Path
from typing import TypeVar

import pandas as pd
from pydantic import BaseModel

logger = logging.getLogger(__name__)

ModelT = TypeVar("ModelT", bound=BaseModel)

# float columns are written with a fixed number of significant digits
FLOAT_FORMAT = "%.10g"


def write_frame(frame: pd.DataFrame, path: Path | str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=False, lineterminator="\n", float_format=FLOAT_FORMAT)
    logger.debug("Wrote %d rows to %s", len(frame), path)
    return path


def read_frame(path: Path | str, **kwargs) -> pd.DataFrame:
    return pd.read_csv(path, **kwargs)


def write_model(model: BaseModel, path: Path | str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(model.model_dump_json(indent=2) + "\n", encoding="utf-8")
    return path


def read_model(model_type: type[ModelT], path: Path | str) -> ModelT:
    return model_type.model_validate_json(Path(path).read_text(encoding="utf-8"))


def format_value(value) -> str:
    if isinstance(value, bool):
        return str(value).lower()
    if isinstance(value, float):
        if math.isnan(value):
            return "nan"
        if math.isinf(value):
            return "inf" if value > 0 else "-inf"
        return f"{value:.10g}"
    if value is None:
        return ""
    return str(value)


def write_kv(values: Mapping[str, object], path: Path | str) -> Path:
    """`key = value` per line, keys sorted."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("".join(f"{key} = {format_value(values[key])}\n" for key in sorted(values)), encoding="utf-8")
    return path


def read_kv(path: Path | str) -> dict[str, str]:
    values = {}
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if line.strip() and not line.lstrip().startswith("#"):
            key, _, value = line.partition("=")
            values[key.strip()] = value.strip()
    return values


def write_json(data, path: Path | str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def sha256_file(path: Path | str) -> str:
    sha = hashlib.sha256()
    with open(path, "rb") as handle:
        for chunk in iter(lambda: handle.read(1 << 20), b""):
            sha.update(chunk)
    return sha.hexdigest()


def inputs_digest(paths: Iterable[Path | str], extra: str = "") -> str:
    """Digest over input file contents plus any parameter text."""
    sha = hashlib.sha256(extra.encode("utf-8"))
    for path in sorted(Path(p) for p in paths):
        sha.update(path.name.encode("utf-8"))
        sha.update(sha256_file(path).encode("ascii"))
    return sha.hexdigest()


def _sidecar(output: Path) -> Path:
    return output.with_name(output.name + ".inputs")


def is_current(output: Path | str, digest: str) -> bool:
    """True when `output` exists and was written from inputs with this digest."""
    output = Path(output)
    sidecar = _sidecar(output)
    return output.exists() and sidecar.exists() and sidecar.read_text(encoding="utf-8").strip() == digest


def mark_current(output: Path | str, digest: str) -> None:
    _sidecar(Path(output)).write_text(digest + "\n", encoding="utf-8")
