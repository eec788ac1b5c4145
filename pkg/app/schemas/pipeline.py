from pydantic import BaseModel, Field


class Manifest(BaseModel):
    """Everything needed to reproduce a run; no timestamps, keys sorted."""

    config_digest: str
    config: dict[str, str]
    dataset_digest: str
    master_seed: int
    # derived seed per stage (and per replicate where a stage has several)
    seeds: dict[str, int] = Field(default_factory=dict)
    versions: dict[str, str] = Field(default_factory=dict)
    # output path relative to the run directory -> sha256
    files: dict[str, str] = Field(default_factory=dict)
    stages: list[str] = Field(default_factory=list)
    notices: list[str] = Field(default_factory=list)
