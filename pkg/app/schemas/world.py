from pydantic import BaseModel, ConfigDict, Field


class RewiredWorld(BaseModel):
    """An alternate history: who fills each personnel bundle of each session.

    `assignment[session_id][b]` is the musician filling bundle `b` (the b-th
    personnel entry of the observed session). Bundles keep their instrument sets.
    """

    model_config = ConfigDict(frozen=True)

    index: int = Field(default=0, ge=0)
    seed: int
    window_years: int = Field(ge=1)
    qualification: str = "span"
    dataset_digest: str = ""
    assignment: dict[str, tuple[str, ...]]
    # slots left at their observed musician, as (session_id, bundle index)
    pinned: tuple[tuple[str, int], ...] = ()

    @property
    def infeasible_slots(self) -> int:
        return len(self.pinned)

    @property
    def n_slots(self) -> int:
        return sum(len(bundles) for bundles in self.assignment.values())

    def musician_at(self, session_id: str, bundle: int) -> str:
        return self.assignment[session_id][bundle]


class Violation(BaseModel):
    constraint: str
    session_id: str | None = None
    musician_id: str | None = None
    detail: str = ""


class ConstraintReport(BaseModel):
    session_size: int = 0
    activity: int = 0
    qualification: int = 0
    uniqueness: int = 0
    violations: list[Violation] = Field(default_factory=list)

    @property
    def total(self) -> int:
        return self.session_size + self.activity + self.qualification + self.uniqueness

    @property
    def ok(self) -> bool:
        return self.total == 0


class WorldManifest(BaseModel):
    """Sidecar of a persisted world; the assignment itself lives in the CSV."""

    index: int
    seed: int
    window_years: int
    qualification: str
    dataset_digest: str
    infeasible_slots: int
    pinned: list[tuple[str, int]] = Field(default_factory=list)

    @classmethod
    def of(cls, w: RewiredWorld) -> "WorldManifest":
        return cls(
            index=w.index,
            seed=w.seed,
            window_years=w.window_years,
            qualification=w.qualification,
            dataset_digest=w.dataset_digest,
            infeasible_slots=w.infeasible_slots,
            pinned=list(w.pinned),
        )
