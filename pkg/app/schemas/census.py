from dataclasses import dataclass
from enum import Enum

from pydantic import BaseModel, ConfigDict, Field, computed_field


class TriadLabel(str, Enum):
    disconnected = "disconnected"
    open = "open"
    closed = "closed"
    forbidden = "forbidden"


class Origin(str, Enum):
    observed = "observed"
    rewired = "rewired"


@dataclass(frozen=True, slots=True)
class TriadObservation:
    """A connected within-session triad.

    `weights` follows the (i, j, k) order of `musicians`: (w_ij, w_ik, w_jk).
    `world` is the rewired world index, None for observed triads.
    """

    session_id: str
    musicians: tuple[str, str, str]
    weights: tuple[int, int, int]
    label: TriadLabel
    origin: Origin = Origin.observed
    world: int | None = None

    @property
    def order_stats(self) -> tuple[int, int, int]:
        return tuple(sorted(self.weights))  # type: ignore[return-value]

    @property
    def min_legs_weight(self) -> int:
        return self.order_stats[1]

    @property
    def closed(self) -> bool:
        return self.order_stats[0] > 0


class SessionCensus(BaseModel):
    model_config = ConfigDict(frozen=True)

    session_id: str = ""
    year: int | None = None
    theta: int = Field(ge=2)
    n_open: int = Field(default=0, ge=0)
    n_closed: int = Field(default=0, ge=0)
    n_forbidden: int = Field(default=0, ge=0)

    @computed_field
    @property
    def n_connected(self) -> int:
        return self.n_open + self.n_closed + self.n_forbidden

    @property
    def defined(self) -> bool:
        """Densities are undefined without connected triads."""
        return self.n_connected > 0

    def _density(self, count: int) -> float:
        return count / self.n_connected if self.defined else float("nan")

    @computed_field
    @property
    def d_open(self) -> float:
        return self._density(self.n_open)

    @computed_field
    @property
    def d_closed(self) -> float:
        return self._density(self.n_closed)

    @computed_field
    @property
    def d_forbidden(self) -> float:
        return self._density(self.n_forbidden)
