"""Domain values shared across the engine, plus the position/recency score."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import NamedTuple


class ConfigError(ValueError):
    """Invalid configuration; ``path`` names the offending field."""

    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}")
        self.path = path
        self.message = message


class Strategy(str, enum.Enum):
    SCORED = "SCORED"
    FIFO_ONLY = "FIFO_ONLY"
    RANDOM = "RANDOM"


class ItemRef(NamedTuple):
    """An upstream-ranked item; ids are validated non-empty at parse time."""

    item_id: str
    category_id: str
    rank_score: float


@dataclass(frozen=True, slots=True)
class RankLogEvent:
    """One ranking-stage visit: the scored list a ranker produced for a user."""

    event_id: str
    user_id: str
    scenario_id: str
    access_time: int
    items: tuple[ItemRef, ...]

    @property
    def key(self) -> tuple[str, str]:
        return (self.user_id, self.scenario_id)


class VisitItem(NamedTuple):
    item_id: str
    category_id: str
    rank_index: int
    rank_score: float = 0.0


class TruncatedVisit(NamedTuple):
    access_time: int
    visit_seq: int
    items: tuple[VisitItem, ...]
    event_id: str = ""


@dataclass(frozen=True, slots=True)
class ScoringParams:
    alpha: float = 50.0
    beta: float = 10.0

    def __post_init__(self):
        for name in ("alpha", "beta"):
            value = getattr(self, name)
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                raise ConfigError(name, f"must be a real number, got {value!r}")
            if not math.isfinite(value) or value <= 0:
                raise ConfigError(name, f"must be finite and > 0, got {value!r}")


def final_score(rank_index: int, time_index: int, params: ScoringParams) -> float:
    """Product of a rank-position decay and a visit-recency decay, in (0, 1]."""
    a = params.alpha
    b = params.beta
    return (a / (a + rank_index)) * (b / (b + time_index))


class ScoredCandidate(NamedTuple):
    item_id: str
    category_id: str
    rank_index: int
    time_index: int
    final_score: float

    def canonical_key(self) -> tuple:
        # score desc, then fresher visit, then better position, then id
        return (-self.final_score, self.time_index, self.rank_index, self.item_id)

    def to_json(self) -> dict:
        return {
            "item_id": self.item_id,
            "final_score": self.final_score,
            "rank_index": self.rank_index,
            "time_index": self.time_index,
            "category_id": self.category_id,
        }


@dataclass(frozen=True, slots=True)
class RetrievalSet:
    user_id: str
    scenario_id: str
    items: tuple[ScoredCandidate, ...]
    k: int
    generated_at: int | None = None

    @property
    def computed(self) -> bool:
        """False for the placeholder returned when nothing was ever materialized."""
        return self.generated_at is not None

    def item_ids(self) -> list[str]:
        return [c.item_id for c in self.items]

    def prefix(self, k: int) -> RetrievalSet:
        return RetrievalSet(self.user_id, self.scenario_id, self.items[:k], min(k, self.k), self.generated_at)


def _positive_int(path: str, value) -> int:
    if isinstance(value, bool) or not isinstance(value, int) or value < 1:
        raise ConfigError(path, f"must be an integer >= 1, got {value!r}")
    return value


@dataclass(frozen=True)
class ScenarioConfig:
    scenario_id: str
    truncation: int = 500
    queue_capacity: int = 8
    k: int = 500
    category_cap: int = 50
    params: ScoringParams = field(default_factory=ScoringParams)
    strategy: Strategy = Strategy.SCORED
    seed: int = 0

    def __post_init__(self):
        if not isinstance(self.scenario_id, str) or not self.scenario_id:
            raise ConfigError("scenario_id", "must be a non-empty string")
        for name in ("truncation", "queue_capacity", "k", "category_cap"):
            _positive_int(name, getattr(self, name))
        if not isinstance(self.strategy, Strategy):
            try:
                object.__setattr__(self, "strategy", Strategy(self.strategy))
            except ValueError:
                raise ConfigError("strategy", f"unknown strategy {self.strategy!r}") from None

    @property
    def alpha(self) -> float:
        return self.params.alpha

    @property
    def beta(self) -> float:
        return self.params.beta

    @classmethod
    def from_dict(cls, d: dict, path: str = "scenario") -> ScenarioConfig:
        if not isinstance(d, dict):
            raise ConfigError(path, "must be an object")
        known = {"scenario_id", "truncation", "queue_capacity", "k", "category_cap",
                 "alpha", "beta", "strategy", "seed"}
        extra = set(d) - known
        if extra:
            raise ConfigError(f"{path}.{sorted(extra)[0]}", "unknown field")
        if "scenario_id" not in d:
            raise ConfigError(f"{path}.scenario_id", "missing")
        try:
            params = ScoringParams(d.get("alpha", 50.0), d.get("beta", 10.0))
            kwargs = {k: d[k] for k in ("truncation", "queue_capacity", "k", "category_cap", "strategy", "seed")
                      if k in d}
            return cls(scenario_id=d["scenario_id"], params=params, **kwargs)
        except ConfigError as exc:
            raise ConfigError(f"{path}.{exc.path}", exc.message) from None

    def to_dict(self) -> dict:
        return {
            "scenario_id": self.scenario_id,
            "truncation": self.truncation,
            "queue_capacity": self.queue_capacity,
            "k": self.k,
            "category_cap": self.category_cap,
            "alpha": self.alpha,
            "beta": self.beta,
            "strategy": self.strategy.value,
            "seed": self.seed,
        }


# production channel sizes: long-list scenarios keep 500 items, sparse ones 20
PRODUCTION_TRUNCATION = {
    "main_search": 500,
    "mini_detail": 500,
    "post_purchase": 500,
    "in_shop": 20,
    "photo_search": 20,
}


def production_channel_configs(**overrides) -> dict[str, ScenarioConfig]:
    """Channel configs at production size; the channel size k equals the truncation."""
    return {
        sid: ScenarioConfig(scenario_id=sid, **{"truncation": t, "k": t, **overrides})
        for sid, t in PRODUCTION_TRUNCATION.items()
    }
