"""Synthetic multi-scenario world: users with drifting intents, noisy upstream rankers.

Each user holds a long-term preference over categories and a short-term
intent category that switches as a Poisson process (the drift rate).  True
utility of an item at time t is

    quality[item] + affinity[user, item] + intent_weight * [cat == intent(t)]
    + pref_weight * log(pref[user, cat] + 0.01)

A scenario visit samples a candidate pool (part from the current intent
category, the rest uniform), scores it with utility plus N(0, sigma) noise and
logs the top ``list_length`` items.  Homepage visits are where interactions
happen: the user engages with ``interactions_per_visit`` items drawn by
Gumbel-top-k over utility among a feed shortlist (the user's best items by
time-independent utility plus every item of the current intent); these are
the ground truth for evaluation.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field
from functools import partial

import numpy as np

from ..ingestion import event_to_json
from ..model import ItemRef, RankLogEvent

HOUR_MS = 3_600_000
T0_MS = 1_700_000_000_000


@dataclass(frozen=True)
class ScenarioSpec:
    scenario_id: str
    visit_rate: float  # visits per user per simulated hour
    noise_sigma: float
    list_length: int = 50  # upstream ranked list length before truncation
    pool_size: int = 200
    intent_share: float = 0.5


_item_ref = partial(tuple.__new__, ItemRef)


def default_scenarios() -> tuple[ScenarioSpec, ...]:
    return (
        ScenarioSpec("main_search", 0.06, 1.0, 60, 300, 0.6),
        ScenarioSpec("mini_detail", 0.05, 1.0, 60, 300, 0.5),
        ScenarioSpec("post_purchase", 0.03, 1.5, 60, 300, 0.3),
        ScenarioSpec("in_shop", 0.03, 1.0, 20, 60, 0.8),
        ScenarioSpec("photo_search", 0.02, 0.8, 20, 60, 0.8),
    )


@dataclass(frozen=True)
class WorldSpec:
    num_users: int = 1000
    num_items: int = 10_000
    num_categories: int = 50
    scenarios: tuple[ScenarioSpec, ...] = field(default_factory=default_scenarios)
    drift_rate: float = 1 / 24  # intent switches per simulated hour
    horizon_hours: float = 7 * 24
    holdout_hours: float = 24
    home_visit_rate: float = 0.1
    interactions_per_visit: int = 10
    intent_weight: float = 2.0
    pref_weight: float = 0.5
    pref_concentration: float = 0.3
    affinity_sigma: float = 0.5
    interaction_temperature: float = 0.5
    feed_shortlist: int = 500
    seed: int = 0

    def __post_init__(self):
        for name in ("num_users", "num_items", "num_categories", "interactions_per_visit"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.num_items < self.num_categories:
            raise ValueError("every category needs at least one item")
        if not self.scenarios:
            raise ValueError("at least one scenario is required")
        for s in self.scenarios:
            if s.noise_sigma < 0 or s.visit_rate < 0 or s.list_length < 1 or s.pool_size < 1:
                raise ValueError(f"invalid scenario spec {s}")
        if self.drift_rate < 0 or self.horizon_hours <= 0 or self.holdout_hours < 0:
            raise ValueError("drift, horizon and holdout must be non-negative (horizon > 0)")

    @property
    def horizon_ms(self) -> int:
        return int(self.horizon_hours * HOUR_MS)

    @property
    def cut_ms(self) -> int:
        """Absolute time separating replayed events from held-out interactions."""
        return T0_MS + self.horizon_ms

    def to_dict(self) -> dict:
        d = asdict(self)
        d["scenarios"] = [asdict(s) for s in self.scenarios]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> WorldSpec:
        d = dict(d)
        if "scenarios" in d:
            d["scenarios"] = tuple(ScenarioSpec(**s) for s in d["scenarios"])
        return cls(**d)


@dataclass(frozen=True)
class HomeVisit:
    user_id: str
    access_time: int
    items: tuple[str, ...]


class GroundTruth:
    """Homepage interactions, one record per visit, in time order."""

    def __init__(self, visits: list[HomeVisit]):
        self.visits = visits

    def held_out(self, cut_ms: int) -> dict[str, set[str]]:
        """Per-user union of items engaged with at or after ``cut_ms``."""
        out: dict[str, set[str]] = {}
        for v in self.visits:
            if v.access_time >= cut_ms:
                out.setdefault(v.user_id, set()).update(v.items)
        return out

    def between(self, start_ms: int, end_ms: int) -> list[HomeVisit]:
        return [v for v in self.visits if start_ms <= v.access_time < end_ms]

    def to_lines(self) -> list[str]:
        return [json.dumps({"user_id": v.user_id, "access_time": v.access_time, "items": list(v.items)},
                           separators=(",", ":")) for v in self.visits]

    @classmethod
    def from_lines(cls, lines) -> GroundTruth:
        visits = []
        for line in lines:
            if line.strip():
                d = json.loads(line)
                visits.append(HomeVisit(d["user_id"], d["access_time"], tuple(d["items"])))
        return cls(visits)


def user_id_of(u: int) -> str:
    return f"u{u:05d}"


def item_id_of(i: int) -> str:
    return f"i{i:06d}"


def category_id_of(c: int) -> str:
    return f"c{c:03d}"


class World:
    """Deterministic function of its spec; events and truth are built on construction."""

    def __init__(self, spec: WorldSpec):
        self.spec = spec
        root = np.random.SeedSequence(spec.seed)
        catalog_seq, user_seq = root.spawn(2)
        rng = np.random.default_rng(catalog_seq)
        self.item_category = rng.permutation(np.arange(spec.num_items) % spec.num_categories)
        self.item_quality = rng.standard_normal(spec.num_items)
        self.user_pref = rng.dirichlet(np.full(spec.num_categories, spec.pref_concentration), spec.num_users)
        self._log_pref = np.log(self.user_pref + 0.01)
        self.items_by_category = [np.flatnonzero(self.item_category == c) for c in range(spec.num_categories)]
        self._category_sizes = np.array([len(m) for m in self.items_by_category])
        # padded member table; every category is non-empty by construction
        table = np.zeros((spec.num_categories, max(1, self._category_sizes.max())), dtype=np.int64)
        for c, members in enumerate(self.items_by_category):
            table[c, : len(members)] = members
        self._category_table = table
        self._user_seqs = user_seq.spawn(spec.num_users)
        # spawned once here: SeedSequence.spawn hands out a new child on every call
        self._affinity_seqs = [seq.spawn(1)[0] for seq in self._user_seqs]
        self.item_ids = [item_id_of(i) for i in range(spec.num_items)]
        self.category_ids = [category_id_of(c) for c in range(spec.num_categories)]
        self.intents: list[tuple[np.ndarray, np.ndarray]] = []
        self.events: list[RankLogEvent] = []
        self.truth = GroundTruth([])
        self._build()

    # -- utilities ---------------------------------------------------------

    def affinity(self, u: int) -> np.ndarray:
        rng = np.random.default_rng(self._affinity_seqs[u])
        return rng.standard_normal(self.spec.num_items) * self.spec.affinity_sigma

    def intent_at(self, u: int, t_ms: int) -> int:
        starts, cats = self.intents[u]
        return int(cats[np.searchsorted(starts, t_ms, side="right") - 1])

    def static_utility(self, u: int, affinity: np.ndarray | None = None) -> np.ndarray:
        """Time-independent part of the utility for every item."""
        affinity = self.affinity(u) if affinity is None else affinity
        return self.item_quality + affinity + self.spec.pref_weight * self._log_pref[u, self.item_category]

    def utility(self, u: int, items: np.ndarray, t_ms: int, static: np.ndarray | None = None) -> np.ndarray:
        """True (noiseless) preference of user ``u`` for ``items`` at time ``t_ms``."""
        static = self.static_utility(u) if static is None else static
        intent = self.intent_at(u, t_ms)
        return static[items] + self.spec.intent_weight * (self.item_category[items] == intent)

    # -- generation ----------------------------------------------------------

    def _poisson_times(self, rng: np.random.Generator, rate: float, start_ms: int, end_ms: int) -> np.ndarray:
        hours = (end_ms - start_ms) / HOUR_MS
        n = rng.poisson(rate * hours)
        return np.sort(rng.integers(start_ms, end_ms, n))

    def _build(self) -> None:
        spec = self.spec
        end_events = T0_MS + spec.horizon_ms
        end_truth = end_events + int(spec.holdout_hours * HOUR_MS)
        events: list[tuple[int, str, RankLogEvent]] = []
        visits: list[HomeVisit] = []
        item_ids = self.item_ids
        item_cats = [self.category_ids[c] for c in self.item_category.tolist()]
        g_items = spec.interactions_per_visit
        for u in range(spec.num_users):
            rng = np.random.default_rng(self._user_seqs[u])
            uid = user_id_of(u)
            switch = self._poisson_times(rng, spec.drift_rate, T0_MS, end_truth)
            starts = np.concatenate(([T0_MS], switch))
            cats = rng.choice(spec.num_categories, size=len(starts), p=self.user_pref[u])
            self.intents.append((starts, cats))
            static = self.static_utility(u)
            for s in spec.scenarios:
                times = self._poisson_times(rng, s.visit_rate, T0_MS, end_events)
                if not len(times):
                    continue
                pools = self._sample_pools(rng, u, times, s)
                intents = cats[np.searchsorted(starts, times, side="right") - 1]
                noisy = static[pools] + spec.intent_weight * (self.item_category[pools] == intents[:, None])
                if s.noise_sigma > 0:
                    noisy += rng.standard_normal(pools.shape) * s.noise_sigma
                # a duplicate draw is dropped rather than given a second noisy chance,
                # which would otherwise favour the often-drawn intent items
                by_item = np.argsort(pools, axis=1, kind="stable")
                sorted_pools = np.take_along_axis(pools, by_item, 1)
                dup = np.zeros(pools.shape, dtype=bool)
                dup[:, 1:] = sorted_pools[:, 1:] == sorted_pools[:, :-1]
                np.put_along_axis(noisy, by_item, np.where(dup, -np.inf, np.take_along_axis(noisy, by_item, 1)), 1)
                order = np.argsort(-noisy, axis=1, kind="stable")[:, : s.list_length]
                ranked_rows = np.take_along_axis(pools, order, 1).tolist()
                top_scores = np.take_along_axis(noisy, order, 1)
                score_rows = np.round(top_scores, 6).tolist()
                valid = np.isfinite(top_scores).sum(axis=1).tolist()
                for n, (t, ranked, scores, m) in enumerate(zip(times.tolist(), ranked_rows, score_rows, valid)):
                    eid = f"{uid}-{s.scenario_id}-{n}"
                    ranked = ranked[:m]
                    items = tuple(map(_item_ref, zip(map(item_ids.__getitem__, ranked),
                                                     map(item_cats.__getitem__, ranked), scores[:m])))
                    events.append((t, eid, RankLogEvent(eid, uid, s.scenario_id, t, items)))
            home = self._poisson_times(rng, spec.home_visit_rate, T0_MS, end_truth)
            if len(home):
                # the user only engages with what the feed could plausibly show:
                # the best items by static utility plus the current intent's items
                shortlist = np.argpartition(-static, spec.feed_shortlist)[: spec.feed_shortlist]
                for t in home.tolist():
                    members = self.items_by_category[self.intent_at(u, t)]
                    cand = np.union1d(shortlist, members)
                    g = self.utility(u, cand, t, static) / spec.interaction_temperature
                    g += rng.gumbel(size=len(cand))
                    top = np.argpartition(-g, g_items)[:g_items]
                    top = top[np.argsort(-g[top], kind="stable")]
                    visits.append(HomeVisit(uid, t, tuple(item_ids[i] for i in cand[top].tolist())))
        events.sort(key=lambda e: (e[0], e[1]))
        self.events = [e for _, _, e in events]
        visits.sort(key=lambda v: (v.access_time, v.user_id))
        self.truth = GroundTruth(visits)

    def _sample_pools(self, rng: np.random.Generator, u: int, times: np.ndarray, s: ScenarioSpec) -> np.ndarray:
        """One row per visit: draws (with replacement) from the intent category, then uniform.

        Rows may repeat items; ranking keeps the first (best) occurrence only.
        """
        starts, cats = self.intents[u]
        intents = cats[np.searchsorted(starts, times, side="right") - 1]
        n_intent = int(round(s.pool_size * s.intent_share))
        lens = self._category_sizes[intents]
        picks = (rng.random((len(times), n_intent)) * lens[:, None]).astype(np.int64)
        chosen = self._category_table[intents[:, None], picks]
        rest = rng.integers(0, self.spec.num_items, (len(times), s.pool_size - n_intent))
        return np.concatenate((chosen, rest), axis=1)

    # -- access helpers --------------------------------------------------------

    def user_index(self, user_id: str) -> int:
        return int(user_id[1:])

    def item_index(self, item_id: str) -> int:
        return int(item_id[1:])

    def events_before(self, cut_ms: int) -> list[RankLogEvent]:
        return [e for e in self.events if e.access_time < cut_ms]


def build_world(spec: WorldSpec) -> World:
    return World(spec)


def generate_world(spec: WorldSpec, out_dir: str) -> tuple[str, str]:
    """Write ``events.ndjson``, ``truth.ndjson`` and ``world.json`` into ``out_dir``."""
    world = World(spec)
    os.makedirs(out_dir, exist_ok=True)
    events_path = os.path.join(out_dir, "events.ndjson")
    truth_path = os.path.join(out_dir, "truth.ndjson")
    with open(events_path, "w", encoding="utf-8", newline="\n") as f:
        for e in world.events:
            f.write(event_to_json(e))
            f.write("\n")
    with open(truth_path, "w", encoding="utf-8", newline="\n") as f:
        for line in world.truth.to_lines():
            f.write(line)
            f.write("\n")
    with open(os.path.join(out_dir, "world.json"), "w", encoding="utf-8") as f:
        json.dump(spec.to_dict(), f, indent=2, sort_keys=True)
        f.write("\n")
    return events_path, truth_path
