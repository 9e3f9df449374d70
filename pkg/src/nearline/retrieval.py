"""Candidate scoring, diversity-capped selection, and the materialized serving store."""

from __future__ import annotations

import hashlib
import threading
import time
from typing import Iterable, Sequence

import numpy as np

from .model import RetrievalSet, ScenarioConfig, ScoredCandidate, ScoringParams, Strategy, TruncatedVisit

Snapshot = Sequence[tuple[int, TruncatedVisit]]

PRNG_NAME = "pcg64-fisher-yates-v1"


class _Counter:
    """Thread-safe tally of score-formula evaluations (read path must add none)."""

    def __init__(self):
        self._lock = threading.Lock()
        self.value = 0

    def add(self, n: int) -> None:
        with self._lock:
            self.value += n


score_evaluations = _Counter()


def canonical_key(c: ScoredCandidate) -> tuple:
    return (-c.final_score, c.time_index, c.rank_index, c.item_id)


def _occurrence_rows(snapshot: Snapshot, params: ScoringParams) -> list[tuple]:
    """(-score, time_index, rank_index, item_id, category_id) for every occurrence, sorted.

    The tuple layout is the canonical sort key, so the first row of an item is
    its best occurrence under the canonical tie-breaks.
    """
    a = params.alpha
    b = params.beta
    rows: list[tuple] = []
    for t, visit in snapshot:
        recency = b / (b + t)
        rows += [(-((a / (a + r)) * recency), t, r, item_id, category_id)
                 for item_id, category_id, r, _ in visit.items]
    score_evaluations.add(len(rows))
    rows.sort()
    return rows


def score_candidates(snapshot: Snapshot, params: ScoringParams) -> list[ScoredCandidate]:
    """One candidate per distinct item, keeping its highest-scoring occurrence.

    Returned in canonical order.
    """
    seen: set[str] = set()
    out = []
    for neg, t, r, item_id, cat in _occurrence_rows(snapshot, params):
        if item_id not in seen:
            seen.add(item_id)
            out.append(ScoredCandidate(item_id, cat, r, t, -neg))
    return out


def _cap_pass(ordered: Iterable[ScoredCandidate], k: int, category_cap: int) -> list[ScoredCandidate]:
    taken: list[ScoredCandidate] = []
    per_cat: dict[str, int] = {}
    for c in ordered:
        used = per_cat.get(c.category_id, 0)
        if used >= category_cap:
            continue
        per_cat[c.category_id] = used + 1
        taken.append(c)
        if len(taken) >= k:
            break
    return taken


def select_top_k(candidates: Iterable[ScoredCandidate], k: int, category_cap: int) -> list[ScoredCandidate]:
    """Greedy canonical-order pass taking at most ``category_cap`` items per category."""
    return _cap_pass(sorted(candidates, key=canonical_key), k, category_cap)


def select_fifo_only(snapshot: Snapshot, k: int, category_cap: int,
                     params: ScoringParams = ScoringParams()) -> list[ScoredCandidate]:
    """Newest visit first, each visit in rank order; the score is carried but not used."""
    a = params.alpha
    b = params.beta
    ordered = []
    seen = set()
    for t, visit in sorted(snapshot, key=lambda tv: tv[0]):
        recency = b / (b + t)
        for item in sorted(visit.items, key=lambda it: (it.rank_index, it.item_id)):
            if item.item_id in seen:
                continue
            seen.add(item.item_id)
            ordered.append(ScoredCandidate(item.item_id, item.category_id, item.rank_index, t,
                                           (a / (a + item.rank_index)) * recency))
    score_evaluations.add(len(ordered))
    return _cap_pass(ordered, k, category_cap)


def derive_seed(seed: int, user_id: str, scenario_id: str) -> int:
    digest = hashlib.sha256(f"{PRNG_NAME}\x1f{seed}\x1f{user_id}\x1f{scenario_id}".encode("utf-8")).digest()
    return int.from_bytes(digest[:16], "big")


def pinned_permutation(n: int, seed: int, user_id: str = "", scenario_id: str = "") -> list[int]:
    """Fisher-Yates over raw PCG64 output with rejection sampling.

    Only the bit generator's raw stream is used, which numpy keeps stable
    across releases, so the permutation for a given seed never changes.
    """
    bitgen = np.random.PCG64(derive_seed(seed, user_id, scenario_id))
    perm = list(range(n))
    if n < 2:
        return perm
    # n - 1 draws cover the whole shuffle unless a rejection forces an extra one
    pool = iter(bitgen.random_raw(n - 1).tolist())
    for i in range(n - 1, 0, -1):
        bound = i + 1
        limit = (1 << 64) - ((1 << 64) % bound)
        x = next(pool)
        while x >= limit:
            x = int(bitgen.random_raw())
        j = x % bound
        perm[i], perm[j] = perm[j], perm[i]
    return perm


def select_random(snapshot: Snapshot, k: int, category_cap: int, seed: int,
                  user_id: str = "", scenario_id: str = "",
                  params: ScoringParams = ScoringParams()) -> list[ScoredCandidate]:
    """Uniform shuffle of the deduplicated candidates, then the category-cap pass."""
    candidates = sorted(score_candidates(snapshot, params), key=lambda c: c.item_id)
    perm = pinned_permutation(len(candidates), seed, user_id, scenario_id)
    return _cap_pass((candidates[i] for i in perm), k, category_cap)


def select(snapshot: Snapshot, config: ScenarioConfig, user_id: str = "", k: int | None = None,
           strategy: Strategy | None = None) -> list[ScoredCandidate]:
    """Run the configured strategy; the result is in the strategy's own order."""
    k = config.k if k is None else k
    strategy = strategy or config.strategy
    if strategy is Strategy.SCORED:
        cap = config.category_cap
        seen: set[str] = set()
        per_cat: dict[str, int] = {}
        head = []
        for row in _occurrence_rows(snapshot, config.params):
            item_id = row[3]
            if item_id in seen:
                continue
            # an item whose best occurrence is capped out stays out
            seen.add(item_id)
            used = per_cat.get(row[4], 0)
            if used < cap:
                per_cat[row[4]] = used + 1
                head.append(row)
                if len(head) == k:
                    break
        return [ScoredCandidate(i, cat, r, t, -neg) for neg, t, r, i, cat in head]
    if strategy is Strategy.FIFO_ONLY:
        return select_fifo_only(snapshot, k, config.category_cap, config.params)
    return select_random(snapshot, k, config.category_cap, config.seed, user_id, config.scenario_id, config.params)


class ServingStore:
    """(user_id, scenario_id) -> RetrievalSet; whole-set replacement per key."""

    def __init__(self):
        self._sets: dict[tuple[str, str], RetrievalSet] = {}

    def put(self, rs: RetrievalSet) -> None:
        self._sets[(rs.user_id, rs.scenario_id)] = rs

    def get(self, user_id: str, scenario_id: str) -> RetrievalSet | None:
        return self._sets.get((user_id, scenario_id))

    def pop(self, key: tuple[str, str]) -> None:
        self._sets.pop(key, None)

    def __len__(self) -> int:
        return len(self._sets)


def _now_ms() -> int:
    return int(time.time() * 1000)


class RetrievalEngine:
    """Materializes per-channel retrieval sets on write and serves them on read."""

    def __init__(self, store, configs: dict[str, ScenarioConfig], serving: ServingStore | None = None,
                 clock=_now_ms):
        self.store = store
        self.configs = dict(configs)
        self.serving = serving or ServingStore()
        self.clock = clock
        self.materializations = 0
        self._lock = threading.Lock()

    def materialize(self, user_id: str, scenario_id: str, config: ScenarioConfig | None = None,
                    now: int | None = None) -> RetrievalSet:
        config = config or self.configs[scenario_id]
        snap = self.store.snapshot(user_id, scenario_id)
        chosen = select(snap, config, user_id)
        # stored sets are always in canonical order; the strategy only decides membership
        if config.strategy is not Strategy.SCORED:
            chosen.sort(key=canonical_key)
        rs = RetrievalSet(user_id, scenario_id, tuple(chosen), config.k,
                          self.clock() if now is None else now)
        with self.store.locks((user_id, scenario_id)):
            self.serving.put(rs)
        with self._lock:
            self.materializations += 1
        return rs

    def retrieve(self, user_id: str, scenario_ids: Iterable[str],
                 k_per_scenario: int | None = None) -> dict[str, RetrievalSet]:
        """Stored sets only; nothing is scored here."""
        out = {}
        for sid in scenario_ids:
            rs = self.serving.get(user_id, sid)
            if rs is None:
                rs = RetrievalSet(user_id, sid, (), 0 if k_per_scenario is None else k_per_scenario, None)
            elif k_per_scenario is not None:
                rs = rs.prefix(k_per_scenario)
            out[sid] = rs
        return out
