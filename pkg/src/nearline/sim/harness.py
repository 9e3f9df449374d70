"""Replay drivers and the ablation experiments (strategy, online/offline, alpha sweep).

All runs push the generated rank logs through the real ingestion, queue store
and retrieval engine; only the read-side strategy or the update schedule
differs between the variants of one experiment.
"""

from __future__ import annotations

import csv
import gc
import io
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from contextlib import contextmanager
from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np
from scipy import stats

from ..ingestion import Ingestor
from ..model import RetrievalSet, ScenarioConfig, ScoringParams, Strategy
from ..retrieval import RetrievalEngine
from ..store import QueueStore
from .metrics import BACKGROUND, hitrate, pvr_proxy, retrieved_items, user_hitrate
from .world import T0_MS, World, WorldSpec

logger = logging.getLogger(__name__)

ALPHA_SWEEP = (10.0, 20.0, 50.0, 200.0, 500.0)
ABLATIONS = ("strategy", "online_offline", "alpha_sweep")
SIGNIFICANCE_LEVEL = 0.05
MIN_SEEDS_FOR_TESTS = 2
RECOMMENDED_SEEDS = 10
EXPOSURE_K = 50
BACKGROUND_POOL = 200


def default_channel_configs(spec: WorldSpec, queue_capacity: int = 8, alpha: float = 50.0,
                            beta: float = 10.0) -> dict[str, ScenarioConfig]:
    """One channel per source scenario; long lists truncated at 50, short ones kept whole."""
    out = {}
    for s in spec.scenarios:
        t = min(50, s.list_length)
        out[s.scenario_id] = ScenarioConfig(
            scenario_id=s.scenario_id, truncation=t, queue_capacity=queue_capacity, k=t,
            category_cap=max(1, t // 2), params=ScoringParams(alpha, beta), seed=spec.seed,
        )
    return out


# -- replay -------------------------------------------------------------------

@dataclass
class Replay:
    store: QueueStore
    ingestor: Ingestor
    engine: RetrievalEngine


def make_pipeline(configs: dict[str, ScenarioConfig], materialize_on_write: bool = False) -> Replay:
    store = QueueStore({s: c.queue_capacity for s, c in configs.items()})
    engine = RetrievalEngine(store, configs)
    ingestor = Ingestor(store, configs, on_applied=engine.materialize if materialize_on_write else None)
    return Replay(store, ingestor, engine)


def replay_events(events: Iterable, configs: dict[str, ScenarioConfig]) -> Replay:
    rp = make_pipeline(configs)
    for e in events:
        rp.ingestor.ingest(e)
    return rp


def materialize_all(rp: Replay, configs: dict[str, ScenarioConfig], now: int) -> dict[str, list[RetrievalSet]]:
    """Materialize every key under ``configs``; returns user -> channel sets."""
    by_user: dict[str, list[RetrievalSet]] = {}
    for user_id, scenario_id in sorted(rp.store.keys()):
        rs = rp.engine.materialize(user_id, scenario_id, configs[scenario_id], now=now)
        by_user.setdefault(user_id, []).append(rs)
    return by_user


def evaluate_at_cut(world: World, by_user: dict[str, list[RetrievalSet]],
                    truth: dict[str, set[str]]) -> float:
    retrieved = {u: retrieved_items(sets) for u, sets in by_user.items()}
    return hitrate(retrieved, truth)


def mean_pvr(world: World, by_user: dict[str, list[RetrievalSet]], at_ms: int,
             exposure_k: int = EXPOSURE_K) -> dict[str, float]:
    """Average per-user PVR proxy; the oracle is the noiseless utility at ``at_ms``."""
    totals: dict[str, float] = {}
    users = sorted(by_user)
    for user_id in users:
        u = world.user_index(user_id)
        static = world.static_utility(u)
        rng = np.random.default_rng([world.spec.seed, 7, u])
        background = [world.item_ids[i] for i in rng.choice(world.spec.num_items, BACKGROUND_POOL, replace=False)]

        def oracle(item_ids, u=u, static=static):
            idx = np.array([world.item_index(i) for i in item_ids])
            return world.utility(u, idx, at_ms, static).tolist()

        channels = {rs.scenario_id: rs for rs in by_user[user_id]}
        for sid, share in pvr_proxy(channels, exposure_k, oracle, background).items():
            totals[sid] = totals.get(sid, 0.0) + share
    return {sid: v / len(users) for sid, v in sorted(totals.items())} if users else {}


def run_cut_variants(world: World, configs: dict[str, ScenarioConfig],
                     variants: dict[str, dict[str, ScenarioConfig]], with_pvr: bool = False,
                     replayed: Replay | None = None, check_bytes: bool = False) -> dict:
    """Replay once up to the cut, then materialize under each variant's configs.

    Returns ``{variant: {"hitrate": h, ...}}``.  Variants only differ on the read
    side, so the queue store must come out untouched; ``check_bytes`` also
    compares its serialized form before and after.
    """
    cut = world.spec.cut_ms
    rp = replayed or replay_events(world.events_before(cut), configs)
    before = rp.store.serialize() if check_bytes else None
    mutations = rp.store.mutations
    truth = world.truth.held_out(cut)
    out: dict = {}
    for name, vconfigs in variants.items():
        by_user = materialize_all(rp, vconfigs, cut)
        row = {"hitrate": evaluate_at_cut(world, by_user, truth)}
        if with_pvr:
            pvr = mean_pvr(world, by_user, cut)
            row["pvr"] = pvr
            row["pvr_channels"] = 1.0 - pvr.get(BACKGROUND, 0.0)
        out[name] = row
        if rp.store.mutations != mutations:
            raise AssertionError("read-side strategy mutated queue state")
    if check_bytes and rp.store.serialize() != before:
        raise AssertionError("queue state bytes changed across variants")
    return out


def strategy_variants(configs: dict[str, ScenarioConfig]) -> dict[str, dict[str, ScenarioConfig]]:
    return {st.value: {s: replace(c, strategy=st) for s, c in configs.items()} for st in Strategy}


def alpha_variants(configs: dict[str, ScenarioConfig],
                   alphas: Sequence[float] = ALPHA_SWEEP) -> dict[str, dict[str, ScenarioConfig]]:
    return {
        f"alpha={a:g}": {s: replace(c, params=ScoringParams(a, c.beta), strategy=Strategy.SCORED)
                         for s, c in configs.items()}
        for a in alphas
    }


def run_streaming(world: World, configs: dict[str, ScenarioConfig], online: bool,
                  day_ms: int | None = None) -> float:
    """Continuous evaluation at every homepage visit after the first day boundary.

    Online materializes on every ingest.  Offline buffers events and applies
    them, then materializes touched keys, only at simulated-day boundaries.
    Each homepage visit is scored against the retrieval sets stored at that
    moment; the result is the mean over users of their mean per-visit hitrate.
    """
    spec = world.spec
    day_ms = day_ms or spec.horizon_ms // 7
    start_eval = T0_MS + day_ms
    cut = spec.cut_ms
    visits = world.truth.between(start_eval, cut)
    events = world.events_before(cut)
    rp = make_pipeline(configs, materialize_on_write=online)
    scenario_ids = list(configs)

    pending: list = []
    next_boundary = T0_MS + day_ms
    ei = 0
    per_user: dict[str, list[float]] = {}

    def flush(boundary: int) -> None:
        touched = set()
        for e in pending:
            if rp.ingestor.ingest(e).status == "applied":
                touched.add(e.key)
        pending.clear()
        for user_id, scenario_id in sorted(touched):
            rp.engine.materialize(user_id, scenario_id, now=boundary)

    for v in visits:
        while ei < len(events) and events[ei].access_time < v.access_time:
            e = events[ei]
            if online:
                rp.ingestor.ingest(e)
            else:
                while e.access_time >= next_boundary:
                    flush(next_boundary)
                    next_boundary += day_ms
                pending.append(e)
            ei += 1
        if not online:
            while v.access_time >= next_boundary:
                flush(next_boundary)
                next_boundary += day_ms
        sets = rp.engine.retrieve(v.user_id, scenario_ids).values()
        per_user.setdefault(v.user_id, []).append(user_hitrate(retrieved_items(sets), v.items))
    if not per_user:
        return 0.0
    return float(np.mean([np.mean(h) for h in per_user.values()]))


# -- experiments ----------------------------------------------------------------

@dataclass
class AblationReport:
    name: str
    variants: list[str]
    seeds: list[int]
    per_seed: dict[str, list[float]] = field(default_factory=dict)
    extras: dict[str, dict[str, float]] = field(default_factory=dict)
    comparisons: list[dict] = field(default_factory=list)
    notes: list[str] = field(default_factory=list)
    metric: str = "hitrate"
    # wall time attributable to this ablation, shared setup included
    seconds: float = 0.0

    def mean(self, variant: str) -> float:
        return float(np.mean(self.per_seed[variant]))

    def ci95(self, variant: str) -> float:
        values = np.asarray(self.per_seed[variant], dtype=float)
        if len(values) < 2:
            return math.nan
        return float(stats.t.ppf(0.975, len(values) - 1) * values.std(ddof=1) / math.sqrt(len(values)))

    def comparison(self, a: str, b: str) -> dict | None:
        for c in self.comparisons:
            if c["a"] == a and c["b"] == b:
                return c
        return None

    def best(self) -> str:
        return max(self.variants, key=self.mean)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        extra_keys = sorted({k for d in self.extras.values() for k in d})
        w.writerow(["experiment", "variant", f"mean_{self.metric}", "ci95", "n_seeds", *extra_keys,
                    *[f"seed_{s}" for s in self.seeds]])
        for v in self.variants:
            w.writerow([self.name, v, f"{self.mean(v):.6f}", f"{self.ci95(v):.6f}", len(self.per_seed[v]),
                        *[f"{self.extras.get(v, {}).get(k, math.nan):.6f}" for k in extra_keys],
                        *[f"{x:.6f}" for x in self.per_seed[v]]])
        if self.comparisons:
            w.writerow([])
            w.writerow(["experiment", "a", "b", "mean_diff", "t", "p_value", "significant"])
            for c in self.comparisons:
                w.writerow([self.name, c["a"], c["b"], f"{c['mean_diff']:.6f}", f"{c['t']:.4f}",
                            f"{c['p']:.3g}", c["p"] < SIGNIFICANCE_LEVEL])
        return buf.getvalue()

    def summary(self) -> str:
        lines = [f"ablation: {self.name} ({len(self.seeds)} seeds)",
                 f"metric: {self.metric} against held-out homepage interactions (a CTCVR proxy; not CTCVR)"]
        width = max(len(v) for v in self.variants)
        for v in self.variants:
            lines.append(f"  {v:<{width}}  {self.mean(v):.5f} +/- {self.ci95(v):.5f}")
        for c in self.comparisons:
            flag = "significant" if c["p"] < SIGNIFICANCE_LEVEL else "not significant"
            lines.append(f"  {c['a']} - {c['b']}: {c['mean_diff']:+.5f} (paired t, p={c['p']:.3g}, {flag})")
        lines += [f"  note: {n}" for n in self.notes]
        return "\n".join(lines) + "\n"


def _paired(report: AblationReport, a: str, b: str) -> None:
    x = np.asarray(report.per_seed[a])
    y = np.asarray(report.per_seed[b])
    diff = x - y
    if np.allclose(diff, 0):
        t, p = 0.0, 1.0
    else:
        res = stats.ttest_rel(x, y)
        t, p = float(res.statistic), float(res.pvalue)
    report.comparisons.append({"a": a, "b": b, "mean_diff": float(diff.mean()), "t": t, "p": p})


@contextmanager
def gc_paused():
    """Suspend the cyclic collector around bulk replay.

    Replay state is millions of small acyclic tuples that reference counting
    frees on its own; with the collector on, its generation-2 passes over them
    cost several times the replay itself.
    """
    enabled = gc.isenabled()
    gc.disable()
    try:
        yield
    finally:
        if enabled:
            gc.enable()


def _one_seed(args) -> dict[str, dict]:
    with gc_paused():
        return _seed_runs(*args)


def _seed_runs(names, spec, configs, seed) -> dict[str, dict]:
    """All requested ablations for one seed; shared setup is timed separately."""
    spec = replace(spec, seed=seed)
    configs = {s: replace(c, seed=seed) for s, c in configs.items()}
    timing: dict[str, float] = {}
    t0 = time.perf_counter()
    world = World(spec)
    timing["world"] = time.perf_counter() - t0
    out: dict[str, dict] = {}
    replayed = None
    if "strategy" in names or "alpha_sweep" in names:
        t0 = time.perf_counter()
        replayed = replay_events(world.events_before(spec.cut_ms), configs)
        timing["replay"] = time.perf_counter() - t0
    t0 = time.perf_counter()
    if "strategy" in names:
        out["strategy"] = run_cut_variants(world, configs, strategy_variants(configs), True, replayed)
        timing["strategy"] = time.perf_counter() - t0
    t0 = time.perf_counter()
    if "alpha_sweep" in names:
        out["alpha_sweep"] = run_cut_variants(world, configs, alpha_variants(configs), False, replayed)
        timing["alpha_sweep"] = time.perf_counter() - t0
    t0 = time.perf_counter()
    if "online_offline" in names:
        out["online_offline"] = {
            "online": {"hitrate": run_streaming(world, configs, online=True)},
            "offline": {"hitrate": run_streaming(world, configs, online=False)},
        }
        timing["online_offline"] = time.perf_counter() - t0
    out["_timing"] = timing
    logger.info("seed %d done", seed)
    return out


def _report(name: str, seeds: list[int], rows: list[dict]) -> AblationReport:
    variants = list(rows[0][name])
    rep = AblationReport(name, variants, list(seeds))
    for r in rows:
        t = r["_timing"]
        rep.seconds += t["world"] + t[name] + (t.get("replay", 0.0) if name != "online_offline" else 0.0)
    for v in variants:
        rep.per_seed[v] = [r[name][v]["hitrate"] for r in rows]
        if "pvr_channels" in rows[0][name][v]:
            rep.extras[v] = {"pvr_channels": float(np.mean([r[name][v]["pvr_channels"] for r in rows]))}
    if len(seeds) < MIN_SEEDS_FOR_TESTS:
        rep.notes.append(f"significance output withheld: needs >= {MIN_SEEDS_FOR_TESTS} seeds")
        return rep
    if len(seeds) < RECOMMENDED_SEEDS:
        rep.notes.append(f"fewer than {RECOMMENDED_SEEDS} seeds; p-values are indicative only")
    if name == "strategy":
        _paired(rep, "SCORED", "FIFO_ONLY")
        _paired(rep, "FIFO_ONLY", "RANDOM")
        _paired(rep, "SCORED", "RANDOM")
    elif name == "online_offline":
        _paired(rep, "online", "offline")
    else:
        best = rep.best()
        for v in variants:
            if v != best:
                _paired(rep, best, v)
    return rep


def run_ablations(names: Sequence[str], spec: WorldSpec, configs: dict[str, ScenarioConfig] | None,
                  seeds: Sequence[int], workers: int = 1) -> dict[str, AblationReport]:
    """Run several ablations, generating each seed's world only once."""
    for n in names:
        if n not in ABLATIONS:
            raise ValueError(f"unknown ablation {n!r}; expected one of {ABLATIONS}")
    seeds = list(seeds)
    if not seeds:
        raise ValueError("at least one seed is required")
    configs = configs or default_channel_configs(spec)
    jobs = [(tuple(names), spec, configs, s) for s in seeds]
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            rows = list(pool.map(_one_seed, jobs))
    else:
        rows = [_one_seed(j) for j in jobs]
    return {n: _report(n, seeds, rows) for n in names}


def run_ablation(name: str, spec: WorldSpec, configs: dict[str, ScenarioConfig] | None,
                 seeds: Sequence[int], workers: int = 1) -> AblationReport:
    return run_ablations([name], spec, configs, seeds, workers)[name]
