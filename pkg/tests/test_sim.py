import csv
import filecmp
import json

import numpy as np
import pytest
from scipy import stats

from nearline.cli import main as cli_main
from nearline.model import ItemRef, RankLogEvent, RetrievalSet, ScenarioConfig, ScoredCandidate
from nearline.sim import harness
from nearline.sim.metrics import BACKGROUND, hitrate, pvr_proxy, retrieved_items
from nearline.sim.world import ScenarioSpec, World, WorldSpec, generate_world


def tiny_spec(**kw):
    base = dict(num_users=40, num_items=600, num_categories=12, horizon_hours=72, holdout_hours=24,
                feed_shortlist=100, scenarios=(ScenarioSpec("a", 0.2, 1.0, 30, 80, 0.6),
                                               ScenarioSpec("b", 0.1, 0.5, 10, 30, 0.8)))
    base.update(kw)
    return WorldSpec(**base)


# -- world --------------------------------------------------------------------

def test_generation_is_byte_identical(tmp_path):
    spec = tiny_spec(seed=4)
    generate_world(spec, tmp_path / "one")
    generate_world(spec, tmp_path / "two")
    for name in ["events.ndjson", "truth.ndjson", "world.json"]:
        assert filecmp.cmp(tmp_path / "one" / name, tmp_path / "two" / name, shallow=False)
    generate_world(tiny_spec(seed=5), tmp_path / "three")
    assert not filecmp.cmp(tmp_path / "one" / "events.ndjson", tmp_path / "three" / "events.ndjson",
                           shallow=False)


def test_spec_roundtrip_and_validation():
    spec = tiny_spec()
    assert WorldSpec.from_dict(json.loads(json.dumps(spec.to_dict()))) == spec
    with pytest.raises(ValueError):
        tiny_spec(num_users=0)
    with pytest.raises(ValueError):
        tiny_spec(scenarios=(ScenarioSpec("a", 0.1, -1.0),))


def preference_taus(world, limit=1000):
    taus = []
    statics = {}
    for e in world.events[:limit]:
        u = world.user_index(e.user_id)
        static = statics.setdefault(u, world.static_utility(u))
        idx = np.array([world.item_index(i.item_id) for i in e.items])
        util = world.utility(u, idx, e.access_time, static)
        if len(idx) > 2:
            taus.append(stats.kendalltau(np.arange(len(idx)), -util).statistic)
    return np.array(taus)


def test_noiseless_ranking_is_preference_order():
    world = World(tiny_spec(scenarios=(ScenarioSpec("a", 0.3, 0.0, 30, 80, 0.6),)))
    assert len(world.events) > 100
    for e in world.events:
        u = world.user_index(e.user_id)
        idx = np.array([world.item_index(i.item_id) for i in e.items])
        util = world.utility(u, idx, e.access_time)
        assert np.all(np.diff(util) <= 0)
        assert np.allclose([i.rank_score for i in e.items], util, atol=1e-6)
        assert len(set(idx.tolist())) == len(idx)


def test_heavy_noise_decorrelates_ranking():
    noisy = World(tiny_spec(num_users=200, scenarios=(ScenarioSpec("a", 0.3, 1e6, 30, 80, 0.6),)))
    taus = preference_taus(noisy)
    assert len(taus) == 1000
    assert abs(taus.mean()) < 0.02
    mild = World(tiny_spec(num_users=200, scenarios=(ScenarioSpec("a", 0.3, 1.0, 30, 80, 0.6),)))
    assert preference_taus(mild).mean() > 0.3


def test_events_are_valid_and_time_ordered():
    world = World(tiny_spec())
    times = [e.access_time for e in world.events]
    assert times == sorted(times)
    assert len({e.event_id for e in world.events}) == len(world.events)
    assert all(len(v.items) == world.spec.interactions_per_visit for v in world.truth.visits)


# -- metrics ------------------------------------------------------------------

def test_hitrate_examples():
    assert hitrate({"u": ["a", "b"]}, {"u": ["a", "b"]}) == 1.0
    assert hitrate({"u": ["a", "b"]}, {"u": ["c"]}) == 0.0
    retrieved = {"u1": ["a", "b", "c", "d"], "u2": ["a", "b", "c", "d"]}
    truth = {"u1": ["a", "x"], "u2": ["a", "b", "c", "y"]}
    assert hitrate(retrieved, truth) == 0.5


def test_hitrate_edge_users():
    warnings = []
    # empty truth is excluded; missing retrieval counts as zero
    assert hitrate({"u1": ["a"]}, {"u1": ["a"], "u2": ["b"], "u3": []}, warnings) == 0.5
    assert warnings == ["u3"]


def rs(sid, items):
    return RetrievalSet("u", sid, tuple(ScoredCandidate(i, "c", 0, 0, s) for i, s in items), len(items), 0)


def test_pvr_single_channel():
    out = pvr_proxy({"a": rs("a", [("x", 1.0), ("y", 0.5)])}, 2, lambda ids: [1.0] * len(ids))
    assert out == {"a": 1.0, BACKGROUND: 0.0}


def test_pvr_channel_outside_exposure():
    utility = {"x": 3.0, "y": 2.0, "z": 1.0}
    out = pvr_proxy({"a": rs("a", [("x", 1.0)]), "b": rs("b", [("z", 1.0)])}, 2,
                    lambda ids: [utility[i] for i in ids], background=["y"])
    assert out == {"a": 0.5, "b": 0.0, BACKGROUND: 0.5}


def test_pvr_toy_world_enumeration():
    rng = np.random.default_rng(1)
    items = [f"i{n:02d}" for n in range(30)]
    utility = dict(zip(items, rng.permutation(30).tolist()))
    a = [(i, float(s)) for i, s in zip(items[:12], rng.random(12))]
    b = [(i, float(s)) for i, s in zip(items[8:20], rng.random(12))]
    background = items[15:]
    for k in [1, 5, 10, 17, 30]:
        got = pvr_proxy({"a": rs("a", a), "b": rs("b", b)}, k, lambda ids: [utility[i] for i in ids], background)
        # enumerate: expose the k best of the candidate union, credit each to its best-scoring supplier
        pool = sorted({i for i, _ in a + b} | set(background), key=lambda i: -utility[i])
        share = {"a": 0, "b": 0, BACKGROUND: 0}
        for item in pool[:k]:
            offers = [(s, sid) for sid, lst in (("a", a), ("b", b)) for i, s in lst if i == item]
            if offers:
                share[max(offers, key=lambda o: (o[0], -ord(o[1])))[1]] += 1
            else:
                share[BACKGROUND] += 1
        assert got == pytest.approx({sid: n / min(k, len(pool)) for sid, n in share.items()})
        assert sum(got.values()) == pytest.approx(1.0)


def test_sanity_world_hits_everything():
    """Noiseless, drift-free rankings whose top items are exactly the future interactions."""
    rng = np.random.default_rng(3)
    n_users, n_items, top = 30, 200, 12
    configs = {"a": ScenarioConfig("a", truncation=top, queue_capacity=10, k=top, category_cap=top),
               "b": ScenarioConfig("b", truncation=top, queue_capacity=10, k=top, category_cap=top)}
    events, truth = [], {}
    for u in range(n_users):
        pref = rng.standard_normal(n_items)
        order = np.argsort(-pref)
        truth[f"u{u}"] = {f"i{i}" for i in order[:top]}
        for n in range(int(rng.integers(1, 10))):
            sid = "a" if n % 2 else "b"
            # sigma = 0: the logged list is the preference order, so its head is the true top
            items = tuple(ItemRef(f"i{i}", f"c{i % 5}", float(pref[i])) for i in order[:40])
            events.append(RankLogEvent(f"u{u}-{n}", f"u{u}", sid, n, items))
    rp = harness.replay_events(events, configs)
    by_user = harness.materialize_all(rp, configs, now=100)
    assert hitrate({u: retrieved_items(sets) for u, sets in by_user.items()}, truth) == 1.0


# -- harness ------------------------------------------------------------------

def test_variants_leave_queue_state_alone():
    spec = tiny_spec()
    world = World(spec)
    configs = harness.default_channel_configs(spec)
    out = harness.run_cut_variants(world, configs, harness.strategy_variants(configs), True, check_bytes=True)
    assert set(out) == {"SCORED", "FIFO_ONLY", "RANDOM"}
    for row in out.values():
        assert 0.0 <= row["hitrate"] <= 1.0
        assert sum(row["pvr"].values()) == pytest.approx(1.0)


def test_ablation_is_deterministic_and_reports_tests():
    spec = tiny_spec()
    a = harness.run_ablations(["strategy", "online_offline", "alpha_sweep"], spec, None, [0, 1, 2])
    b = harness.run_ablations(["strategy", "online_offline", "alpha_sweep"], spec, None, [0, 1, 2])
    for name in a:
        assert a[name].per_seed == b[name].per_seed
        assert a[name].to_csv() == b[name].to_csv()
        assert a[name].comparisons
        assert a[name].seconds > 0
    assert len(a["alpha_sweep"].variants) == 5
    assert a["strategy"].comparison("SCORED", "RANDOM") is not None


def test_single_seed_withholds_significance():
    rep = harness.run_ablation("online_offline", tiny_spec(), None, [0])
    assert rep.comparisons == []
    assert any("withheld" in n for n in rep.notes)
    with pytest.raises(ValueError):
        harness.run_ablation("nope", tiny_spec(), None, [0])


def test_parallel_matches_serial():
    spec = tiny_spec(num_users=20)
    serial = harness.run_ablation("strategy", spec, None, [0, 1])
    parallel = harness.run_ablation("strategy", spec, None, [0, 1], workers=2)
    assert serial.per_seed == parallel.per_seed


# -- CLI ----------------------------------------------------------------------

def test_cli_simulate_evaluate_ablation(tmp_path, capsys):
    spec_path = tmp_path / "spec.json"
    spec_path.write_text(json.dumps(tiny_spec().to_dict()))
    world_dir = tmp_path / "world"
    assert cli_main(["simulate", "--spec", str(spec_path), "--out", str(world_dir)]) == 0
    report = tmp_path / "eval.csv"
    assert cli_main(["evaluate", "--world", str(world_dir), "--report", str(report)]) == 0
    rows = dict(csv.reader(report.open()))
    assert 0.0 <= float(rows["hitrate"]) <= 1.0
    assert "pvr_a" in rows
    assert "hitrate" in (tmp_path / "eval.csv.txt").read_text()

    ab = tmp_path / "ab.csv"
    assert cli_main(["ablation", "--name", "strategy", "--spec", str(spec_path), "--seeds", "2",
                     "--report", str(ab)]) == 0
    lines = list(csv.reader(ab.open()))
    assert lines[0][:3] == ["experiment", "variant", "mean_hitrate"]
    assert {row[1] for row in lines[1:4]} == {"SCORED", "FIFO_ONLY", "RANDOM"}
    assert "SCORED" in (tmp_path / "ab.csv.txt").read_text()
    capsys.readouterr()


def test_cli_replay_dump_state(tmp_path, capsys):
    spec = tiny_spec()
    generate_world(spec, tmp_path / "w")
    config = {"scenarios": [c.to_dict() for c in harness.default_channel_configs(spec).values()]}
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps(config))
    dump = tmp_path / "state.json"
    assert cli_main(["replay", "--config", str(cfg), "--input", str(tmp_path / "w" / "events.ndjson"),
                     "--as-fast-as-possible", "--dump-state", str(dump)]) == 0
    tally = json.loads(capsys.readouterr().out)
    world = World(spec)
    assert tally["applied"] == len(world.events)
    rp = harness.replay_events(world.events, harness.default_channel_configs(spec))
    assert dump.read_bytes() == rp.store.serialize()
