import os
import random
import threading

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import make_visit
from nearline.store import EXPIRE, HOUR_MS, PUSH, KeyedLocks, OpLog, QueueStore, encode_frame, read_frames


def seqs(store, user="u", scenario="s"):
    return [v.visit_seq for v in store.visits(user, scenario)]


def test_capacity_two_evicts_oldest():
    store = QueueStore({"s": 2})
    assert store.push_visit("u", "s", make_visit(0, ["a"])).evicted == 0
    store.push_visit("u", "s", make_visit(0, ["b"]))
    stats = store.push_visit("u", "s", make_visit(0, ["c"]))
    assert (stats.len_before, stats.len_after, stats.evicted) == (2, 2, 1)
    assert seqs(store) == [1, 2]
    assert [v.items[0].item_id for v in store.visits("u", "s")] == ["b", "c"]


def test_capacity_one_holds_latest():
    store = QueueStore({"s": 1})
    for n in range(5):
        store.push_visit("u", "s", make_visit(0, [f"i{n}"]))
        assert [v.items[0].item_id for v in store.visits("u", "s")] == [f"i{n}"]


def test_sequence_assigned_by_store():
    store = QueueStore({"s": 8})
    for _ in range(3):
        store.push_visit("u", "s", make_visit(99, ["a"]))
    assert seqs(store) == [0, 1, 2]


def test_empty_visit_rejected():
    with pytest.raises(ValueError):
        QueueStore({"s": 2}).push_visit("u", "s", make_visit(0, []))


def test_random_pushes_keep_suffix():
    rng = random.Random(11)
    store = QueueStore({"s": 8})
    pushed = []
    for n in range(200):
        ids = [f"i{rng.randrange(50)}-{n}"]
        store.push_visit("u", "s", make_visit(0, ids))
        pushed.append(ids[0])
    assert [v.items[0].item_id for v in store.visits("u", "s")] == pushed[-8:]


def test_snapshot_labels_newest_first():
    store = QueueStore({"s": 2})
    for name in ["v0", "v1", "v2"]:
        store.push_visit("u", "s", make_visit(0, [name]))
    snap = store.snapshot("u", "s")
    assert [(t, v.items[0].item_id) for t, v in snap] == [(0, "v2"), (1, "v1")]
    assert store.snapshot("nobody", "s") == []


@settings(max_examples=200, deadline=None)
@given(st.integers(1, 16), st.integers(0, 120))
def test_queue_invariants(capacity, pushes):
    store = QueueStore({"s": capacity})
    for _ in range(pushes):
        store.push_visit("u", "s", make_visit(0, ["a"]))
    got = seqs(store)
    assert got == list(range(max(0, pushes - capacity), pushes))
    assert [t for t, _ in store.snapshot("u", "s")] == list(range(len(got)))


def test_expire_by_age():
    store = QueueStore({"s": 4})
    now = 100 * HOUR_MS
    store.push_visit("old", "s", make_visit(0, ["a"], t=now - 25 * HOUR_MS))
    store.push_visit("new", "s", make_visit(0, ["a"], t=now - 1 * HOUR_MS))
    assert store.expire(now, 24 * HOUR_MS) == 1
    assert store.keys() == [("new", "s")]


def test_expire_uses_newest_visit():
    store = QueueStore({"s": 4})
    store.push_visit("u", "s", make_visit(0, ["a"], t=0))
    store.push_visit("u", "s", make_visit(0, ["a"], t=50))
    assert store.expire(now=60, ttl=20) == 0
    assert store.expire(now=80, ttl=20) == 1


def test_expire_matches_filter_oracle():
    rng = random.Random(5)
    store = QueueStore({"s": 3, "t": 2})
    newest = {}
    for n in range(1000):
        key = (f"u{n}", rng.choice("st"))
        for _ in range(rng.randint(1, 3)):
            t = rng.randrange(0, 200 * HOUR_MS)
            store.push_visit(*key, make_visit(0, ["a"], t=t))
            newest[key] = t  # the queue's newest visit is the last pushed
    now, ttl = 200 * HOUR_MS, 72 * HOUR_MS
    removed = []
    store.on_remove = removed.append
    expected = {k for k, t in newest.items() if t < now - ttl}
    assert store.expire(now, ttl) == len(expected)
    assert set(removed) == expected
    assert set(store.keys()) == set(newest) - expected


def test_state_roundtrip():
    store = QueueStore({"s": 2})
    for n in range(3):
        store.push_visit(f"u{n % 2}", "s", make_visit(0, ["a", "b"], t=n, categories=["x", "y"]))
    other = QueueStore({"s": 2})
    other.load_state(store.to_state())
    assert other.serialize() == store.serialize()
    other.push_visit("u0", "s", make_visit(0, ["c"]))
    assert seqs(other, "u0") == [1, 2]


def test_concurrent_snapshots_are_linearizable():
    """Every snapshot must equal the queue after some prefix of the pushes."""
    capacity, pushes = 4, 3000
    store = QueueStore({"s": capacity})
    observed = []
    done = threading.Event()

    def reader():
        while not done.is_set():
            observed.append(tuple(v.visit_seq for _, v in store.snapshot("u", "s")))

    def writer(lo, hi):
        for _ in range(lo, hi):
            store.push_visit("u", "s", make_visit(0, ["a"]))

    readers = [threading.Thread(target=reader) for _ in range(3)]
    writers = [threading.Thread(target=writer, args=(i * 1000, (i + 1) * 1000)) for i in range(3)]
    for th in readers + writers:
        th.start()
    for th in writers:
        th.join()
    done.set()
    for th in readers:
        th.join()

    # sequential model: after n pushes the newest-first view is n-1, n-2, ...
    legal = {tuple(range(n - 1, max(0, n - capacity) - 1, -1)) for n in range(pushes + 1)}
    assert observed
    assert all(snap in legal for snap in observed)
    assert seqs(store) == list(range(pushes - capacity, pushes))


def test_keyed_locks_are_reentrant():
    locks = KeyedLocks(4)
    with locks(("u", "s")):
        with locks(("u", "s")):
            pass
    locks.acquire_all()
    locks.release_all()


# -- op log -------------------------------------------------------------------

def test_oplog_roundtrip_and_torn_tail(tmp_path):
    path = str(tmp_path / "ops.log")
    log = OpLog(path)
    store = QueueStore({"s": 2}, oplog=log)
    store.push_visit("u", "s", make_visit(0, ["a", "b"], t=5))
    store.expire(now=10 ** 9, ttl=1)
    log.close()
    frames, end = read_frames(path)
    assert [f[0] for f in frames] == [PUSH, EXPIRE]
    assert frames[0][1]["items"][1]["item_id"] == "b"
    assert end == os.path.getsize(path)

    # simulate a crash halfway through a third frame
    with open(path, "ab") as f:
        f.write(encode_frame(PUSH, {"user_id": "u"})[:7])
    assert read_frames(path) == (frames, end)
    reopened = OpLog(path)
    assert reopened.recovered_frames() == frames
    assert os.path.getsize(path) == end
    reopened.close()


def test_checkpoint_resets_log(tmp_path):
    path = str(tmp_path / "ops.log")
    log = OpLog(path, compact_every=2)
    store = QueueStore({"s": 2}, oplog=log)
    store.push_visit("u", "s", make_visit(0, ["a"]))
    assert not log.due
    store.push_visit("u", "s", make_visit(0, ["b"]))
    assert log.due
    log.checkpoint(store.to_state())
    assert os.path.getsize(path) == 0 and not log.due
    assert log.load_checkpoint() == store.to_state()
    log.close()
