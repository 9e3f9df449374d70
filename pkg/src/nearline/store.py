"""Keyed FIFO candidate-queue store with snapshot reads and an optional op log."""

from __future__ import annotations

import json
import logging
import os
import struct
import threading
from typing import Callable, NamedTuple

from .model import TruncatedVisit, VisitItem

logger = logging.getLogger(__name__)

HOUR_MS = 3_600_000
DEFAULT_TTL_MS = 72 * HOUR_MS
COMPACT_EVERY = 10_000

Key = tuple[str, str]


class QueueStats(NamedTuple):
    len_before: int
    len_after: int
    evicted: int


class _QueueState(NamedTuple):
    # replaced wholesale on every write so readers never see a half-applied push
    visits: tuple[TruncatedVisit, ...]
    next_seq: int


class KeyedLocks:
    """Striped re-entrant locks; a key always maps to the same stripe."""

    def __init__(self, stripes: int = 256):
        self._locks = [threading.RLock() for _ in range(stripes)]
        self._n = stripes

    def __call__(self, key) -> threading.RLock:
        return self._locks[hash(key) % self._n]

    def acquire_all(self) -> None:
        for lock in self._locks:
            lock.acquire()

    def release_all(self) -> None:
        for lock in reversed(self._locks):
            lock.release()


class QueueStore:
    """One bounded FIFO of truncated visits per (user_id, scenario_id).

    ``capacity`` maps scenario_id to the number of visits retained.  Writes to
    one key are serialized by its stripe lock; ``snapshot`` takes no lock.
    """

    def __init__(self, capacity: dict[str, int], locks: KeyedLocks | None = None, oplog: OpLog | None = None):
        self.capacity = dict(capacity)
        self.locks = locks or KeyedLocks()
        self.oplog = oplog
        self._queues: dict[Key, _QueueState] = {}
        self.mutations = 0
        self.on_remove: Callable[[Key], None] | None = None

    def __len__(self) -> int:
        return len(self._queues)

    def keys(self) -> list[Key]:
        return list(self._queues)

    def push_visit(self, user_id: str, scenario_id: str, visit: TruncatedVisit) -> QueueStats:
        if not visit.items:
            raise ValueError("empty visits are never enqueued")
        cap = self.capacity[scenario_id]
        key = (user_id, scenario_id)
        with self.locks(key):
            state = self._queues.get(key)
            if state is None:
                visits, seq = (), 0
            else:
                visits, seq = state
            visit = TruncatedVisit(visit.access_time, seq, visit.items, visit.event_id)
            if self.oplog is not None:
                self.oplog.append_push(user_id, scenario_id, visit)
            new = visits + (visit,)
            evicted = len(new) - cap
            if evicted > 0:
                new = new[evicted:]
            else:
                evicted = 0
            self._queues[key] = _QueueState(new, seq + 1)
            self.mutations += 1
            return QueueStats(len(visits), len(new), evicted)

    def snapshot(self, user_id: str, scenario_id: str) -> list[tuple[int, TruncatedVisit]]:
        """Newest visit first, labelled with its time_index (0 = most recent)."""
        state = self._queues.get((user_id, scenario_id))
        if state is None:
            return []
        return list(enumerate(reversed(state.visits)))

    def visits(self, user_id: str, scenario_id: str) -> tuple[TruncatedVisit, ...]:
        state = self._queues.get((user_id, scenario_id))
        return state.visits if state else ()

    def expire(self, now: int, ttl: int) -> int:
        """Remove keys whose newest visit is older than ``now - ttl``."""
        if ttl <= 0:
            raise ValueError("ttl must be positive")
        cutoff = now - ttl
        removed = 0
        for key in list(self._queues):
            with self.locks(key):
                state = self._queues.get(key)
                if state is None or state.visits[-1].access_time >= cutoff:
                    continue
                if self.oplog is not None:
                    self.oplog.append_expire(key[0], key[1], now, ttl)
                del self._queues[key]
                self.mutations += 1
                if self.on_remove is not None:
                    self.on_remove(key)
                removed += 1
        return removed

    def remove(self, key: Key) -> None:
        with self.locks(key):
            if self._queues.pop(key, None) is not None:
                self.mutations += 1

    # -- serialization ---------------------------------------------------

    def to_state(self) -> dict:
        out = {}
        for key in sorted(self._queues):
            state = self._queues[key]
            out["\x1f".join(key)] = {
                "next_seq": state.next_seq,
                "visits": [_visit_to_json(v) for v in state.visits],
            }
        return out

    def load_state(self, data: dict) -> None:
        self._queues.clear()
        for joined, q in data.items():
            user_id, scenario_id = joined.split("\x1f", 1)
            visits = tuple(_visit_from_json(v) for v in q["visits"])
            self._queues[(user_id, scenario_id)] = _QueueState(visits, q["next_seq"])

    def serialize(self) -> bytes:
        """Canonical bytes of every queue; equal stores serialize identically."""
        return json.dumps(self.to_state(), sort_keys=True, separators=(",", ":")).encode("utf-8")


def _visit_to_json(v: TruncatedVisit) -> dict:
    return {
        "event_id": v.event_id,
        "access_time": v.access_time,
        "visit_seq": v.visit_seq,
        "items": [[it.item_id, it.category_id, it.rank_index, it.rank_score] for it in v.items],
    }


def _visit_from_json(d: dict) -> TruncatedVisit:
    items = tuple(VisitItem(i, c, r, s) for i, c, r, s in d["items"])
    return TruncatedVisit(d["access_time"], d["visit_seq"], items, d["event_id"])


# -- operation log --------------------------------------------------------

PUSH = 1
EXPIRE = 2
_HEADER = struct.Struct(">IB")  # payload length, frame type


def encode_frame(frame_type: int, payload: dict) -> bytes:
    body = json.dumps(payload, separators=(",", ":")).encode("utf-8")
    return _HEADER.pack(len(body), frame_type) + body


def read_frames(path: str) -> tuple[list[tuple[int, dict]], int]:
    """Complete frames plus the byte length they span.

    A torn trailing frame (crash mid-write) is left out of both.
    """
    frames: list[tuple[int, dict]] = []
    if not os.path.exists(path):
        return frames, 0
    with open(path, "rb") as f:
        data = f.read()
    pos = 0
    while pos + _HEADER.size <= len(data):
        length, frame_type = _HEADER.unpack_from(data, pos)
        end = pos + _HEADER.size + length
        if end > len(data):
            logger.warning("ignoring torn frame at byte %d of %s", pos, path)
            break
        try:
            payload = json.loads(data[pos + _HEADER.size:end])
        except json.JSONDecodeError:
            logger.warning("ignoring corrupt frame at byte %d of %s", pos, path)
            break
        frames.append((frame_type, payload))
        pos = end
    return frames, pos


class OpLog:
    """Append-only log of PUSH / EXPIRE frames.

    PUSH payloads use the ingest event schema, holding the already truncated
    items, so replaying them re-creates the same queues.  A checkpoint file
    holds full state; the log only covers operations after it.
    """

    def __init__(self, path: str, fsync: bool = False, compact_every: int = COMPACT_EVERY):
        self.path = path
        self.checkpoint_path = path + ".checkpoint"
        self.fsync = fsync
        self.compact_every = compact_every
        self.ops_since_checkpoint = 0
        self._lock = threading.Lock()
        self._recovered, good_end = read_frames(path)
        if os.path.exists(path) and os.path.getsize(path) > good_end:
            with open(path, "r+b") as f:
                f.truncate(good_end)
        self._file = open(path, "ab")

    def _append(self, frame: bytes) -> None:
        with self._lock:
            self._file.write(frame)
            self._file.flush()
            if self.fsync:
                os.fsync(self._file.fileno())
            self.ops_since_checkpoint += 1

    def append_push(self, user_id: str, scenario_id: str, visit: TruncatedVisit) -> None:
        payload = {
            "event_id": visit.event_id,
            "user_id": user_id,
            "scenario_id": scenario_id,
            "access_time": visit.access_time,
            "items": [{"item_id": it.item_id, "category_id": it.category_id, "score": it.rank_score}
                      for it in visit.items],
        }
        self._append(encode_frame(PUSH, payload))

    def append_expire(self, user_id: str, scenario_id: str, now: int, ttl: int) -> None:
        self._append(encode_frame(EXPIRE, {"user_id": user_id, "scenario_id": scenario_id,
                                           "now": now, "ttl": ttl}))

    @property
    def due(self) -> bool:
        return self.ops_since_checkpoint >= self.compact_every

    def checkpoint(self, state: dict) -> None:
        """Write ``state`` atomically, then start an empty log.  Caller must block writers."""
        tmp = self.checkpoint_path + ".tmp"
        with open(tmp, "w", encoding="utf-8") as f:
            json.dump(state, f, sort_keys=True, separators=(",", ":"))
            f.flush()
            os.fsync(f.fileno())
        os.replace(tmp, self.checkpoint_path)
        with self._lock:
            self._file.close()
            self._file = open(self.path, "wb")
            self.ops_since_checkpoint = 0

    def load_checkpoint(self) -> dict | None:
        if not os.path.exists(self.checkpoint_path):
            return None
        with open(self.checkpoint_path, encoding="utf-8") as f:
            return json.load(f)

    def recovered_frames(self) -> list[tuple[int, dict]]:
        """Frames present on disk when the log was opened."""
        return self._recovered

    def close(self) -> None:
        with self._lock:
            if not self._file.closed:
                self._file.flush()
                if self.fsync:
                    os.fsync(self._file.fileno())
                self._file.close()
