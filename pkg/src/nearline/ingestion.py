"""Rank-log decoding, per-scenario truncation and the keyed-serial ingest path.

Wire format is newline-delimited JSON, one visit per line::

    {"event_id": "e1", "user_id": "u1", "scenario_id": "search",
     "access_time": 1700000000000,
     "items": [{"item_id": "i9", "category_id": "c2", "score": 0.93}, ...]}

Items must arrive sorted by score, non-increasing.  Unknown fields are ignored.
"""

from __future__ import annotations

import json
import logging
import math
import sys
import threading
import time
from collections import deque
from dataclasses import dataclass
from functools import partial
from typing import BinaryIO, Callable, Iterable, Iterator

from .model import ItemRef, RankLogEvent, ScenarioConfig, TruncatedVisit, VisitItem

logger = logging.getLogger(__name__)

DEDUP_WINDOW = 4096

STREAM = "stream"
REPLAY_FILE = "replay-file"


class ParseError(ValueError):
    def __init__(self, reason: str, field: str | None, offset: int):
        where = f" field={field}" if field else ""
        super().__init__(f"{reason}{where} at byte {offset}")
        self.reason = reason
        self.field = field
        self.offset = offset


@dataclass(frozen=True, slots=True)
class IngestRecord:
    data: bytes
    source: str = STREAM
    offset: int = 0


@dataclass(frozen=True, slots=True)
class Ack:
    status: str  # applied | duplicate | dropped
    reason: str | None = None
    event_id: str | None = None

    def to_json(self) -> dict:
        d = {"status": self.status}
        if self.event_id is not None:
            d["event_id"] = self.event_id
        if self.reason is not None:
            d["reason"] = self.reason
        return d


APPLIED = "applied"
DUPLICATE = "duplicate"
DROPPED = "dropped"


def _require(obj: dict, name: str, kind, offset: int, path: str | None = None):
    path = path or name
    if name not in obj:
        raise ParseError("missing field", path, offset)
    value = obj[name]
    if kind is int:
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif kind is float:
        ok = isinstance(value, (int, float)) and not isinstance(value, bool) and math.isfinite(value)
    else:
        ok = isinstance(value, kind)
    if not ok:
        raise ParseError("wrong type", path, offset)
    return value


def parse_event(record: IngestRecord | bytes | str) -> RankLogEvent:
    """Decode and validate one frame; raises ParseError, never returns a partial event."""
    if isinstance(record, str):
        record = IngestRecord(record.encode("utf-8"))
    elif isinstance(record, (bytes, bytearray)):
        record = IngestRecord(bytes(record))
    base = record.offset
    try:
        text = record.data.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise ParseError("invalid utf-8", None, base + exc.start) from None
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError("malformed frame", None, base + len(text[: exc.pos].encode("utf-8"))) from None
    if not isinstance(obj, dict):
        raise ParseError("malformed frame", None, base)

    event_id = _require(obj, "event_id", str, base)
    user_id = _require(obj, "user_id", str, base)
    scenario_id = _require(obj, "scenario_id", str, base)
    for name, value in (("event_id", event_id), ("user_id", user_id), ("scenario_id", scenario_id)):
        if not value:
            raise ParseError("empty value", name, base)
    access_time = _require(obj, "access_time", int, base)
    raw_items = _require(obj, "items", list, base)

    items = []
    seen = set()
    prev = math.inf
    for i, raw in enumerate(raw_items):
        path = f"items[{i}]"
        if not isinstance(raw, dict):
            raise ParseError("wrong type", path, base)
        item_id = _require(raw, "item_id", str, base, f"{path}.item_id")
        category_id = raw.get("category_id", "UNKNOWN")
        if not isinstance(category_id, str):
            raise ParseError("wrong type", f"{path}.category_id", base)
        score = _require(raw, "score", float, base, f"{path}.score")
        if not item_id:
            raise ParseError("empty value", f"{path}.item_id", base)
        if item_id in seen:
            raise ParseError("duplicate item_id", f"{path}.item_id", base)
        if score > prev:
            raise ParseError("unsorted items", f"{path}.score", base)
        seen.add(item_id)
        prev = score
        items.append(ItemRef(item_id, category_id or "UNKNOWN", float(score)))
    return RankLogEvent(event_id, user_id, scenario_id, access_time, tuple(items))


def event_to_json(event: RankLogEvent) -> str:
    return json.dumps(
        {
            "event_id": event.event_id,
            "user_id": event.user_id,
            "scenario_id": event.scenario_id,
            "access_time": event.access_time,
            "items": [{"item_id": it.item_id, "category_id": it.category_id, "score": it.rank_score}
                      for it in event.items],
        },
        separators=(",", ":"),
    )


# builds the named tuple without going through its Python-level __new__
_visit_item = partial(tuple.__new__, VisitItem)


def truncate_visit(event: RankLogEvent, config: ScenarioConfig, visit_seq: int = -1) -> TruncatedVisit:
    """Keep the top ``config.truncation`` items; positions are the original ones.

    ``visit_seq`` is a placeholder until the queue store assigns the real value.
    """
    if event.scenario_id != config.scenario_id:
        raise ValueError(f"event scenario {event.scenario_id!r} != config {config.scenario_id!r}")
    kept = event.items[: config.truncation]
    if not kept:
        return TruncatedVisit(event.access_time, visit_seq, (), event.event_id)
    ids, cats, scores = zip(*kept)
    items = tuple(map(_visit_item, zip(ids, cats, range(len(kept)), scores)))
    return TruncatedVisit(event.access_time, visit_seq, items, event.event_id)


def iter_records(stream: BinaryIO, source: str = REPLAY_FILE) -> Iterator[IngestRecord]:
    """Split a byte stream into line records, tracking byte offsets; blank lines are skipped."""
    offset = 0
    for line in stream:
        start = offset
        offset += len(line)
        body = line.rstrip(b"\r\n")
        if body.strip():
            yield IngestRecord(body, source, start)


class DedupWindow:
    """Ring buffer of the most recent event ids for one key."""

    __slots__ = ("_ring", "_set")

    def __init__(self, size: int = DEDUP_WINDOW):
        self._ring: deque[str] = deque(maxlen=size)
        self._set: set[str] = set()

    def __contains__(self, event_id: str) -> bool:
        return event_id in self._set

    def add(self, event_id: str) -> None:
        if len(self._ring) == self._ring.maxlen:
            self._set.discard(self._ring[0])
        self._ring.append(event_id)
        self._set.add(event_id)

    def ids(self) -> list[str]:
        return list(self._ring)


class Ingestor:
    """Keyed-serial ingest: dedup, truncate, push, then notify (materialize).

    ``on_applied(user_id, scenario_id)`` runs while the key lock is still held, so
    the acked state and any derived retrieval set are visible before the Ack returns.
    """

    def __init__(self, store, configs: dict[str, ScenarioConfig],
                 on_applied: Callable[[str, str], None] | None = None,
                 dedup_window: int = DEDUP_WINDOW):
        self.store = store
        self.configs = dict(configs)
        self.on_applied = on_applied
        self.dedup_window = dedup_window
        self.locks = store.locks
        self._dedup: dict[tuple[str, str], DedupWindow] = {}
        self._counter_lock = threading.Lock()
        self.counts = {APPLIED: 0, DUPLICATE: 0, DROPPED: 0, "parse_errors": 0}

    def _count(self, status: str) -> None:
        with self._counter_lock:
            self.counts[status] += 1

    def ingest(self, event: RankLogEvent) -> Ack:
        config = self.configs.get(event.scenario_id)
        if config is None:
            self._count(DROPPED)
            return Ack(DROPPED, "unknown_scenario", event.event_id)
        key = event.key
        with self.locks(key):
            window = self._dedup.get(key)
            if window is not None and event.event_id in window:
                self._count(DUPLICATE)
                return Ack(DUPLICATE, None, event.event_id)
            visit = truncate_visit(event, config)
            if not visit.items:
                self._count(DROPPED)
                return Ack(DROPPED, "empty_visit", event.event_id)
            self.store.push_visit(event.user_id, event.scenario_id, visit)
            if window is None:
                window = self._dedup[key] = DedupWindow(self.dedup_window)
            window.add(event.event_id)
            if self.on_applied is not None:
                self.on_applied(event.user_id, event.scenario_id)
        self._count(APPLIED)
        return Ack(APPLIED, None, event.event_id)

    def ingest_record(self, record: IngestRecord) -> Ack:
        try:
            event = parse_event(record)
        except ParseError as exc:
            self._count(DROPPED)
            with self._counter_lock:
                self.counts["parse_errors"] += 1
            logger.debug("rejected record: %s", exc)
            return Ack(DROPPED, f"parse_error: {exc}")
        return self.ingest(event)

    def forget(self, key: tuple[str, str]) -> None:
        """Drop the dedup window of an expired key; caller holds the key lock."""
        self._dedup.pop(key, None)

    def remember(self, key: tuple[str, str], event_id: str) -> None:
        window = self._dedup.get(key)
        if window is None:
            window = self._dedup[key] = DedupWindow(self.dedup_window)
        window.add(event_id)

    def dedup_state(self) -> dict[tuple[str, str], list[str]]:
        return {k: w.ids() for k, w in self._dedup.items()}

    def restore_dedup(self, key: tuple[str, str], ids: Iterable[str]) -> None:
        window = self._dedup[key] = DedupWindow(self.dedup_window)
        for event_id in ids:
            window.add(event_id)


def replay(ingestor: Ingestor, stream: BinaryIO, speed: float | None = None,
           clock: Callable[[], float] = time.monotonic,
           sleep: Callable[[float], None] = time.sleep) -> dict[str, int]:
    """Feed an NDJSON stream through ``ingestor`` in file order.

    With ``speed`` set, inter-event gaps of access_time are reproduced divided by
    ``speed``; ``None`` replays as fast as possible.
    """
    tally = {APPLIED: 0, DUPLICATE: 0, DROPPED: 0}
    first_event_ms = None
    start = clock()
    for record in iter_records(stream):
        if speed is not None:
            try:
                at = json.loads(record.data).get("access_time")
            except (json.JSONDecodeError, AttributeError):
                at = None
            if isinstance(at, int):
                if first_event_ms is None:
                    first_event_ms = at
                due = (at - first_event_ms) / 1000.0 / speed
                lag = due - (clock() - start)
                if lag > 0:
                    sleep(lag)
        ack = ingestor.ingest_record(record)
        tally[ack.status] += 1
        if ack.status == DROPPED and ack.reason and ack.reason.startswith("parse_error"):
            print(f"line at byte {record.offset}: {ack.reason}", file=sys.stderr)
    return tally
