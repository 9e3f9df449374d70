"""Service wiring: config, the ingest -> queue -> materialize pipeline, HTTP API."""

from __future__ import annotations

import bisect
import gc
import json
import logging
import os
import signal
import threading
import time
from dataclasses import dataclass
from http import HTTPStatus
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from urllib.parse import parse_qs, urlsplit

from .ingestion import APPLIED, DEDUP_WINDOW, DROPPED, DUPLICATE, Ack, IngestRecord, Ingestor
from .model import ConfigError, RetrievalSet, ScenarioConfig, TruncatedVisit, VisitItem
from .retrieval import RetrievalEngine
from .store import DEFAULT_TTL_MS, EXPIRE, PUSH, OpLog, QueueStore

logger = logging.getLogger(__name__)

DEFAULT_LISTEN = "127.0.0.1:8080"


@dataclass
class AppConfig:
    scenarios: dict[str, ScenarioConfig]
    listen: str = DEFAULT_LISTEN
    ttl_ms: int = DEFAULT_TTL_MS
    dedup_window: int = DEDUP_WINDOW
    persistence: bool = False
    log_path: str = "nearline.oplog"
    fsync: bool = False
    compact_every: int = 10_000

    @classmethod
    def from_dict(cls, d: dict) -> AppConfig:
        if not isinstance(d, dict):
            raise ConfigError("$", "config must be a JSON object")
        raw = d.get("scenarios")
        if not isinstance(raw, list) or not raw:
            raise ConfigError("scenarios", "must be a non-empty list")
        scenarios: dict[str, ScenarioConfig] = {}
        for i, entry in enumerate(raw):
            sc = ScenarioConfig.from_dict(entry, f"scenarios[{i}]")
            if sc.scenario_id in scenarios:
                raise ConfigError(f"scenarios[{i}].scenario_id", f"duplicate scenario {sc.scenario_id!r}")
            scenarios[sc.scenario_id] = sc
        defaults = d.get("defaults", {})
        if not isinstance(defaults, dict):
            raise ConfigError("defaults", "must be an object")
        listen = d.get("listen", DEFAULT_LISTEN)
        if not isinstance(listen, str) or ":" not in listen:
            raise ConfigError("listen", "expected host:port")
        kw = {}
        for name, kind in (("ttl_ms", int), ("dedup_window", int), ("persistence", bool),
                           ("log_path", str), ("fsync", bool), ("compact_every", int)):
            if name in defaults:
                value = defaults[name]
                if not isinstance(value, kind) or (kind is int and (isinstance(value, bool) or value < 1)):
                    raise ConfigError(f"defaults.{name}", f"invalid value {value!r}")
                kw[name] = value
        return cls(scenarios=scenarios, listen=listen, **kw)

    @classmethod
    def load(cls, path: str) -> AppConfig:
        try:
            with open(path, encoding="utf-8") as f:
                data = json.load(f)
        except json.JSONDecodeError as exc:
            raise ConfigError("$", f"invalid JSON at line {exc.lineno}: {exc.msg}") from None
        config = cls.from_dict(data)
        override = os.environ.get("MNR_LISTEN_ADDR")
        if override:
            config.listen = override
        return config

    def to_dict(self) -> dict:
        return {
            "listen": self.listen,
            "defaults": {"ttl_ms": self.ttl_ms, "dedup_window": self.dedup_window,
                         "persistence": self.persistence, "log_path": self.log_path,
                         "fsync": self.fsync, "compact_every": self.compact_every},
            "scenarios": [sc.to_dict() for sc in self.scenarios.values()],
        }


class LatencyHistogram:
    BUCKETS = (0.0005, 0.001, 0.0025, 0.005, 0.01, 0.025, 0.05, 0.1, 0.25, 1.0)

    def __init__(self):
        self._lock = threading.Lock()
        self.counts = [0] * (len(self.BUCKETS) + 1)
        self.total = 0.0
        self.n = 0

    def observe(self, seconds: float) -> None:
        with self._lock:
            self.counts[bisect.bisect_left(self.BUCKETS, seconds)] += 1
            self.total += seconds
            self.n += 1

    def lines(self, name: str) -> list[str]:
        out = []
        running = 0
        for le, c in zip(self.BUCKETS, self.counts):
            running += c
            out.append(f'{name}_bucket{{le="{le}"}} {running}')
        out.append(f'{name}_bucket{{le="+Inf"}} {self.n}')
        out.append(f"{name}_sum {self.total:.6f}")
        out.append(f"{name}_count {self.n}")
        return out


def _join(key: tuple[str, str]) -> str:
    return "\x1f".join(key)


def _split(joined: str) -> tuple[str, str]:
    user_id, scenario_id = joined.split("\x1f", 1)
    return user_id, scenario_id


class NearlineService:
    """Everything behind the API: queues, dedup, materialization, metrics, op log."""

    def __init__(self, config: AppConfig, materialize_on_write: bool = True):
        self.config = config
        self.oplog = None
        if config.persistence:
            self.oplog = OpLog(config.log_path, fsync=config.fsync, compact_every=config.compact_every)
        self.store = QueueStore({s: c.queue_capacity for s, c in config.scenarios.items()})
        self.engine = RetrievalEngine(self.store, config.scenarios)
        # sets and their encoded items, refreshed together on every write
        self._wire: dict[tuple[str, str], tuple[RetrievalSet, tuple[str, ...]]] = {}
        on_applied = self._materialize if materialize_on_write else None
        self.ingestor = Ingestor(self.store, config.scenarios, on_applied=on_applied,
                                 dedup_window=config.dedup_window)
        self.store.on_remove = self._forget
        self.retrieve_calls = 0
        self.retrieve_latency = LatencyHistogram()
        self._metrics_lock = threading.Lock()
        self._compact_lock = threading.Lock()
        self.ready = False
        if self.oplog is not None:
            self._recover()
        # attached only after recovery so replayed frames are not logged twice
        self.store.oplog = self.oplog
        self.ready = True

    # -- write path --------------------------------------------------------

    def _forget(self, key: tuple[str, str]) -> None:
        self.ingestor.forget(key)
        self.engine.serving.pop(key)
        self._wire.pop(key, None)

    def _materialize(self, user_id: str, scenario_id: str) -> None:
        rs = self.engine.materialize(user_id, scenario_id)
        # items are encoded once per write so a read only joins a prefix
        self._wire[(user_id, scenario_id)] = (rs, tuple(map(_candidate_json, rs.items)))

    def ingest(self, event) -> Ack:
        ack = self.ingestor.ingest(event)
        self._maybe_compact()
        return ack

    def ingest_record(self, record: IngestRecord) -> Ack:
        ack = self.ingestor.ingest_record(record)
        self._maybe_compact()
        return ack

    def ingest_lines(self, body: bytes) -> list[Ack]:
        acks = []
        offset = 0
        for line in body.splitlines(keepends=True):
            start = offset
            offset += len(line)
            data = line.rstrip(b"\r\n")
            if data.strip():
                acks.append(self.ingest_record(IngestRecord(data, "stream", start)))
        return acks

    def expire(self, now: int | None = None, ttl: int | None = None) -> int:
        now = int(time.time() * 1000) if now is None else now
        return self.store.expire(now, self.config.ttl_ms if ttl is None else ttl)

    def _maybe_compact(self) -> None:
        if self.oplog is None or not self.oplog.due:
            return
        if not self._compact_lock.acquire(blocking=False):
            return
        try:
            self.store.locks.acquire_all()
            try:
                if self.oplog.due:
                    self.oplog.checkpoint(self.state())
            finally:
                self.store.locks.release_all()
        finally:
            self._compact_lock.release()

    # -- read path ----------------------------------------------------------

    def retrieve(self, user_id: str, scenario_ids=None, k: int | None = None) -> dict[str, RetrievalSet]:
        t0 = time.perf_counter()
        sids = list(self.config.scenarios) if not scenario_ids else scenario_ids
        out = self.engine.retrieve(user_id, sids, k)
        self.retrieve_latency.observe(time.perf_counter() - t0)
        with self._metrics_lock:
            self.retrieve_calls += 1
        return out

    def retrieve_json(self, user_id: str, scenario_ids=None, k: int | None = None) -> bytes:
        """The ``retrieve`` result already serialized as the /v1/retrieve body."""
        t0 = time.perf_counter()
        sids = list(self.config.scenarios) if not scenario_ids else scenario_ids
        channels = []
        for sid in sids:
            rs = self.engine.serving.get(user_id, sid)
            if rs is None:
                channels.append(_channel_json(sid, (), None))
                continue
            entry = self._wire.get((user_id, sid))
            # a write may land between the two lookups; then encode directly
            items = entry[1] if entry is not None and entry[0] is rs else tuple(map(_candidate_json, rs.items))
            channels.append(_channel_json(sid, items if k is None else items[:k], rs.generated_at))
        body = _response_json(user_id, channels)
        self.retrieve_latency.observe(time.perf_counter() - t0)
        with self._metrics_lock:
            self.retrieve_calls += 1
        return body

    def metrics_text(self) -> str:
        c = self.ingestor.counts
        lines = [
            f"nearline_events_ingested_total {c[APPLIED]}",
            f"nearline_events_dropped_total {c[DROPPED]}",
            f"nearline_events_duplicate_total {c[DUPLICATE]}",
            f"nearline_events_parse_errors_total {c['parse_errors']}",
            f"nearline_queue_keys {len(self.store)}",
            f"nearline_materializations_total {self.engine.materializations}",
            f"nearline_retrieve_calls_total {self.retrieve_calls}",
        ]
        lines += self.retrieve_latency.lines("nearline_retrieve_latency_seconds")
        return "\n".join(lines) + "\n"

    # -- persistence ---------------------------------------------------------

    def state(self) -> dict:
        return {
            "queues": self.store.to_state(),
            "dedup": {_join(k): ids for k, ids in sorted(self.ingestor.dedup_state().items())},
        }

    def _recover(self) -> None:
        checkpoint = self.oplog.load_checkpoint()
        if checkpoint is not None:
            self.store.load_state(checkpoint["queues"])
            for joined, ids in checkpoint["dedup"].items():
                self.ingestor.restore_dedup(_split(joined), ids)
        frames = self.oplog.recovered_frames()
        for frame_type, payload in frames:
            key = (payload["user_id"], payload["scenario_id"])
            if key[1] not in self.config.scenarios:
                logger.warning("skipping log frame for unconfigured scenario %r", key[1])
                continue
            if frame_type == PUSH:
                items = tuple(VisitItem(it["item_id"], it["category_id"], i, it["score"])
                              for i, it in enumerate(payload["items"]))
                visit = TruncatedVisit(payload["access_time"], -1, items, payload["event_id"])
                self.store.push_visit(key[0], key[1], visit)
                self.ingestor.remember(key, payload["event_id"])
            elif frame_type == EXPIRE:
                self.store.remove(key)
                self._forget(key)
        self.oplog.ops_since_checkpoint = len(frames)
        for user_id, scenario_id in self.store.keys():
            if scenario_id in self.config.scenarios:
                self._materialize(user_id, scenario_id)
            else:
                self.store.remove((user_id, scenario_id))
        logger.info("recovered %d keys (%d log frames)", len(self.store), len(frames))

    def close(self) -> None:
        if self.oplog is not None:
            self.oplog.close()


# -- HTTP ---------------------------------------------------------------------

_encode_str = json.encoder.encode_basestring_ascii


def _candidate_json(c) -> str:
    return (f'{{"item_id":{_encode_str(c.item_id)},"final_score":{c.final_score!r},'
            f'"rank_index":{c.rank_index},"time_index":{c.time_index},'
            f'"category_id":{_encode_str(c.category_id)}}}')


def _channel_json(scenario_id: str, items, generated_at: int | None) -> str:
    generated = "null" if generated_at is None else str(generated_at)
    return f'{_encode_str(scenario_id)}:{{"items":[{",".join(items)}],"generated_at":{generated}}}'


def _response_json(user_id: str, channels: list[str]) -> bytes:
    return f'{{"user_id":{_encode_str(user_id)},"channels":{{{",".join(channels)}}}}}'.encode("ascii")


def encode_retrieve_response(user_id: str, sets: dict[str, RetrievalSet]) -> bytes:
    """JSON body for /v1/retrieve, built by hand since it dominates read latency."""
    return _response_json(user_id, [_channel_json(sid, map(_candidate_json, rs.items), rs.generated_at)
                                    for sid, rs in sets.items()])


class _BadRequest(Exception):
    pass


class Handler(BaseHTTPRequestHandler):
    protocol_version = "HTTP/1.1"
    # small responses on keep-alive connections otherwise wait on delayed ACKs
    disable_nagle_algorithm = True
    service: NearlineService  # set on the subclass built by make_server

    def log_message(self, fmt, *args):
        logger.debug("%s " + fmt, self.address_string(), *args)

    def _send(self, status: int, body: bytes, content_type: str = "application/json") -> None:
        self.send_response(status)
        self.send_header("Content-Type", content_type)
        self.send_header("Content-Length", str(len(body)))
        # headers and body go out in one write
        self._headers_buffer.append(b"\r\n")
        self._headers_buffer.append(body)
        self.flush_headers()

    def _json(self, status: int, obj) -> None:
        self._send(status, json.dumps(obj, separators=(",", ":")).encode("utf-8"))

    def _body(self) -> bytes:
        length = self.headers.get("Content-Length")
        if length is None:
            raise _BadRequest("Content-Length required")
        try:
            n = int(length)
        except ValueError:
            raise _BadRequest("bad Content-Length") from None
        if n < 0:
            raise _BadRequest("bad Content-Length")
        return self.rfile.read(n)

    def _dispatch(self, routes: dict) -> None:
        url = urlsplit(self.path)
        route = routes.get(url.path)
        if route is None:
            self._json(HTTPStatus.NOT_FOUND, {"error": f"no route {url.path}"})
            return
        try:
            route(self, url)
        except _BadRequest as exc:
            self._json(HTTPStatus.BAD_REQUEST, {"error": str(exc)})
        except Exception:  # noqa: BLE001 - report instead of dropping the connection
            logger.exception("unhandled error on %s", url.path)
            self._json(HTTPStatus.INTERNAL_SERVER_ERROR, {"error": "internal error"})

    def do_GET(self):
        self._dispatch(GET_ROUTES)

    def do_POST(self):
        self._dispatch(POST_ROUTES)

    # routes

    def get_retrieve(self, url):
        q = parse_qs(url.query, keep_blank_values=True)
        users = q.get("user_id")
        if not users or not users[0]:
            raise _BadRequest("user_id is required")
        k = None
        if "k" in q:
            try:
                k = int(q["k"][0])
            except ValueError:
                raise _BadRequest("k must be an integer") from None
            if k < 1:
                raise _BadRequest("k must be >= 1")
        scenarios = [s for s in q.get("scenario", []) if s]
        self._send(HTTPStatus.OK, self.service.retrieve_json(users[0], scenarios or None, k))

    def get_metrics(self, url):
        self._send(HTTPStatus.OK, self.service.metrics_text().encode("utf-8"), "text/plain; version=0.0.4")

    def get_ready(self, url):
        status = HTTPStatus.OK if self.service.ready else HTTPStatus.SERVICE_UNAVAILABLE
        self._json(status, {"ready": self.service.ready})

    def post_ingest(self, url):
        acks = self.service.ingest_lines(self._body())
        summary = {APPLIED: 0, DUPLICATE: 0, DROPPED: 0}
        for a in acks:
            summary[a.status] += 1
        self._json(HTTPStatus.OK, {"acks": [a.to_json() for a in acks], **summary})

    def post_expire(self, url):
        body = self._body()
        params = {}
        if body.strip():
            try:
                params = json.loads(body)
            except json.JSONDecodeError:
                raise _BadRequest("body must be JSON") from None
            if not isinstance(params, dict):
                raise _BadRequest("body must be a JSON object")
        now = params.get("now")
        ttl = params.get("ttl_ms")
        for name, value in (("now", now), ("ttl_ms", ttl)):
            if value is not None and (not isinstance(value, int) or isinstance(value, bool)):
                raise _BadRequest(f"{name} must be an integer")
        if ttl is not None and ttl <= 0:
            raise _BadRequest("ttl_ms must be > 0")
        removed = self.service.expire(now, ttl)
        self._json(HTTPStatus.OK, {"removed": removed})


GET_ROUTES = {
    "/v1/retrieve": Handler.get_retrieve,
    "/v1/metrics": Handler.get_metrics,
    "/v1/ready": Handler.get_ready,
}
POST_ROUTES = {
    "/v1/ingest": Handler.post_ingest,
    "/v1/admin/expire": Handler.post_expire,
}


def parse_listen(addr: str) -> tuple[str, int]:
    host, _, port = addr.rpartition(":")
    return host or "127.0.0.1", int(port)


def make_server(service: NearlineService, listen: str | None = None) -> ThreadingHTTPServer:
    handler = type("BoundHandler", (Handler,), {"service": service})
    server = ThreadingHTTPServer(parse_listen(listen or service.config.listen), handler)
    server.daemon_threads = True
    return server


def serve(config: AppConfig, ready_file: str | None = None) -> None:
    """Run until SIGTERM/SIGINT; the op log is flushed on the way out."""
    service = NearlineService(config)
    # recovered state is long-lived; keep it out of every future full collection
    gc.collect()
    gc.freeze()
    server = make_server(service)
    host, port = server.server_address[:2]
    logger.info("listening on %s:%d", host, port)
    if ready_file:
        with open(ready_file, "w", encoding="utf-8") as f:
            f.write(f"{host}:{port}\n")

    def _stop(signum, frame):
        threading.Thread(target=server.shutdown, daemon=True).start()

    signal.signal(signal.SIGTERM, _stop)
    signal.signal(signal.SIGINT, _stop)
    try:
        server.serve_forever(poll_interval=0.2)
    finally:
        server.server_close()
        service.close()
