"""Command line entry point: ``nearline {serve,replay,simulate,evaluate,ablation}``."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import urllib.request

from .ingestion import APPLIED, DROPPED, DUPLICATE, iter_records, parse_event, replay
from .model import ConfigError
from .service import AppConfig, NearlineService, serve

EXIT_CONFIG = 2


def _load_config(path: str | None) -> AppConfig:
    path = path or os.environ.get("MNR_CONFIG")
    if not path:
        raise ConfigError("--config", "no config given (flag or MNR_CONFIG)")
    return AppConfig.load(path)


def _speed(value: str) -> float:
    v = value[1:] if value.startswith("x") else value
    try:
        speed = float(v)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected xN, got {value!r}") from None
    if speed <= 0:
        raise argparse.ArgumentTypeError("speed must be > 0")
    return speed


def cmd_serve(args) -> int:
    serve(_load_config(args.config), ready_file=args.ready_file)
    return 0


def _post_batches(target: str, stream, batch: int) -> dict[str, int]:
    tally = {APPLIED: 0, DUPLICATE: 0, DROPPED: 0}
    url = target.rstrip("/") + "/v1/ingest"
    lines: list[bytes] = []

    def send():
        req = urllib.request.Request(url, data=b"\n".join(lines) + b"\n", method="POST",
                                     headers={"Content-Type": "application/x-ndjson"})
        with urllib.request.urlopen(req) as resp:
            body = json.load(resp)
        for k in tally:
            tally[k] += body[k]
        lines.clear()

    for record in iter_records(stream):
        lines.append(record.data)
        if len(lines) >= batch:
            send()
    if lines:
        send()
    return tally


def cmd_replay(args) -> int:
    stream = sys.stdin.buffer if args.input == "-" else open(args.input, "rb")
    try:
        if args.target:
            tally = _post_batches(args.target, stream, args.batch)
        else:
            service = NearlineService(_load_config(args.config))
            try:
                tally = replay(service.ingestor, stream, None if args.as_fast_as_possible else args.speed)
                if args.dump_state:
                    with open(args.dump_state, "wb") as f:
                        f.write(service.store.serialize())
            finally:
                service.close()
    finally:
        if stream is not sys.stdin.buffer:
            stream.close()
    print(json.dumps(tally))
    return 0


def cmd_simulate(args) -> int:
    from .sim.world import WorldSpec, generate_world

    spec = WorldSpec()
    if args.spec:
        with open(args.spec, encoding="utf-8") as f:
            spec = WorldSpec.from_dict(json.load(f))
    events, truth = generate_world(spec, args.out)
    print(f"wrote {events} and {truth}")
    return 0


def cmd_evaluate(args) -> int:
    from .sim.harness import default_channel_configs, evaluate_at_cut, materialize_all, mean_pvr, replay_events
    from .sim.metrics import BACKGROUND
    from .sim.world import GroundTruth, World, WorldSpec

    with open(os.path.join(args.world, "world.json"), encoding="utf-8") as f:
        spec = WorldSpec.from_dict(json.load(f))
    configs = _load_config(args.config).scenarios if args.config else default_channel_configs(spec)
    cut = spec.cut_ms
    with open(os.path.join(args.world, "events.ndjson"), "rb") as f:
        events = [parse_event(r) for r in iter_records(f)]
    with open(os.path.join(args.world, "truth.ndjson"), encoding="utf-8") as f:
        truth = GroundTruth.from_lines(f)
    rp = replay_events((e for e in events if e.access_time < cut), configs)
    by_user = materialize_all(rp, configs, cut)
    world = World(spec)  # regenerated only for the PVR oracle
    h = evaluate_at_cut(world, by_user, truth.held_out(cut))
    pvr = mean_pvr(world, by_user, cut)
    rows = [("hitrate", h)] + [(f"pvr_{sid}", v) for sid, v in pvr.items()]
    with open(args.report, "w", encoding="utf-8") as f:
        f.write("metric,value\n")
        for name, value in rows:
            f.write(f"{name},{value:.6f}\n")
    summary = [f"hitrate (CTCVR proxy): {h:.5f} over {len(by_user)} users"]
    summary += [f"PVR proxy {sid}: {v:.4f}" for sid, v in pvr.items() if sid != BACKGROUND]
    summary.append(f"PVR proxy background: {pvr.get(BACKGROUND, 0.0):.4f}")
    text = "\n".join(summary) + "\n"
    with open(args.report + ".txt", "w", encoding="utf-8") as f:
        f.write(text)
    sys.stdout.write(text)
    return 0


def cmd_ablation(args) -> int:
    from .sim.harness import run_ablation
    from .sim.world import WorldSpec

    spec = WorldSpec()
    if args.spec:
        with open(args.spec, encoding="utf-8") as f:
            spec = WorldSpec.from_dict(json.load(f))
    configs = _load_config(args.config).scenarios if args.config else None
    report = run_ablation(args.name, spec, configs, range(args.seeds), workers=args.workers)
    with open(args.report, "w", encoding="utf-8") as f:
        f.write(report.to_csv())
    with open(args.report + ".txt", "w", encoding="utf-8") as f:
        f.write(report.summary())
    sys.stdout.write(report.summary())
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="nearline", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("serve", help="run the HTTP service")
    s.add_argument("--config")
    s.add_argument("--ready-file", help="write host:port here once listening")
    s.set_defaults(func=cmd_serve)

    r = sub.add_parser("replay", help="replay an NDJSON rank-log file")
    r.add_argument("--config")
    r.add_argument("--input", required=True, help="file path or - for stdin")
    pace = r.add_mutually_exclusive_group()
    pace.add_argument("--speed", type=_speed, default=None, help="xN: replay N times faster than recorded")
    pace.add_argument("--as-fast-as-possible", action="store_true")
    r.add_argument("--target", help="POST to a running service at this base URL instead")
    r.add_argument("--batch", type=int, default=1000)
    r.add_argument("--dump-state", help="write serialized queue state here afterwards")
    r.set_defaults(func=cmd_replay)

    g = sub.add_parser("simulate", help="generate a synthetic world")
    g.add_argument("--spec")
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_simulate)

    e = sub.add_parser("evaluate", help="replay a world and score hitrate / PVR proxy")
    e.add_argument("--world", required=True)
    e.add_argument("--config")
    e.add_argument("--report", required=True)
    e.set_defaults(func=cmd_evaluate)

    a = sub.add_parser("ablation", help="run one ablation experiment")
    a.add_argument("--name", required=True, choices=["strategy", "online_offline", "alpha_sweep"])
    a.add_argument("--spec")
    a.add_argument("--config")
    a.add_argument("--seeds", type=int, default=20)
    a.add_argument("--workers", type=int, default=1)
    a.add_argument("--report", required=True)
    a.set_defaults(func=cmd_ablation)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
