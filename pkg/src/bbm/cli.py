"""``bbm`` command line: run the service, simulate, compare runs, talk to a server."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .protocol import decode_reply


def _load_json(path: str) -> dict:
    return json.loads(Path(path).read_text())


def cmd_serve(args: argparse.Namespace) -> int:
    import uvicorn

    from .service import create_app, load_service_config

    config = load_service_config(args.config)
    uvicorn.run(create_app(config), host=config.host, port=config.port, log_level=args.log_level)
    return 0


def cmd_origin(args: argparse.Namespace) -> int:
    import uvicorn

    from .service import create_origin_app
    from .service.origin_app import load_objects

    host, _, port = args.listen.rpartition(":")
    uvicorn.run(create_origin_app(load_objects(args.dir)), host=host or "127.0.0.1", port=int(port))
    return 0


def cmd_simulate(args: argparse.Namespace) -> int:
    from .sim.harness import ConfigInvalid, Simulation, dump_report, load_config

    raw = _load_json(args.config)
    if isinstance(raw.get("catalog"), str):
        raw["catalog"] = _load_json(str(Path(args.config).parent / raw["catalog"]))
    if args.no_cache:
        raw["cache_enabled"] = False
    if args.cache_dir:
        raw["cache_dir"] = args.cache_dir
    if args.seed is not None:
        raw["seed"] = args.seed
    try:
        config = load_config(raw)
    except ConfigInvalid as exc:
        for err in exc.errors:
            print(f"config error: {err}", file=sys.stderr)
        return 2
    log_fh = open(args.log, "w", encoding="utf-8", newline="\n") if args.log else None
    try:
        report = Simulation(config, log_stream=log_fh, keep_events=True).run()
    finally:
        if log_fh is not None:
            log_fh.close()
    text = dump_report(report)
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return 0


def cmd_compare(args: argparse.Namespace) -> int:
    from .sim.config import SimReport
    from .sim.harness import MismatchedConfigs, compare_runs

    a = SimReport.model_validate(_load_json(args.a))
    b = SimReport.model_validate(_load_json(args.b))
    try:
        table = compare_runs(a, b)
    except MismatchedConfigs as exc:
        print(f"cannot compare: {exc}", file=sys.stderr)
        return 2
    if args.json:
        print(json.dumps(table, indent=2))
        return 0
    print(f"origin bytes saved by caching: {table['origin_bytes_saved']}")
    print(f"{'metric':<28}{'a':>16}{'b':>16}{'delta':>16}")
    for row in table["rows"]:
        print(f"{row['metric']:<28}{_fmt(row['a']):>16}{_fmt(row['b']):>16}{_fmt(row['delta']):>16}")
    return 0


def _fmt(v) -> str:
    if v is None:
        return "-"
    return f"{v:.4f}" if isinstance(v, float) else str(v)


def cmd_gen_catalog(args: argparse.Namespace) -> int:
    from .sim.harness import gen_catalog

    print(json.dumps(gen_catalog(args.videos, args.seed), indent=2))
    return 0


def cmd_export(args: argparse.Namespace) -> int:
    from .media import encode_container, synthetic_asset
    from .sim.config import VideoSpec

    out = Path(args.dir)
    out.mkdir(parents=True, exist_ok=True)
    for vid, raw in _load_json(args.catalog).items():
        v = VideoSpec.model_validate(raw)
        asset = synthetic_asset(vid, v.width, v.height, v.fps, v.frame_count, v.codec_id, args.seed)
        (out / f"{vid}.bbmv").write_bytes(encode_container(asset))
    return 0


def cmd_play(args: argparse.Namespace) -> int:
    import httpx

    body = {"video_id": args.video_id, "profile_id": args.profile}
    with httpx.Client(base_url=args.server, timeout=None) as client:
        r = client.post("/play", json=body)
    if r.status_code != 200:
        print(f"{r.status_code} {r.text}", file=sys.stderr)
        return 1
    reply = decode_reply(r.content)
    if not reply.ok:
        print(reply.status, file=sys.stderr)
        return 1
    if args.out:
        Path(args.out).write_bytes(reply.payload)
    print(f"STREAM {reply.video_id} {reply.variant} {len(reply.payload)}/{reply.total_bytes} bytes "
          f"in {len(reply.segments)} segments{'' if reply.terminated else ' (truncated)'}")
    return 0 if reply.terminated else 1


def cmd_stats(args: argparse.Namespace) -> int:
    import httpx

    r = httpx.get(f"{args.server.rstrip('/')}/stats")
    r.raise_for_status()
    print(json.dumps(r.json(), indent=2))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bbm", description="mobile video caching gateway")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("serve", help="run the gateway service")
    p.add_argument("--config", required=True, help="key=value service config file")
    p.add_argument("--log-level", default="info")
    p.set_defaults(func=cmd_serve)

    p = sub.add_parser("origin", help="run an HTTP origin node over a directory of .bbmv files")
    p.add_argument("--dir", required=True)
    p.add_argument("--listen", default="127.0.0.1:8801")
    p.set_defaults(func=cmd_origin)

    p = sub.add_parser("simulate", help="run a deterministic simulation")
    p.add_argument("--config", required=True, help="JSON simulation config")
    p.add_argument("--out", help="report JSON path (default stdout)")
    p.add_argument("--log", help="event log path (newline-delimited JSON)")
    p.add_argument("--no-cache", action="store_true", help="baseline run with caching disabled")
    p.add_argument("--cache-dir", help="persist the cache here between runs")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("compare", help="compare two simulation reports")
    p.add_argument("a")
    p.add_argument("b")
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("gen-catalog", help="print a random video catalog as JSON")
    p.add_argument("--videos", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gen_catalog)

    p = sub.add_parser("export", help="write a catalog's synthetic videos as .bbmv files")
    p.add_argument("--catalog", required=True, help="catalog JSON (as printed by gen-catalog)")
    p.add_argument("--dir", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_export)

    p = sub.add_parser("play", help="request a video from a running gateway")
    p.add_argument("video_id")
    p.add_argument("--profile", default="qcif15")
    p.add_argument("--server", default="http://127.0.0.1:8700")
    p.add_argument("--out", help="write the received container here")
    p.set_defaults(func=cmd_play)

    p = sub.add_parser("stats", help="print a running gateway's metrics")
    p.add_argument("--server", default="http://127.0.0.1:8700")
    p.set_defaults(func=cmd_stats)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
