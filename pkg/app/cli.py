"""
Command-line entry point: `python -m app.cli <command> ...`

Exit status: 0 success, 1 ingest found validation issues, 2 runtime error,
64 usage error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import NoReturn, Optional, Sequence

from app.core.config import load_settings
from app.core.errors import TestbedError
from app.core.file_utils import write_text_atomic
from app.services.formats import (
    LaneRefModel,
    LidarSpec,
    load_scenario,
    ndt_map_to_json,
    network_to_json,
    route_from_csv,
    route_to_csv,
)
from app.services.guidance import route_from_lane_path
from app.services.map_ingest import ingest_osm
from pipeline.speed_analyzer import SpeedTracker


logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_ISSUES = 1
EXIT_ERROR = 2
EXIT_USAGE = 64


class _Parser(argparse.ArgumentParser):
    def error(self, message: str) -> NoReturn:
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def parse_lane_ref(text: str) -> LaneRefModel:
    """`SEGMENT[:DIRECTION[:LANE[:FROM[:TO]]]]`, e.g. `12:-1:0:0:80`."""
    parts = text.split(":")
    if not 1 <= len(parts) <= 5:
        raise argparse.ArgumentTypeError(f"bad lane reference {text!r}")
    try:
        fields: dict[str, object] = {"segment": int(parts[0])}
        if len(parts) > 1 and parts[1]:
            fields["direction"] = int(parts[1])
        if len(parts) > 2 and parts[2]:
            fields["lane"] = int(parts[2])
        if len(parts) > 3 and parts[3]:
            fields["s_from"] = float(parts[3])
        if len(parts) > 4 and parts[4]:
            fields["s_to"] = float(parts[4])
        return LaneRefModel(**fields)
    except ValueError as e:
        raise argparse.ArgumentTypeError(f"bad lane reference {text!r}: {e}") from e


def _cmd_ingest(args: argparse.Namespace) -> int:
    net, issues = ingest_osm(Path(args.osm).read_bytes(), strict=not args.lenient)
    out = Path(args.output)
    write_text_atomic(out, network_to_json(net))
    logger.info("Network written to %s (%d segments)", out, len(net.segments))
    for issue in issues:
        print(f"{issue.kind}\t{issue.subject_id}\t{issue.message}")
    return EXIT_ISSUES if issues else EXIT_OK


def _cmd_record_route(args: argparse.Namespace) -> int:
    from app.services.scenario_maps import lane_route_path, load_map

    settings = load_settings()
    bundle = load_map(args.network, lane_width=settings.lane_width)
    path = lane_route_path(bundle.world, args.lane)
    route = route_from_lane_path(path, args.speed, cyclic=args.cyclic, dt=settings.dt)
    out = Path(args.output)
    write_text_atomic(out, route_to_csv(route))
    logger.info("Route written to %s (%d waypoints, %.1f m)", out, len(route.waypoints), route.length)
    return EXIT_OK


def _cmd_build_map(args: argparse.Namespace) -> int:
    from app.services.scenario_harness import build_route_ndt_map, lidar_config
    from app.services.scenario_maps import load_map

    settings = load_settings()
    bundle = load_map(args.network, lane_width=settings.lane_width)
    route = route_from_csv(Path(args.route).read_text(encoding="utf-8"))
    ndt = build_route_ndt_map(
        bundle.world, route, lidar_config(LidarSpec()),
        cell_size=args.cell_size or settings.ndt_cell_size, spacing=args.spacing,
    )
    out = Path(args.output)
    write_text_atomic(out, ndt_map_to_json(ndt))
    return EXIT_OK


def _cmd_run(args: argparse.Namespace) -> int:
    from app.services.scenario_harness import run_scenario

    spec = load_scenario(args.scenario)
    tracker = SpeedTracker() if args.timing else None
    outcome = run_scenario(
        spec, settings=load_settings(), base_dir=Path(args.scenario).parent, out_dir=Path(args.output),
        tracker=tracker,
    )
    if tracker is not None:
        tracker.save(args.timing)
        print(tracker.summary(spec.dt))
    print(outcome.to_json(), end="")
    return EXIT_OK


def _cmd_replay(args: argparse.Namespace) -> int:
    from app.services.trace import replay

    report = replay(args.trace)
    print(json.dumps({"hash_ok": report.hash_ok, "metrics_ok": report.metrics_ok, "metrics": report.metrics},
                     sort_keys=True, indent=2))
    return EXIT_OK if report.ok else EXIT_ERROR


def _cmd_serve(args: argparse.Namespace) -> int:
    from app.services.bridge import serve_scenario

    settings = load_settings()
    spec = load_scenario(args.scenario)
    outcome = serve_scenario(
        spec,
        host=args.host or settings.bridge_host,
        port=settings.bridge_port if args.port is None else args.port,
        settings=settings,
        base_dir=Path(args.scenario).parent,
        out_dir=Path(args.output) if args.output else None,
    )
    print(outcome.to_json(), end="")
    return EXIT_ERROR if outcome.aborted == "protocol_error" else EXIT_OK


def _cmd_client(args: argparse.Namespace) -> int:
    from app.services.bridge import run_guidance_client

    settings = load_settings()
    sent = run_guidance_client(
        args.host or settings.bridge_host,
        settings.bridge_port if args.port is None else args.port,
        settings=settings,
        base_dir=Path(args.base_dir) if args.base_dir else None,
    )
    print(f"{sent} commands sent")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="testbed", description="Autonomous shuttle simulation testbed")
    parser.add_argument("--log-level", default=None, help="overrides TESTBED_LOG_LEVEL")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("ingest", help="parse, build and validate an OSM extract")
    p.add_argument("osm")
    p.add_argument("-o", "--output", required=True)
    p.add_argument("--lenient", action="store_true", help="drop dangling way references instead of failing")
    p.set_defaults(func=_cmd_ingest)

    p = sub.add_parser("record-route", help="drive a lane path and record the route CSV")
    p.add_argument("network", help="network JSON, OSM file or built-in map name")
    p.add_argument("-o", "--output", required=True)
    p.add_argument("--lane", type=parse_lane_ref, action="append", required=True,
                   help="SEGMENT[:DIRECTION[:LANE[:FROM[:TO]]]], repeat to chain lanes")
    p.add_argument("--speed", type=float, default=5.0)
    p.add_argument("--cyclic", action="store_true")
    p.set_defaults(func=_cmd_record_route)

    p = sub.add_parser("build-map", help="scan the static world along a route and build the NDT map")
    p.add_argument("network")
    p.add_argument("route")
    p.add_argument("-o", "--output", required=True)
    p.add_argument("--cell-size", type=float, default=None)
    p.add_argument("--spacing", type=float, default=2.0)
    p.set_defaults(func=_cmd_build_map)

    p = sub.add_parser("run", help="run a scenario with the in-process ego stack")
    p.add_argument("scenario")
    p.add_argument("-o", "--output", required=True)
    p.add_argument("--timing", default=None, help="write per-stage loop timing CSV here")
    p.set_defaults(func=_cmd_run)

    p = sub.add_parser("replay", help="re-derive metrics from a trace and verify its hash")
    p.add_argument("trace")
    p.set_defaults(func=_cmd_replay)

    p = sub.add_parser("serve", help="run a scenario in lockstep with one external controller")
    p.add_argument("scenario")
    p.add_argument("--port", type=int, default=None)
    p.add_argument("--host", default=None)
    p.add_argument("-o", "--output", default=None)
    p.set_defaults(func=_cmd_serve)

    p = sub.add_parser("client", help="drive a served scenario with the guidance chain")
    p.add_argument("--port", type=int, default=None)
    p.add_argument("--host", default=None)
    p.add_argument("--base-dir", default=None, help="directory scenario-relative files resolve against")
    p.set_defaults(func=_cmd_client)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        level = args.log_level or load_settings().log_level
    except RuntimeError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_ERROR
    logging.basicConfig(level=level.upper(), format='%(asctime)s - %(levelname)s - %(message)s')
    try:
        return args.func(args)
    except (TestbedError, OSError, RuntimeError) as e:
        logger.error("%s failed: %s", args.command, e)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
