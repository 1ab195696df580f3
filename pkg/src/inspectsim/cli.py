"""Command-line surface for the simulator.

Subcommands mirror the workflow: serve a live session, run the piloted
phase headless from a script, optimize a recorded mission, replay the
autonomous phase, and print metrics tables from logs.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import replace
from pathlib import Path

from .gateway import (
    ScriptedPilot,
    SessionConfig,
    load_script,
    run_scripted,
    sample_odom_offset,
    serve,
)
from .mapping import GlobalMap
from .mission import (
    AutonomousExecutor,
    MissionLog,
    compute_metrics,
    load_mission,
    metrics_table,
    save_mission,
)
from .registration import load_anchor, save_anchor
from .sequencing import optimize_points
from .world import load_scene

MISSION_FILE = "mission.json"
ANCHOR_FILE = "anchor.bin"
GLOBAL_MAP_FILE = "global_map.bin"
HUMAN_LOG_FILE = "human_log.json"


def _session_config(args) -> SessionConfig:
    return SessionConfig(
        scene_path=args.scene,
        tick_rate=args.tick_rate,
        seed=args.seed,
    )


def cmd_serve(args) -> int:
    config = _session_config(args)
    config.metrics_out = args.out
    pilot = ScriptedPilot(load_script(args.script)) if args.script else None
    serve(config, pilot=pilot)
    return 0


def cmd_run_scripted(args) -> int:
    scene = load_scene(args.scene)
    waypoints = load_script(args.script)
    config = _session_config(args)
    result = run_scripted(scene, waypoints, config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_anchor(result.anchor, out / ANCHOR_FILE)
    result.gmap.export_snapshot(out / GLOBAL_MAP_FILE)
    mission = replace(result.mission, anchor_file=ANCHOR_FILE, map_file=GLOBAL_MAP_FILE)
    save_mission(mission, out / MISSION_FILE)
    result.human_log.save(out / HUMAN_LOG_FILE)
    m = compute_metrics(result.human_log)
    print(f"recorded {len(mission.points)} points in {m.flight_time:.1f} s")
    print(f"wrote {out / MISSION_FILE}")
    return 0


def cmd_optimize(args) -> int:
    mission = load_mission(args.mission)
    if mission.map_file is None:
        print("error: mission has no coarse map; re-run the piloted phase", file=sys.stderr)
        return 1
    gmap = GlobalMap.from_snapshot(Path(args.mission).parent / mission.map_file)
    result = optimize_points(mission.points, gmap)
    optimized = replace(mission, optimized_order=list(result.tour.order))
    save_mission(optimized, args.out)
    print(f"recorded cost  {result.recorded_cost:.3f}")
    print(f"optimized cost {result.optimized_cost:.3f}")
    print(f"reduction      {result.reduction_percent:.1f}%")
    if result.unreachable_points:
        print(f"unreachable points: {result.unreachable_points}")
    print(f"wrote {args.out}")
    return 0


def cmd_replay(args) -> int:
    scene = load_scene(args.scene)
    mission = load_mission(args.mission)
    anchor = load_anchor(Path(args.mission).parent / mission.anchor_file)
    executor = AutonomousExecutor(
        mission, scene, anchor, odom_offset=sample_odom_offset(args.seed)
    )
    log = executor.run()
    if args.out:
        log.save(args.out)
        print(f"wrote {args.out}")
    print(metrics_table([("Autonomous", compute_metrics(log))]))
    return 0


def cmd_metrics(args) -> int:
    rows = []
    for path in args.logs:
        log = MissionLog.load(path)
        rows.append((log.phase.capitalize(), compute_metrics(log)))
    print(metrics_table(rows))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="inspectsim",
        description="Quadrotor inspection simulator: record, optimize, replay.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("serve", help="run a live session behind the protocol endpoint")
    p.add_argument("--scene", required=True, help="scene file")
    p.add_argument("--script", help="optional pilot script driving the whole workflow")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tick-rate", type=float, default=100.0)
    p.add_argument("--out", help="metrics table output path")
    p.set_defaults(func=cmd_serve)

    p = sub.add_parser("run-scripted", help="headless piloted phase from a script")
    p.add_argument("--scene", required=True)
    p.add_argument("--script", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tick-rate", type=float, default=100.0)
    p.add_argument("--out", required=True, help="output directory for mission artifacts")
    p.set_defaults(func=cmd_run_scripted)

    p = sub.add_parser("optimize", help="re-sequence a recorded mission")
    p.add_argument("--mission", required=True, help="mission file from run-scripted")
    p.add_argument("--out", required=True, help="optimized mission output path")
    p.set_defaults(func=cmd_optimize)

    p = sub.add_parser("replay", help="headless autonomous phase from an optimized mission")
    p.add_argument("--scene", required=True)
    p.add_argument("--mission", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="trajectory log output path")
    p.set_defaults(func=cmd_replay)

    p = sub.add_parser("metrics", help="print the metrics table for one or more logs")
    p.add_argument("logs", nargs="+", help="trajectory log files")
    p.set_defaults(func=cmd_metrics)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except KeyboardInterrupt:
        return 130
    except Exception as exc:  # surfaced module invariants become diagnostics
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
