"""Deterministic quadrotor inspection simulator.

Two-phase workflow: a pilot (human or scripted) flies the vehicle and
records inspection points, the tour is re-sequenced over the explored map,
and an autonomous pass relocalizes against the recorded anchor and revisits
every point.
"""

from .gateway import (
    FullRunResult,
    LiveSession,
    ScriptedPilot,
    ScriptWaypoint,
    SessionConfig,
    TeleopSession,
    load_script,
    run_full_session,
    run_scripted,
    sample_odom_offset,
    save_script,
    serve,
)
from .lidar import ScanFrame, SensorConfig, simulate_scan
from .mapping import GlobalMap, InflatedMap, MapConfig, ProbabilityMap, update_global
from .mission import (
    AutonomousExecutor,
    ExecutorConfig,
    Metrics,
    Mission,
    MissionLog,
    Snapshot,
    capture_snapshot,
    compute_metrics,
    load_mission,
    metrics_table,
    run_autonomous,
    save_mission,
)
from .registration import (
    AnchorMap,
    RigidTransform,
    accumulate_anchor,
    coarse_align,
    icp_6dof,
    load_anchor,
    save_anchor,
)
from .sequencing import (
    InspectionPoint,
    OptimizationResult,
    build_distance_matrix,
    held_karp,
    optimize_points,
    tour_cost,
)
from .world import (
    QuadLimits,
    QuadState,
    Scene,
    load_scene,
    save_scene,
    step_quad,
)

__version__ = "0.1.0"

__all__ = [
    "AnchorMap",
    "AutonomousExecutor",
    "ExecutorConfig",
    "FullRunResult",
    "GlobalMap",
    "InflatedMap",
    "InspectionPoint",
    "LiveSession",
    "MapConfig",
    "Metrics",
    "Mission",
    "MissionLog",
    "OptimizationResult",
    "ProbabilityMap",
    "QuadLimits",
    "QuadState",
    "RigidTransform",
    "ScanFrame",
    "Scene",
    "ScriptWaypoint",
    "ScriptedPilot",
    "SensorConfig",
    "SessionConfig",
    "Snapshot",
    "TeleopSession",
    "accumulate_anchor",
    "build_distance_matrix",
    "capture_snapshot",
    "coarse_align",
    "compute_metrics",
    "held_karp",
    "icp_6dof",
    "load_anchor",
    "load_mission",
    "load_scene",
    "load_script",
    "metrics_table",
    "optimize_points",
    "run_autonomous",
    "run_full_session",
    "run_scripted",
    "sample_odom_offset",
    "save_anchor",
    "save_mission",
    "save_scene",
    "save_script",
    "serve",
    "simulate_scan",
    "step_quad",
    "tour_cost",
    "update_global",
]
