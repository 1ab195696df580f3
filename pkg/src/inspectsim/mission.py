"""Two-phase inspection workflow: point recording, snapshot capture, the
autonomous executor state machine, metrics, and mission persistence.

A mission is recorded during teleoperation (phase "human"), re-sequenced,
then flown autonomously (phase "autonomous").  The autonomous session runs
entirely in its own odometry frame, which may be displaced from the world
frame; relocalization against the anchor map estimates that displacement and
all mission targets are pulled through the estimate.  Ground truth is only
touched where physics demands it: scan synthesis, snapshot capture, and the
safety audit trail.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import kernels
from .control import build_tracking_problem, mpc_step, track_yaw_gimbal
from .kernels import NO_INFLATION
from .lidar import ScanFrame, SensorConfig, simulate_scan
from .mapping import InflatedMap, MapConfig, ProbabilityMap, attest_clear_ball
from .planning import (
    Corridor,
    GoalBlocked,
    GridPath,
    NoFreeCell,
    PlanningError,
    StartBlocked,
    Unreachable,
    astar_local,
    generate_sfc,
    nearest_no_inflation,
    nearest_reachable,
)
from .registration import (
    AnchorMap,
    RegistrationError,
    RigidTransform,
    coarse_align,
    icp_6dof,
    voxel_downsample,
)
from .sequencing import InspectionPoint
from .world import QuadLimits, QuadState, Scene, step_quad, wrap_angle

MISSION_FORMAT_VERSION = 1

SNAPSHOT_COLS = 32
SNAPSHOT_ROWS = 24
SNAPSHOT_H_FOV = math.radians(70.0)
SNAPSHOT_V_FOV = math.radians(50.0)

PHASE_HUMAN = "human"
PHASE_AUTONOMOUS = "autonomous"


class MissionError(ValueError):
    pass


@dataclass
class Mission:
    scene_id: str
    p_init: np.ndarray  # (3,)
    anchor_file: str  # sibling file name
    points: list[InspectionPoint]  # as recorded
    optimized_order: list[int] | None = None
    map_file: str | None = None  # optional coarse-map sibling
    hover_duration: float = 3.0
    abandon_limit: float = 5.0
    arrival_tolerance: float = 0.2

    def __post_init__(self):
        self.p_init = np.asarray(self.p_init, dtype=np.float64).reshape(3)

    def validate(self) -> None:
        n = len(self.points)
        if n < 1:
            raise MissionError("mission has no points")
        if self.optimized_order is not None:
            order = list(self.optimized_order)
            if sorted(order) != list(range(n)):
                raise MissionError("optimized order is not a permutation")
            if order and order[0] != 0:
                raise MissionError("optimized order must start at point 0")
        for cfg_name in ("hover_duration", "abandon_limit", "arrival_tolerance"):
            if getattr(self, cfg_name) <= 0:
                raise MissionError(f"{cfg_name} must be positive")

    def optimized_points(self) -> list[InspectionPoint]:
        if self.optimized_order is None:
            raise MissionError("mission has not been optimized")
        return [self.points[i] for i in self.optimized_order]


def _point_to_dict(p: InspectionPoint) -> dict:
    return {
        "position": [float(x) for x in p.position],
        "yaw": float(p.yaw),
        "gimbal_pitch": float(p.gimbal_pitch),
        "recorded_index": int(p.recorded_index),
    }


def _point_from_dict(d: dict) -> InspectionPoint:
    return InspectionPoint(
        position=np.asarray(d["position"], dtype=np.float64),
        yaw=float(d["yaw"]),
        gimbal_pitch=float(d["gimbal_pitch"]),
        recorded_index=int(d["recorded_index"]),
    )


def save_mission(mission: Mission, path) -> None:
    mission.validate()
    doc = {
        "format": "mission",
        "version": MISSION_FORMAT_VERSION,
        "scene_id": mission.scene_id,
        "p_init": [float(x) for x in mission.p_init],
        "anchor_file": mission.anchor_file,
        "map_file": mission.map_file,
        "points": [_point_to_dict(p) for p in mission.points],
        "optimized_order": (
            None if mission.optimized_order is None else [int(i) for i in mission.optimized_order]
        ),
        "hover_duration": mission.hover_duration,
        "abandon_limit": mission.abandon_limit,
        "arrival_tolerance": mission.arrival_tolerance,
    }
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def load_mission(path) -> Mission:
    path = Path(path)
    doc = json.loads(path.read_text())
    if doc.get("format") != "mission":
        raise MissionError("not a mission file")
    if doc.get("version") != MISSION_FORMAT_VERSION:
        raise MissionError(f"unsupported mission version {doc.get('version')}")
    mission = Mission(
        scene_id=doc["scene_id"],
        p_init=np.asarray(doc["p_init"], dtype=np.float64),
        anchor_file=doc["anchor_file"],
        points=[_point_from_dict(d) for d in doc["points"]],
        optimized_order=doc.get("optimized_order"),
        map_file=doc.get("map_file"),
        hover_duration=float(doc["hover_duration"]),
        abandon_limit=float(doc["abandon_limit"]),
        arrival_tolerance=float(doc["arrival_tolerance"]),
    )
    mission.validate()
    anchor_path = path.parent / mission.anchor_file
    if not anchor_path.exists():
        raise MissionError(f"anchor map file missing: {anchor_path}")
    if mission.map_file is not None and not (path.parent / mission.map_file).exists():
        raise MissionError(f"map snapshot file missing: {path.parent / mission.map_file}")
    return mission


class MissionRecorder:
    """Collects inspection points during the human phase."""

    def __init__(self, scene_id: str, p_init):
        self.scene_id = scene_id
        self.p_init = np.asarray(p_init, dtype=np.float64).reshape(3)
        self.points: list[InspectionPoint] = []
        self.phase = PHASE_HUMAN

    def record_point(self, state: QuadState) -> InspectionPoint:
        if self.phase != PHASE_HUMAN:
            raise MissionError("recording is only allowed during the human phase")
        for p in self.points:
            if (
                np.allclose(p.position, state.position)
                and abs(wrap_angle(p.yaw - state.yaw)) < 1e-12
                and abs(p.gimbal_pitch - state.gimbal_pitch) < 1e-12
            ):
                warnings.warn("duplicate inspection point recorded", stacklevel=2)
                break
        point = InspectionPoint(
            position=state.position.copy(),
            yaw=state.yaw,
            gimbal_pitch=state.gimbal_pitch,
            recorded_index=len(self.points),
        )
        self.points.append(point)
        return point

    def end_human_phase(self) -> None:
        self.phase = PHASE_AUTONOMOUS


@dataclass
class Snapshot:
    stamp: float
    position: np.ndarray  # (3,) camera position
    yaw: float
    gimbal_pitch: float
    point_index: int  # position in the optimized order; -1 during recording
    depths: np.ndarray  # (ROWS, COLS) float64, inf = no hit

    def to_dict(self) -> dict:
        flat = [None if not np.isfinite(d) else float(d) for d in self.depths.ravel()]
        return {
            "stamp": float(self.stamp),
            "position": [float(x) for x in self.position],
            "yaw": float(self.yaw),
            "gimbal_pitch": float(self.gimbal_pitch),
            "point_index": int(self.point_index),
            "rows": int(self.depths.shape[0]),
            "cols": int(self.depths.shape[1]),
            "depths": flat,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Snapshot":
        depths = np.array(
            [np.inf if v is None else float(v) for v in d["depths"]], dtype=np.float64
        ).reshape(d["rows"], d["cols"])
        return cls(
            stamp=float(d["stamp"]),
            position=np.asarray(d["position"], dtype=np.float64),
            yaw=float(d["yaw"]),
            gimbal_pitch=float(d["gimbal_pitch"]),
            point_index=int(d["point_index"]),
            depths=depths,
        )


def snapshot_directions(yaw: float, gimbal_pitch: float) -> np.ndarray:
    """World-frame unit rays for every cell of the depth grid, row-major."""
    cols = (np.arange(SNAPSHOT_COLS) + 0.5) / SNAPSHOT_COLS
    rows = (np.arange(SNAPSHOT_ROWS) + 0.5) / SNAPSHOT_ROWS
    az = (cols - 0.5) * SNAPSHOT_H_FOV
    el = (0.5 - rows) * SNAPSHOT_V_FOV  # top row looks up
    azg, elg = np.meshgrid(az, el)
    cam = np.stack(
        [np.cos(elg) * np.cos(azg), np.cos(elg) * np.sin(azg), np.sin(elg)], axis=-1
    ).reshape(-1, 3)
    cp, sp = math.cos(gimbal_pitch), math.sin(gimbal_pitch)
    pitch = np.array([[cp, 0.0, -sp], [0.0, 1.0, 0.0], [sp, 0.0, cp]])
    cy, sy = math.cos(yaw), math.sin(yaw)
    yawm = np.array([[cy, -sy, 0.0], [sy, cy, 0.0], [0.0, 0.0, 1.0]])
    return cam @ (yawm @ pitch).T


def capture_snapshot(
    scene: Scene,
    state: QuadState,
    point: InspectionPoint,
    point_index: int,
    max_range: float = 40.0,
    tolerance: float = 0.02,
    check_alignment: bool = True,
) -> Snapshot:
    """Frustum depth grid ray-cast from the current pose.

    The pose must agree with the point's commanded yaw and gimbal pitch to
    within the tolerance; the grid covers 70 by 50 degrees at 32 by 24 rays.
    """
    if check_alignment:
        if abs(wrap_angle(state.yaw - point.yaw)) > tolerance:
            raise MissionError("yaw not aligned with the inspection point")
        if abs(state.gimbal_pitch - point.gimbal_pitch) > tolerance:
            raise MissionError("gimbal pitch not aligned with the inspection point")
    dirs = snapshot_directions(state.yaw, state.gimbal_pitch)
    dists = kernels.ray_cast(
        state.position,
        dirs,
        scene.obstacles,
        scene.ground_height,
        True,
        max_range,
    )
    return Snapshot(
        stamp=state.time,
        position=state.position.copy(),
        yaw=state.yaw,
        gimbal_pitch=state.gimbal_pitch,
        point_index=point_index,
        depths=dists.reshape(SNAPSHOT_ROWS, SNAPSHOT_COLS),
    )


def snapshot_agreement(a: Snapshot, b: Snapshot, tol: float = 0.05) -> float:
    """Fraction of rays whose depths agree within tol (misses must match)."""
    da, db = a.depths.ravel(), b.depths.ravel()
    both_miss = ~np.isfinite(da) & ~np.isfinite(db)
    both_hit = np.isfinite(da) & np.isfinite(db)
    close = np.zeros(da.shape, dtype=bool)
    close[both_hit] = np.abs(da[both_hit] - db[both_hit]) <= tol
    return float((both_miss | close).mean())


@dataclass
class TrajectorySample:
    time: float
    position: np.ndarray
    yaw: float
    gimbal_pitch: float
    speed: float

    def to_dict(self) -> dict:
        return {
            "time": float(self.time),
            "position": [float(x) for x in self.position],
            "yaw": float(self.yaw),
            "gimbal_pitch": float(self.gimbal_pitch),
            "speed": float(self.speed),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrajectorySample":
        return cls(
            time=float(d["time"]),
            position=np.asarray(d["position"], dtype=np.float64),
            yaw=float(d["yaw"]),
            gimbal_pitch=float(d["gimbal_pitch"]),
            speed=float(d["speed"]),
        )


class MissionLog:
    """Timestamped record of one phase: samples, events, and snapshots."""

    def __init__(self, phase: str):
        if phase not in (PHASE_HUMAN, PHASE_AUTONOMOUS):
            raise MissionError(f"unknown phase {phase!r}")
        self.phase = phase
        self.samples: list[TrajectorySample] = []
        self.events: list[dict] = []
        self.snapshots: list[Snapshot] = []

    def add_sample(self, sample: TrajectorySample) -> None:
        if self.samples and sample.time <= self.samples[-1].time:
            raise MissionError("sample timestamps must strictly increase")
        self.samples.append(sample)

    def add_event(self, time: float, kind: str, **payload) -> dict:
        event = {"time": float(time), "type": kind, **payload}
        self.events.append(event)
        return event

    def events_of(self, kind: str) -> list[dict]:
        return [e for e in self.events if e["type"] == kind]

    def to_dict(self) -> dict:
        return {
            "format": "mission-log",
            "version": MISSION_FORMAT_VERSION,
            "phase": self.phase,
            "samples": [s.to_dict() for s in self.samples],
            "events": self.events,
            "snapshots": [s.to_dict() for s in self.snapshots],
        }

    def to_json(self) -> str:
        # canonical form so identical runs serialize to identical bytes
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_dict(cls, doc: dict) -> "MissionLog":
        if doc.get("format") != "mission-log":
            raise MissionError("not a mission log document")
        log = cls(doc["phase"])
        for s in doc["samples"]:
            log.add_sample(TrajectorySample.from_dict(s))
        log.events = [dict(e) for e in doc["events"]]
        log.snapshots = [Snapshot.from_dict(s) for s in doc["snapshots"]]
        return log

    def save(self, path) -> None:
        Path(path).write_text(self.to_json() + "\n")

    @classmethod
    def load(cls, path) -> "MissionLog":
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass
class Metrics:
    max_speed: float
    average_speed: float
    trajectory_length: float
    flight_time: float  # seconds

    @property
    def flight_time_text(self) -> str:
        whole = int(self.flight_time)
        return f"{whole // 60} : {whole % 60:02d}"


METRICS_COLUMNS = [
    "Inspection Mode",
    "Maximum Speed (m/s)",
    "Average Speed (m/s)",
    "Trajectory Length (m)",
    "Flight Time (min : sec)",
]


def compute_metrics(log: MissionLog) -> Metrics:
    if len(log.samples) < 2:
        raise MissionError("need at least two samples")
    pos = np.array([s.position for s in log.samples])
    length = float(np.linalg.norm(np.diff(pos, axis=0), axis=1).sum())
    t = log.samples[-1].time - log.samples[0].time
    max_speed = max(s.speed for s in log.samples)
    avg = length / t if t > 0 else 0.0
    return Metrics(
        max_speed=max_speed, average_speed=avg, trajectory_length=length, flight_time=t
    )


def metrics_table(rows: list[tuple[str, Metrics]]) -> str:
    """Fixed-column table, one row per inspection mode."""
    cells = [METRICS_COLUMNS]
    for label, m in rows:
        cells.append(
            [
                label,
                f"{m.max_speed:.2f}",
                f"{m.average_speed:.2f}",
                f"{m.trajectory_length:.2f}",
                m.flight_time_text,
            ]
        )
    widths = [max(len(row[i]) for row in cells) for i in range(len(METRICS_COLUMNS))]
    lines = []
    for r, row in enumerate(cells):
        lines.append(" | ".join(cell.ljust(widths[i]) for i, cell in enumerate(row)).rstrip())
        if r == 0:
            lines.append("-|-".join("-" * w for w in widths))
    return "\n".join(lines)


@dataclass
class ExecutorConfig:
    sim_dt: float = 0.01
    planner_period: float = 0.1
    log_period: float = 0.05
    cruise_speed: float = 1.5
    replan_interval: float = 1.0
    reloc_frames: int = 10
    reloc_residual_limit: float = 0.1
    coarse_voxel: float = 0.3
    fine_voxel: float = 0.15
    align_yaw_tol: float = 0.005
    align_gimbal_tol: float = 5e-4
    # alignment happens in the odometry frame, so the captured pose is off
    # by the registration estimate error on top of align_yaw_tol
    capture_pose_tol: float = 0.05
    astar_margin_cells: int = 25
    max_duration: float = 600.0
    failed_plan_limit: int = 10  # consecutive failures before a forced fallback
    takeoff_clearance: float = 2.0  # [m] launch volume the operator attests clear


_MODE_RELOCALIZING = "Relocalizing"
_MODE_EN_ROUTE = "EnRoute"
_MODE_FALLBACK = "Fallback"
_MODE_HOVERING = "Hovering"
_MODE_ALIGNING = "Aligning"
_MODE_CAPTURING = "Capturing"
_MODE_RETURNING = "Returning"
_MODE_LANDED = "Landed"


class _OdomFrame:
    """Rigid offset between the session's odometry frame and the world."""

    def __init__(self, offset: RigidTransform):
        self.offset = offset
        self._inv = offset.inverse()

    def state_to_odom(self, true_state: QuadState) -> QuadState:
        return QuadState(
            position=self._inv.apply(true_state.position[None, :])[0],
            velocity=self._inv.rotation @ true_state.velocity,
            yaw=wrap_angle(true_state.yaw - self.offset.yaw_angle()),
            gimbal_pitch=true_state.gimbal_pitch,
            time=true_state.time,
        )

    def accel_to_world(self, accel_odom: np.ndarray) -> np.ndarray:
        return self.offset.rotation @ accel_odom

    def scan_to_odom(self, frame: ScanFrame, odom_state: QuadState) -> ScanFrame:
        returns = self._inv.apply(frame.returns) if frame.returns.size else frame.returns
        misses = frame.misses @ self._inv.rotation.T if frame.misses.size else frame.misses
        return ScanFrame(
            stamp=frame.stamp,
            sensor_position=odom_state.position.copy(),
            sensor_yaw=odom_state.yaw,
            returns=returns,
            misses=misses,
        )


class AutonomousExecutor:
    """Tick-driven state machine flying an optimized mission.

    Construct, then call tick() until done (or use run_autonomous).  All
    planning state is in the odometry frame; `mission` targets are converted
    once relocalization fixes the frame estimate.
    """

    def __init__(
        self,
        mission: Mission,
        scene: Scene,
        anchor: AnchorMap,
        sensor_config: SensorConfig | None = None,
        map_config: MapConfig | None = None,
        limits: QuadLimits | None = None,
        config: ExecutorConfig | None = None,
        odom_offset: RigidTransform | None = None,
        start_state: QuadState | None = None,
    ):
        mission.validate()
        if mission.optimized_order is None:
            raise MissionError("mission must be optimized before autonomous flight")
        self.mission = mission
        self.scene = scene
        self.anchor = anchor
        self.sensor_config = sensor_config or SensorConfig()
        self.map_config = map_config or MapConfig()
        self.limits = limits or QuadLimits()
        self.cfg = config or ExecutorConfig()
        self.frame = _OdomFrame(odom_offset or RigidTransform.identity())

        self.true_state = start_state.copy() if start_state else QuadState(
            position=mission.p_init.copy()
        )
        odom0 = self.frame.state_to_odom(self.true_state)
        self.prob = ProbabilityMap(self.map_config, center=odom0.position)
        self.inflated = InflatedMap(self.prob)
        self.log = MissionLog(PHASE_AUTONOMOUS)

        self.mode = _MODE_RELOCALIZING
        self.estimate: RigidTransform | None = None
        self.targets: list[InspectionPoint] = mission.optimized_points()
        self.point_idx = 0
        self.done = False

        self._tick = 0
        self._ticks_per_scan = max(1, round(1.0 / (self.sensor_config.frame_rate * self.cfg.sim_dt)))
        self._ticks_per_plan = max(1, round(self.cfg.planner_period / self.cfg.sim_dt))
        self._ticks_per_log = max(1, round(self.cfg.log_period / self.cfg.sim_dt))
        self._frame_index = 0
        self._reloc_buffer: list[ScanFrame] = []
        self._accel_odom = np.zeros(3)
        self._yaw_rate = 0.0
        self._gimbal_rate = 0.0
        self._corridor: Corridor | None = None
        self._corridor_time = -np.inf
        self.mpc_audit: list | None = None  # optional (problem, solution) sink for tests
        self._plan_goal: np.ndarray | None = None
        self._fallback_event_fired = False
        self._fallback_goal: np.ndarray | None = None
        self._fallback_hover_start: float | None = None
        self._failed_plans = 0
        self._mode_entered = 0.0
        self._hover_point: np.ndarray | None = None
        self._align_target: tuple[float, float] | None = None
        self._returning = False

    # ------------------------------------------------------------------ helpers

    def _odom(self) -> QuadState:
        return self.frame.state_to_odom(self.true_state)

    def _now(self) -> float:
        return self.true_state.time

    def _target_odom(self, point: InspectionPoint) -> np.ndarray:
        assert self.estimate is not None
        return self.estimate.inverse().apply(point.position[None, :])[0]

    def _target_yaw_odom(self, point: InspectionPoint) -> float:
        assert self.estimate is not None
        return wrap_angle(point.yaw - self.estimate.yaw_angle())

    def _enter(self, mode: str) -> None:
        self.mode = mode
        self._mode_entered = self._now()

    def _current_target(self) -> InspectionPoint:
        if self._returning:
            return self.targets[0]
        return self.targets[self.point_idx]

    def _reset_point_state(self) -> None:
        self._corridor = None
        self._plan_goal = None
        self._fallback_event_fired = False
        self._fallback_goal = None
        self._fallback_hover_start = None
        self._failed_plans = 0

    def _advance_point(self) -> None:
        self.point_idx += 1
        self._reset_point_state()
        if self.point_idx >= len(self.targets):
            self._returning = True
            self._enter(_MODE_RETURNING)
        else:
            self._enter(_MODE_EN_ROUTE)

    # ------------------------------------------------------------------ sensing

    def _integrate_scan(self) -> None:
        odom = self._odom()
        true_frame = simulate_scan(
            self.scene, self.true_state, self.sensor_config, self._frame_index
        )
        self._frame_index += 1
        frame = self.frame.scan_to_odom(true_frame, odom)
        if self.mode == _MODE_RELOCALIZING:
            self._reloc_buffer.append(frame)
        slide = self.prob.slide_to(odom.position)
        if len(slide.left) + len(slide.entered) > 0:
            self.inflated.apply_slide(slide)
        batch = self.prob.integrate_scan(frame)
        self.inflated.apply_deltas(batch)
        if self._deltas_touch_corridor(batch):
            self._corridor = None  # force replan
        # the body itself proves its footprint free; without this the
        # never-scanned cells under a hover point inflate over the vehicle
        carve = self.prob.observe_free_ball(
            odom.position, self.prob.config.inflation_radius
        )
        if len(carve):
            self.inflated.apply_deltas(carve)

    def _deltas_touch_corridor(self, batch) -> bool:
        if self._corridor is None or len(batch) == 0:
            return False
        cells = batch.cells
        for box in self._corridor.boxes:
            inside = np.all(
                (cells >= box.cell_lo[None, :]) & (cells <= box.cell_hi[None, :]), axis=1
            )
            if np.any(inside & (batch.new != kernels.KNOWN_FREE)):
                return True
        return False

    # ------------------------------------------------------------------ planning

    def _relocalize(self) -> None:
        pts = np.concatenate([f.returns for f in self._reloc_buffer if f.returns.size])
        coarse_src = voxel_downsample(pts, self.cfg.coarse_voxel)
        fine_src = voxel_downsample(pts, self.cfg.fine_voxel)
        try:
            init = coarse_align(coarse_src, self.anchor)
            result = icp_6dof(fine_src, self.anchor, init)
        except RegistrationError as exc:
            self.log.add_event(self._now(), "relocalization_failed", reason=str(exc))
            self._enter(_MODE_LANDED)
            self.log.add_event(self._now(), "landed", in_place=True)
            self.done = True
            return
        if result.error > self.cfg.reloc_residual_limit:
            self.log.add_event(
                self._now(), "relocalization_failed", residual=result.error
            )
            self._enter(_MODE_LANDED)
            self.log.add_event(self._now(), "landed", in_place=True)
            self.done = True
            return
        self.estimate = result.transform
        self.log.add_event(
            self._now(),
            "relocalized",
            residual=result.error,
            yaw=self.estimate.yaw_angle(),
            translation=[float(x) for x in self.estimate.translation],
        )
        # flight engages from the volume the operator verified before arming;
        # the static-hover sensing shadow would otherwise seal the start cell
        self.inflated.apply_deltas(
            attest_clear_ball(
                self.prob, self._odom().position, self.cfg.takeoff_clearance
            )
        )
        self._enter(_MODE_EN_ROUTE)

    def _plan(self, odom: QuadState) -> None:
        """(Re)build goal, path, and corridor toward the current target."""
        point = self._current_target()
        goal = self._target_odom(point)
        goal_cell = self.prob.cell_of(goal)
        substituted = False
        if self.prob.in_window(goal_cell) and self.inflated.class_of(goal_cell) != NO_INFLATION:
            try:
                goal = nearest_reachable(self.inflated, odom.position, goal)
            except (NoFreeCell, PlanningError):
                goal = odom.position.copy()
            substituted = True
        try:
            path = astar_local(
                self.inflated, odom.position, goal, margin_cells=self.cfg.astar_margin_cells
            )
            corridor = generate_sfc(path, self.prob)
        except StartBlocked:
            # vehicle sits in an inflated cell; plan from free space but
            # keep the corridor anchored to the cell the body occupies,
            # otherwise no box contains the vehicle and the tracker starves
            try:
                free_start = nearest_no_inflation(self.inflated, odom.position)
                path = astar_local(
                    self.inflated, free_start, goal, margin_cells=self.cfg.astar_margin_cells
                )
                path = self._anchor_path(path, odom.position)
                corridor = generate_sfc(path, self.prob)
            except PlanningError:
                self._note_plan_failure(odom)
                return
        except (GoalBlocked, Unreachable, PlanningError):
            self._note_plan_failure(odom)
            return
        self._corridor = corridor
        self._corridor_time = self._now()
        self._plan_goal = goal
        if substituted:
            self._activate_fallback(goal)
        else:
            self._clear_fallback()

    def _anchor_path(self, path: GridPath, position: np.ndarray) -> GridPath:
        cell = self.prob.cell_of(position)
        if np.array_equal(cell, path.cells[0]):
            return path
        point = self.prob.center_of(cell)
        return GridPath(
            cells=np.concatenate([cell[None, :], path.cells]),
            points=np.concatenate([point[None, :], path.points]),
            length=path.length + float(np.linalg.norm(point - path.points[0])),
        )

    def _note_plan_failure(self, odom: QuadState) -> None:
        self._corridor = None
        self._failed_plans += 1
        if self._failed_plans >= self.cfg.failed_plan_limit:
            self._activate_fallback(odom.position.copy())

    def _activate_fallback(self, goal: np.ndarray) -> None:
        """Fly toward a stand-in goal; the event waits until we arrive there.

        A goal whose cell is merely unobserved so far clears up during the
        approach, in which case nothing is logged and the original target is
        resumed; the fallback only becomes fact when the vehicle reaches the
        substitute while the real goal is still blocked.
        """
        self._fallback_goal = goal
        if self.mode != _MODE_FALLBACK:
            self._enter(_MODE_FALLBACK)

    def _clear_fallback(self) -> None:
        if self._fallback_goal is None:
            return
        self._fallback_goal = None
        self._fallback_hover_start = None
        if self.mode == _MODE_FALLBACK:
            self._enter(_MODE_RETURNING if self._returning else _MODE_EN_ROUTE)

    def _check_abandon(self, odom: QuadState) -> bool:
        if self._fallback_goal is None:
            return False
        near = np.linalg.norm(odom.position - self._fallback_goal) <= self.mission.arrival_tolerance
        if near and not self._fallback_event_fired:
            self._fallback_event_fired = True
            point = self._current_target()
            self.log.add_event(
                self._now(),
                "fallback",
                point=(None if self._returning else self.point_idx),
                recorded_index=point.recorded_index,
                substitute=[float(x) for x in self._fallback_goal],
            )
        if near and self._fallback_hover_start is None:
            self._fallback_hover_start = self._now()
        if (
            self._fallback_hover_start is not None
            and self._now() - self._fallback_hover_start > self.mission.abandon_limit
        ):
            point = self._current_target()
            if self._returning:
                self.log.add_event(self._now(), "landed", in_place=True)
                self._enter(_MODE_LANDED)
                self.done = True
            else:
                self.log.add_event(
                    self._now(),
                    "point_abandoned",
                    point=self.point_idx,
                    recorded_index=point.recorded_index,
                )
                self._advance_point()
            return True
        return False

    def _fly(self, odom: QuadState) -> None:
        """EnRoute / Fallback / Returning flight logic at the planner rate."""
        point = self._current_target()
        target = self._target_odom(point)
        if np.linalg.norm(odom.position - target) <= self.mission.arrival_tolerance:
            if self._returning:
                self.log.add_event(self._now(), "landed", in_place=False)
                self._enter(_MODE_LANDED)
                self.done = True
            else:
                # dwell on the point itself, not the arrival position; the
                # revisit camera must repeat the recorded pose, and the
                # arrival sphere alone leaves it arrival_tolerance off
                self._hover_point = target.copy()
                self._enter(_MODE_HOVERING)
                self._accel_odom = np.zeros(3)
            return
        if self._check_abandon(odom):
            return
        stale = self._now() - self._corridor_time >= self.cfg.replan_interval
        if self._corridor is None or stale:
            self._plan(odom)
        if self._corridor is None:
            self._accel_odom = self._braking(odom)
            return
        problem = build_tracking_problem(
            self._corridor,
            odom.position,
            odom.velocity,
            cruise_speed=self.cfg.cruise_speed,
            v_max_axis=self.limits.v_max / math.sqrt(3.0),
            a_max=self.limits.a_max,
            substeps=self._ticks_per_plan,
            dt=self.cfg.planner_period,
        )
        solution = mpc_step(problem)
        if self.mpc_audit is not None:
            self.mpc_audit.append((problem, solution))
        if solution.feasible:
            self._failed_plans = 0
        else:
            # an unusable command counts against the same limit as a failed
            # plan, or a permanently infeasible tracker would stall forever
            self._note_plan_failure(odom)
        self._accel_odom = solution.command
        # yaw follows the direction of travel while flying
        to_goal = target - odom.position
        if np.linalg.norm(to_goal[:2]) > 0.3:
            desired = math.atan2(to_goal[1], to_goal[0])
            self._yaw_rate, self._gimbal_rate = track_yaw_gimbal(
                odom.yaw,
                odom.gimbal_pitch,
                desired,
                odom.gimbal_pitch,
                self.limits.yaw_rate_max,
                self.limits.gimbal_rate_max,
                self.cfg.planner_period,
            )
        else:
            self._yaw_rate = 0.0
            self._gimbal_rate = 0.0

    def _braking(self, odom: QuadState) -> np.ndarray:
        speed = float(np.linalg.norm(odom.velocity))
        if speed < 1e-9:
            return np.zeros(3)
        return -min(self.limits.a_max, 3.0 * speed) * odom.velocity / speed

    def _hold(self, odom: QuadState, anchor_point: np.ndarray) -> None:
        # deterministic PD hold; arrival speeds are small so no clamps engage
        accel = -4.0 * (odom.position - anchor_point) - 3.0 * odom.velocity
        self._accel_odom = np.clip(accel, -self.limits.a_max, self.limits.a_max)

    # ------------------------------------------------------------------ main loop

    def _planner_step(self) -> None:
        odom = self._odom()
        if self.mode == _MODE_RELOCALIZING:
            self._accel_odom = np.zeros(3)
            self._yaw_rate = 0.0
            self._gimbal_rate = 0.0
            if len(self._reloc_buffer) >= self.cfg.reloc_frames:
                self._relocalize()
            return
        if self.mode in (_MODE_EN_ROUTE, _MODE_FALLBACK, _MODE_RETURNING):
            self._fly(odom)
            return
        if self.mode == _MODE_HOVERING:
            self._hold(odom, self._hover_point)
            self._yaw_rate = 0.0
            self._gimbal_rate = 0.0
            if self._now() - self._mode_entered >= self.mission.hover_duration:
                point = self._current_target()
                self._align_target = (self._target_yaw_odom(point), point.gimbal_pitch)
                self._enter(_MODE_ALIGNING)
            return
        if self.mode == _MODE_ALIGNING:
            self._hold(odom, self._hover_point)
            yaw_t, pitch_t = self._align_target
            self._yaw_rate, self._gimbal_rate = track_yaw_gimbal(
                odom.yaw,
                odom.gimbal_pitch,
                yaw_t,
                pitch_t,
                self.limits.yaw_rate_max,
                self.limits.gimbal_rate_max,
                self.cfg.planner_period,
            )
            if (
                abs(wrap_angle(odom.yaw - yaw_t)) <= self.cfg.align_yaw_tol
                and abs(odom.gimbal_pitch - pitch_t) <= self.cfg.align_gimbal_tol
            ):
                self._enter(_MODE_CAPTURING)
            return
        if self.mode == _MODE_CAPTURING:
            self._hold(odom, self._hover_point)
            self._yaw_rate = 0.0
            self._gimbal_rate = 0.0
            point = self._current_target()
            snap = capture_snapshot(
                self.scene,
                self.true_state,
                point,
                self.point_idx,
                tolerance=self.cfg.capture_pose_tol,
            )
            self.log.snapshots.append(snap)
            self.log.add_event(
                self._now(),
                "point_reached",
                point=self.point_idx,
                recorded_index=point.recorded_index,
            )
            self._advance_point()
            return

    def tick(self) -> None:
        """Advance one simulation step (sensing, planning, dynamics, log)."""
        if self.done:
            return
        if self._tick % self._ticks_per_scan == 0:
            self._integrate_scan()
        if self._tick % self._ticks_per_plan == 0:
            self._planner_step()
        accel_world = self.frame.accel_to_world(self._accel_odom)
        self.true_state = step_quad(
            self.true_state,
            accel_world,
            self._yaw_rate,
            self._gimbal_rate,
            self.cfg.sim_dt,
            self.limits,
        )
        self._tick += 1
        if self._tick % self._ticks_per_log == 0:
            s = self.true_state
            self.log.add_sample(
                TrajectorySample(
                    time=s.time,
                    position=s.position.copy(),
                    yaw=s.yaw,
                    gimbal_pitch=s.gimbal_pitch,
                    speed=float(np.linalg.norm(s.velocity)),
                )
            )
        if self.true_state.time > self.cfg.max_duration and not self.done:
            self.log.add_event(self._now(), "timeout")
            self._enter(_MODE_LANDED)
            self.done = True

    def run(self) -> MissionLog:
        while not self.done:
            self.tick()
        return self.log


def run_autonomous(
    mission: Mission,
    scene: Scene,
    anchor: AnchorMap,
    sensor_config: SensorConfig | None = None,
    map_config: MapConfig | None = None,
    limits: QuadLimits | None = None,
    config: ExecutorConfig | None = None,
    odom_offset: RigidTransform | None = None,
) -> MissionLog:
    """Fly the optimized mission and return its log."""
    executor = AutonomousExecutor(
        mission,
        scene,
        anchor,
        sensor_config=sensor_config,
        map_config=map_config,
        limits=limits,
        config=config,
        odom_offset=odom_offset,
    )
    return executor.run()
