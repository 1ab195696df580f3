"""Session orchestration and the wire surface of the simulator.

One fixed-timestep owner advances sensing, planning, control, and dynamics
for both workflow phases (piloted recording, then autonomous execution).
Clients speak a small JSON message protocol over a websocket; headless runs
drive the same loop with a scripted pilot and never touch the network.
"""

from __future__ import annotations

import json
import math
import os
import threading
import time
from collections import deque
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .control import build_tracking_problem, mpc_step
from .kernels import NO_INFLATION
from .lidar import ScanFrame, SensorConfig, simulate_scan
from .mapping import (
    DeltaBatch,
    GlobalMap,
    InflatedMap,
    MapConfig,
    ProbabilityMap,
    attest_clear_ball,
    update_global,
)
from .mission import (
    METRICS_COLUMNS,
    PHASE_AUTONOMOUS,
    PHASE_HUMAN,
    AutonomousExecutor,
    ExecutorConfig,
    Metrics,
    Mission,
    MissionError,
    MissionLog,
    TrajectorySample,
    capture_snapshot,
    compute_metrics,
    load_mission,
    metrics_table,
)
from .planning import (
    GridPath,
    JoystickCommand,
    PlanningError,
    StartBlocked,
    Unreachable,
    astar_local,
    compute_local_goal,
    generate_sfc,
    nearest_no_inflation,
    nearest_reachable,
)
from .registration import (
    AnchorMap,
    RigidTransform,
    accumulate_anchor,
    load_anchor,
)
from .sequencing import InspectionPoint, OptimizationResult, optimize_points
from .world import QuadLimits, QuadState, Scene, load_scene, step_quad, wrap_angle

DEFAULT_ENDPOINT = "127.0.0.1:8765"
ENDPOINT_ENV = "INSPECTSIM_ENDPOINT"

PHASE_OPTIMIZED = "optimized"
PHASE_DONE = "done"

CLIENT_MESSAGE_TYPES = frozenset(
    {"joystick", "record", "set_phase", "start_autonomous", "load_mission"}
)


class ProtocolError(ValueError):
    pass


class GatewayError(RuntimeError):
    pass


@dataclass
class SessionConfig:
    """Everything one simulated session needs, file paths included."""

    scene_path: str
    sensor: SensorConfig = field(default_factory=SensorConfig)
    map: MapConfig = field(default_factory=MapConfig)
    limits: QuadLimits = field(default_factory=QuadLimits)
    tick_rate: float = 100.0
    seed: int = 0
    metrics_out: str | None = None
    start_position: np.ndarray | None = None
    anchor_duration: float = 5.0
    goal_horizon: float = 6.0  # [m] full stick deflection maps to this distance
    takeoff_clearance: float = 2.0  # [m] launch volume the operator attests clear

    def validate(self) -> None:
        if self.tick_rate <= 0:
            raise ValueError("tick_rate must be positive")
        ratio = self.tick_rate / self.sensor.frame_rate
        if abs(ratio - round(ratio)) > 1e-9:
            raise ValueError("tick_rate must be an integer multiple of the sensor frame rate")
        if self.anchor_duration <= 0 or self.goal_horizon <= 0:
            raise ValueError("anchor_duration and goal_horizon must be positive")
        if self.takeoff_clearance < 0:
            raise ValueError("takeoff_clearance cannot be negative")

    @property
    def sim_dt(self) -> float:
        return 1.0 / self.tick_rate


def sample_odom_offset(seed: int) -> RigidTransform:
    """Session-to-session odometry drift: fresh yaw and a bounded shift."""
    rng = np.random.default_rng(seed)
    yaw = rng.uniform(-math.pi, math.pi)
    t = np.array(
        [rng.uniform(-1.0, 1.0), rng.uniform(-1.0, 1.0), rng.uniform(-0.2, 0.2)]
    )
    return RigidTransform.from_yaw(yaw, t)


# ---------------------------------------------------------------------------
# scripted pilot


@dataclass
class ScriptWaypoint:
    position: np.ndarray
    yaw: float = 0.0
    gimbal_pitch: float = 0.0
    record: bool = False
    hold: float = 0.0  # [s] dwell after reaching the pose

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=np.float64).reshape(3)


def load_script(path) -> list[ScriptWaypoint]:
    doc = json.loads(Path(path).read_text())
    if not isinstance(doc, dict) or doc.get("format") != "pilot-script":
        raise ValueError("not a pilot script document")
    return [
        ScriptWaypoint(
            position=np.asarray(w["position"], dtype=np.float64),
            yaw=float(w.get("yaw", 0.0)),
            gimbal_pitch=float(w.get("gimbal_pitch", 0.0)),
            record=bool(w.get("record", False)),
            hold=float(w.get("hold", 0.0)),
        )
        for w in doc["waypoints"]
    ]


def save_script(waypoints: list[ScriptWaypoint], path) -> None:
    doc = {
        "format": "pilot-script",
        "waypoints": [
            {
                "position": [float(x) for x in w.position],
                "yaw": float(w.yaw),
                "gimbal_pitch": float(w.gimbal_pitch),
                "record": bool(w.record),
                "hold": float(w.hold),
            }
            for w in waypoints
        ],
    }
    Path(path).write_text(json.dumps(doc, indent=2) + "\n")


class ScriptedPilot:
    """Deterministic stand-in for the human pilot.

    Axes push proportionally toward the active waypoint, a full deflection
    standing for goal_horizon metres of local goal; waypoints flagged record
    press the button exactly once after the pose has been held.  done flips
    after the last waypoint, which ends the piloted phase.
    """

    def __init__(
        self,
        waypoints: list[ScriptWaypoint],
        goal_horizon: float = 6.0,
        pos_tol: float = 0.15,
        yaw_tol: float = 0.05,
        pitch_tol: float = 0.02,
        gain: float = 2.0,
    ):
        if not waypoints:
            raise ValueError("script needs at least one waypoint")
        self.waypoints = waypoints
        self.horizon = goal_horizon
        self.pos_tol = pos_tol
        self.yaw_tol = yaw_tol
        self.pitch_tol = pitch_tol
        self.gain = gain
        self.index = 0
        self.done = False
        self._dwell_since: float | None = None

    def command(self, state: QuadState) -> JoystickCommand:
        if self.done:
            return JoystickCommand()
        wp = self.waypoints[self.index]
        err = wp.position - state.position
        cy, sy = math.cos(state.yaw), math.sin(state.yaw)
        body = np.array(
            [cy * err[0] + sy * err[1], -sy * err[0] + cy * err[1], err[2]]
        )
        axes = np.zeros(4)
        axes[:3] = np.clip(self.gain * body / self.horizon, -1.0, 1.0)
        yaw_err = wrap_angle(wp.yaw - state.yaw)
        axes[3] = float(np.clip(2.0 * yaw_err, -1.0, 1.0))
        gimbal = float(np.clip(2.0 * (wp.gimbal_pitch - state.gimbal_pitch), -1.0, 1.0))
        record = False
        at_pose = (
            float(np.linalg.norm(err)) <= self.pos_tol
            and abs(yaw_err) <= self.yaw_tol
            and abs(wp.gimbal_pitch - state.gimbal_pitch) <= self.pitch_tol
        )
        if at_pose:
            if self._dwell_since is None:
                self._dwell_since = state.time
            if state.time - self._dwell_since >= wp.hold:
                record = wp.record
                self.index += 1
                self._dwell_since = None
                if self.index >= len(self.waypoints):
                    self.done = True
        else:
            self._dwell_since = None
        return JoystickCommand(axes=axes, gimbal_axis=gimbal, record_pressed=record)


# ---------------------------------------------------------------------------
# human-phase session loop


class TeleopSession:
    """Tick-driven piloted flight: record points, build the anchor and maps.

    The pilot only supplies coarse stick deflections; every motion goes
    through grid search, corridor generation, and the tracking controller,
    so a command into an obstacle produces a detour or a hold, never contact.
    """

    def __init__(
        self,
        scene: Scene,
        start_position,
        sensor_config: SensorConfig | None = None,
        map_config: MapConfig | None = None,
        limits: QuadLimits | None = None,
        sim_dt: float = 0.01,
        anchor_duration: float = 5.0,
        goal_horizon: float = 6.0,
        planner_period: float = 0.1,
        log_period: float = 0.05,
        cruise_speed: float = 1.5,
        astar_margin_cells: int = 25,
        takeoff_clearance: float = 2.0,
    ):
        self.scene = scene
        self.sensor_config = sensor_config or SensorConfig()
        self.map_config = map_config or MapConfig()
        self.limits = limits or QuadLimits()
        self.sim_dt = sim_dt
        self.anchor_duration = anchor_duration
        self.goal_horizon = goal_horizon
        self.planner_period = planner_period
        self.cruise_speed = cruise_speed
        self.astar_margin_cells = astar_margin_cells
        self.takeoff_clearance = takeoff_clearance

        self.state = QuadState(position=np.asarray(start_position, dtype=np.float64).copy())
        self.p_init = self.state.position.copy()
        self.prob = ProbabilityMap(self.map_config, center=self.state.position)
        self.inflated = InflatedMap(self.prob)
        self.gmap = GlobalMap(center=self.state.position)
        self.log = MissionLog(PHASE_HUMAN)
        self.points: list[InspectionPoint] = []
        self.anchor_frames: list[ScanFrame] = []
        self.delta_sink: list[DeltaBatch] | None = None  # protocol hook
        self.mpc_audit: list | None = None  # optional (problem, solution) sink for tests

        self._tick = 0
        self._frame_index = 0
        self._ticks_per_scan = max(1, round(1.0 / (self.sensor_config.frame_rate * sim_dt)))
        self._ticks_per_plan = max(1, round(planner_period / sim_dt))
        self._ticks_per_log = max(1, round(log_period / sim_dt))
        self._ticks_per_global = max(1, round(1.0 / sim_dt))
        self._accel = np.zeros(3)
        self._yaw_rate = 0.0
        self._gimbal_rate = 0.0
        self._hold_point: np.ndarray | None = self.state.position.copy()
        self._moved = False
        self._attested = False

    # ------------------------------------------------------------------ sensing

    def _integrate_scan(self) -> None:
        frame = simulate_scan(self.scene, self.state, self.sensor_config, self._frame_index)
        self._frame_index += 1
        if not self._moved and self.state.time <= self.anchor_duration + 1e-9:
            self.anchor_frames.append(frame)
        slide = self.prob.slide_to(self.state.position)
        if len(slide.left) + len(slide.entered) > 0:
            self.inflated.apply_slide(slide)
        batch = self.prob.integrate_scan(frame)
        self.inflated.apply_deltas(batch)
        if self.delta_sink is not None and len(batch):
            self.delta_sink.append(batch)
        # the body itself proves its footprint free; without this the
        # never-scanned cells under a hover point inflate over the vehicle
        carve = self.prob.observe_free_ball(
            self.state.position, self.map_config.inflation_radius
        )
        if len(carve):
            self.inflated.apply_deltas(carve)
            if self.delta_sink is not None:
                self.delta_sink.append(carve)

    # ------------------------------------------------------------------ control

    def _hold(self) -> None:
        if self._hold_point is None:
            self._hold_point = self.state.position.copy()
        delta = self.state.position - self._hold_point
        accel = -4.0 * delta - 3.0 * self.state.velocity
        self._accel = np.clip(accel, -self.limits.a_max, self.limits.a_max)

    def _anchor_path(self, path: GridPath) -> GridPath:
        # keep the corridor anchored to the cell the body occupies so the
        # first box always contains the vehicle (same trick as the executor)
        cell = self.prob.cell_of(self.state.position)
        if np.array_equal(cell, path.cells[0]):
            return path
        center = self.prob.center_of(cell)
        return GridPath(
            cells=np.concatenate([cell[None, :], path.cells]),
            points=np.concatenate([center[None, :], path.points]),
            length=path.length + float(np.linalg.norm(center - path.points[0])),
        )

    def _plan_corridor(self, goal):
        """Grid path plus corridor, start anchored to the cell the body occupies."""
        try:
            path = astar_local(
                self.inflated, self.state.position, goal, margin_cells=self.astar_margin_cells
            )
        except StartBlocked:
            free_start = nearest_no_inflation(self.inflated, self.state.position)
            path = astar_local(
                self.inflated, free_start, goal, margin_cells=self.astar_margin_cells
            )
            path = self._anchor_path(path)
        return generate_sfc(path, self.prob)

    def _steer(self, cmd: JoystickCommand) -> None:
        goal, _ = compute_local_goal(
            cmd, self.state, self.goal_horizon, self.limits.yaw_rate_max, self.planner_period
        )
        # the window is vehicle-centred; a hard stick can aim past its edge,
        # where no grid query can answer, so cap the reach of one step
        offset = goal - self.state.position
        reach = float(np.max(np.abs(offset)))
        limit = 0.5 * self.map_config.window_extent - 3.0 * self.prob.res
        if reach > limit > 0.0:
            goal = self.state.position + offset * (limit / reach)
        goal_cell = self.prob.cell_of(goal)
        if self.prob.in_window(goal_cell) and self.inflated.class_of(goal_cell) != NO_INFLATION:
            # a stick held into an obstacle retargets to the closest
            # traversable cell instead of refusing outright
            try:
                goal = nearest_no_inflation(self.inflated, goal)
            except PlanningError:
                self._hold()
                return
        try:
            corridor = self._plan_corridor(goal)
        except Unreachable:
            # the stick can point past free space not yet connected to the
            # vehicle (fresh obstacle, sensing shadow); creep toward the
            # closest connected cell instead of freezing
            try:
                goal = nearest_reachable(self.inflated, self.state.position, goal)
                if np.linalg.norm(goal - self.state.position) < self.prob.res:
                    self._hold()
                    return
                corridor = self._plan_corridor(goal)
            except PlanningError:
                self._hold()
                return
        except PlanningError:
            self._hold()
            return
        problem = build_tracking_problem(
            corridor,
            self.state.position,
            self.state.velocity,
            cruise_speed=self.cruise_speed,
            v_max_axis=self.limits.v_max / math.sqrt(3.0),
            a_max=self.limits.a_max,
            substeps=self._ticks_per_plan,
            dt=self.planner_period,
        )
        solution = mpc_step(problem)
        if self.mpc_audit is not None:
            self.mpc_audit.append((problem, solution))
        self._accel = solution.command

    def _planner_step(self, cmd: JoystickCommand) -> None:
        cmd = cmd.clamped()
        self._yaw_rate = float(cmd.axes[3]) * self.limits.yaw_rate_max
        self._gimbal_rate = cmd.gimbal_axis * self.limits.gimbal_rate_max
        if float(np.max(np.abs(cmd.axes[:3]))) < 0.02:
            self._hold()
        else:
            self._hold_point = None
            self._moved = True
            self._steer(cmd)
        if cmd.record_pressed:
            self._record_point()

    def _record_point(self) -> None:
        point = InspectionPoint(
            position=self.state.position.copy(),
            yaw=self.state.yaw,
            gimbal_pitch=self.state.gimbal_pitch,
            recorded_index=len(self.points),
        )
        self.points.append(point)
        snap = capture_snapshot(self.scene, self.state, point, point_index=-1)
        self.log.snapshots.append(snap)
        self.log.add_event(
            self.state.time,
            "point_recorded",
            recorded_index=point.recorded_index,
            position=[float(x) for x in point.position],
            yaw=float(point.yaw),
            gimbal_pitch=float(point.gimbal_pitch),
        )

    # ------------------------------------------------------------------ loop

    def _takeoff_attest(self) -> None:
        # assisted flight engages only once the operator has verified the
        # launch volume; without this the cells the sensor geometry can
        # never observe from a static hover seal the vehicle in place
        self._attested = True
        batch = attest_clear_ball(self.prob, self.state.position, self.takeoff_clearance)
        if len(batch):
            self.inflated.apply_deltas(batch)
            if self.delta_sink is not None:
                self.delta_sink.append(batch)

    def tick(self, cmd: JoystickCommand) -> None:
        if self._tick % self._ticks_per_scan == 0:
            self._integrate_scan()
        if self._tick % self._ticks_per_plan == 0:
            if not self._attested and self.state.time + 1e-9 >= self.anchor_duration:
                self._takeoff_attest()
            self._planner_step(cmd)
        if self._tick % self._ticks_per_global == 0:
            update_global(self.gmap, self.prob)
        self.state = step_quad(
            self.state, self._accel, self._yaw_rate, self._gimbal_rate, self.sim_dt, self.limits
        )
        self._tick += 1
        if self._tick % self._ticks_per_log == 0:
            self.log.add_sample(
                TrajectorySample(
                    time=self.state.time,
                    position=self.state.position.copy(),
                    yaw=self.state.yaw,
                    gimbal_pitch=self.state.gimbal_pitch,
                    speed=float(np.linalg.norm(self.state.velocity)),
                )
            )

    @property
    def is_planner_tick(self) -> bool:
        return self._tick % self._ticks_per_plan == 0

    # ------------------------------------------------------------------ products

    def build_anchor(self) -> AnchorMap:
        if not self.anchor_frames:
            raise GatewayError("no stationary frames collected for the anchor")
        duration = (len(self.anchor_frames) - 1) / self.sensor_config.frame_rate
        return accumulate_anchor(self.anchor_frames, duration=duration)

    def build_mission(self, anchor_file: str, map_file: str | None = None) -> Mission:
        if not self.points:
            raise GatewayError("no inspection points recorded")
        update_global(self.gmap, self.prob)
        mission = Mission(
            scene_id=self.scene.scene_id,
            p_init=self.p_init.copy(),
            anchor_file=anchor_file,
            points=list(self.points),
            map_file=map_file,
        )
        mission.validate()
        return mission


# ---------------------------------------------------------------------------
# headless drivers


@dataclass
class ScriptedRunResult:
    mission: Mission
    anchor: AnchorMap
    gmap: GlobalMap
    human_log: MissionLog
    session: TeleopSession


def run_scripted(
    scene: Scene,
    waypoints: list[ScriptWaypoint],
    config: SessionConfig,
    max_duration: float = 600.0,
) -> ScriptedRunResult:
    """Drive the piloted phase with the scripted pilot until the script ends.

    The vehicle first settles in place for anchor_duration so the anchor
    map accumulates from stationary frames, then the pilot takes over.
    """
    config.validate()
    start = (
        np.asarray(config.start_position, dtype=np.float64)
        if config.start_position is not None
        else waypoints[0].position
    )
    session = TeleopSession(
        scene,
        start,
        sensor_config=config.sensor,
        map_config=config.map,
        limits=config.limits,
        sim_dt=config.sim_dt,
        anchor_duration=config.anchor_duration,
        goal_horizon=config.goal_horizon,
        takeoff_clearance=config.takeoff_clearance,
    )
    blank = JoystickCommand()
    for _ in range(int(round(config.anchor_duration / config.sim_dt))):
        session.tick(blank)
    pilot = ScriptedPilot(waypoints, goal_horizon=config.goal_horizon)
    cmd = blank
    while not pilot.done and session.state.time < max_duration:
        if session.is_planner_tick:
            cmd = pilot.command(session.state)
        session.tick(cmd)
    anchor = session.build_anchor()
    mission = session.build_mission(anchor_file="anchor.bin")
    return ScriptedRunResult(
        mission=mission,
        anchor=anchor,
        gmap=session.gmap,
        human_log=session.log,
        session=session,
    )


@dataclass
class FullRunResult:
    mission: Mission
    optimization: OptimizationResult
    human_log: MissionLog
    autonomous_log: MissionLog
    odom_offset: RigidTransform


def run_full_session(
    scene: Scene,
    waypoints: list[ScriptWaypoint],
    config: SessionConfig,
    executor_config: ExecutorConfig | None = None,
) -> FullRunResult:
    """Both phases back to back: record, optimize, then fly autonomously."""
    scripted = run_scripted(scene, waypoints, config)
    result = optimize_points(scripted.mission.points, scripted.gmap)
    mission = replace(scripted.mission, optimized_order=list(result.tour.order))
    mission.validate()
    if executor_config is None:
        executor_config = ExecutorConfig(takeoff_clearance=config.takeoff_clearance)
    offset = sample_odom_offset(config.seed)
    executor = AutonomousExecutor(
        mission,
        scene,
        scripted.anchor,
        sensor_config=config.sensor,
        map_config=config.map,
        limits=config.limits,
        config=executor_config,
        odom_offset=offset,
    )
    auto_log = executor.run()
    return FullRunResult(
        mission=mission,
        optimization=result,
        human_log=scripted.human_log,
        autonomous_log=auto_log,
        odom_offset=offset,
    )


def session_metrics_rows(
    human_log: MissionLog | None, autonomous_log: MissionLog | None
) -> list[tuple[str, Metrics]]:
    rows = []
    if human_log is not None and len(human_log.samples) >= 2:
        rows.append(("Human", compute_metrics(human_log)))
    if autonomous_log is not None and len(autonomous_log.samples) >= 2:
        rows.append(("Autonomous", compute_metrics(autonomous_log)))
    return rows


# ---------------------------------------------------------------------------
# protocol encoding


def encode_message(kind: str, payload: dict) -> str:
    return json.dumps({"type": kind, **payload}, sort_keys=True, separators=(",", ":"))


def decode_client_message(raw) -> dict:
    """Validate one inbound document; raises ProtocolError with a reason."""
    try:
        doc = json.loads(raw)
    except (TypeError, ValueError) as exc:
        raise ProtocolError(f"not valid JSON: {exc}") from exc
    if not isinstance(doc, dict) or not isinstance(doc.get("type"), str):
        raise ProtocolError("message must be an object with a string 'type'")
    kind = doc["type"]
    if kind not in CLIENT_MESSAGE_TYPES:
        raise ProtocolError(f"unknown message type {kind!r}")
    if kind == "joystick":
        axes = doc.get("axes")
        if not isinstance(axes, list) or len(axes) != 4:
            raise ProtocolError("joystick needs 'axes' with 4 numbers")
        try:
            doc["axes"] = [float(a) for a in axes]
            doc["gimbal"] = float(doc.get("gimbal", 0.0))
        except (TypeError, ValueError) as exc:
            raise ProtocolError("joystick axes must be numeric") from exc
        doc["record"] = bool(doc.get("record", False))
    elif kind == "set_phase":
        if not isinstance(doc.get("phase"), str):
            raise ProtocolError("set_phase needs a string 'phase'")
    elif kind == "load_mission":
        if not isinstance(doc.get("path"), str):
            raise ProtocolError("load_mission needs a string 'path'")
    return doc


def _state_payload(state: QuadState, phase: str, mode: str | None) -> dict:
    return {
        "time": float(state.time),
        "position": [float(x) for x in state.position],
        "velocity": [float(v) for v in state.velocity],
        "yaw": float(state.yaw),
        "gimbal_pitch": float(state.gimbal_pitch),
        "speed": float(np.linalg.norm(state.velocity)),
        "phase": phase,
        "mode": mode,
    }


def _points_payload(points: list[InspectionPoint], order: list[int] | None) -> dict:
    return {
        "points": [
            {
                "recorded_index": p.recorded_index,
                "position": [float(x) for x in p.position],
                "yaw": float(p.yaw),
                "gimbal_pitch": float(p.gimbal_pitch),
            }
            for p in points
        ],
        "order": list(order) if order is not None else None,
    }


def _metrics_payload(rows: list[tuple[str, Metrics]]) -> dict:
    return {
        "columns": list(METRICS_COLUMNS),
        "rows": [
            [
                label,
                f"{m.max_speed:.2f}",
                f"{m.average_speed:.2f}",
                f"{m.trajectory_length:.2f}",
                m.flight_time_text,
            ]
            for label, m in rows
        ],
    }


# ---------------------------------------------------------------------------
# fan-out to clients


class _ClientChannel:
    """Per-client outbox: latest-wins slots plus a reliable queue."""

    def __init__(self):
        self.cond = threading.Condition()
        self.latest: dict[str, str] = {}
        self.reliable: deque[str] = deque()
        self.closed = False

    def push(self, kind: str, encoded: str, latest: bool) -> None:
        with self.cond:
            if self.closed:
                return
            if latest:
                self.latest[kind] = encoded  # a slow reader just skips frames
            else:
                self.reliable.append(encoded)
            self.cond.notify()

    def drain(self, timeout: float) -> list[str]:
        with self.cond:
            if not self.latest and not self.reliable:
                self.cond.wait(timeout)
            out = list(self.reliable)
            self.reliable.clear()
            out.extend(self.latest.values())
            self.latest.clear()
            return out

    def close(self) -> None:
        with self.cond:
            self.closed = True
            self.cond.notify()


class _Broadcast:
    LATEST_KINDS = ("state", "map_delta")

    def __init__(self):
        self._lock = threading.Lock()
        self._clients: list[_ClientChannel] = []

    def register(self) -> _ClientChannel:
        ch = _ClientChannel()
        with self._lock:
            self._clients.append(ch)
        return ch

    def unregister(self, ch: _ClientChannel) -> None:
        with self._lock:
            if ch in self._clients:
                self._clients.remove(ch)

    def publish(self, kind: str, encoded: str) -> None:
        with self._lock:
            clients = list(self._clients)
        for ch in clients:
            ch.push(kind, encoded, latest=kind in self.LATEST_KINDS)


# ---------------------------------------------------------------------------
# live session behind the protocol


class LiveSession:
    """Protocol-facing wrapper around the two-phase workflow.

    The owner thread calls tick() at the configured rate; client messages
    arrive on network threads and are folded in at tick boundaries through
    mailboxes, so simulation state is only ever touched by its owner.  An
    optional scripted pilot drives the whole workflow with no client.
    """

    def __init__(
        self,
        config: SessionConfig,
        scene: Scene | None = None,
        pilot: ScriptedPilot | None = None,
    ):
        config.validate()
        self.config = config
        self.scene = scene if scene is not None else load_scene(config.scene_path)
        start = (
            np.asarray(config.start_position, dtype=np.float64)
            if config.start_position is not None
            else np.array([0.0, 0.0, 0.6])
        )
        self.phase = PHASE_HUMAN
        self.pilot = pilot
        self.teleop = TeleopSession(
            self.scene,
            start,
            sensor_config=config.sensor,
            map_config=config.map,
            limits=config.limits,
            sim_dt=config.sim_dt,
            anchor_duration=config.anchor_duration,
            goal_horizon=config.goal_horizon,
            takeoff_clearance=config.takeoff_clearance,
        )
        self._deltas: list[DeltaBatch] = []
        self.teleop.delta_sink = self._deltas
        self.executor: AutonomousExecutor | None = None
        self.mission: Mission | None = None
        self.anchor: AnchorMap | None = None
        self.optimization: OptimizationResult | None = None
        self.broadcast = _Broadcast()

        self._lock = threading.Lock()
        self._joystick = JoystickCommand()
        self._record_pending = False
        self._control_queue: deque[dict] = deque()
        self._tick = 0
        self._settle_ticks = int(round(config.anchor_duration / config.sim_dt))
        self._ticks_per_state = max(1, round(config.tick_rate / 20.0))
        self._ticks_per_map = max(1, round(config.tick_rate / 5.0))
        self._events_sent = 0
        self._snapshots_sent = 0
        self._log_for_stream: MissionLog | None = self.teleop.log

    # -------------------------------------------------------- network threads

    def submit(self, raw) -> str | None:
        """Decode and enqueue one client message; returns an error reply or None."""
        try:
            doc = decode_client_message(raw)
        except ProtocolError as exc:
            return encode_message("error", {"message": str(exc)})
        kind = doc["type"]
        with self._lock:
            if kind == "joystick":
                self._joystick = JoystickCommand(
                    axes=np.asarray(doc["axes"], dtype=np.float64),
                    gimbal_axis=doc["gimbal"],
                )
                if doc["record"]:
                    self._record_pending = True
            elif kind == "record":
                self._record_pending = True
            else:
                self._control_queue.append(doc)
        return None

    # ------------------------------------------------------------ owner thread

    def _emit(self, kind: str, payload: dict) -> None:
        self.broadcast.publish(kind, encode_message(kind, payload))

    def _emit_error(self, message: str) -> None:
        self._emit("event", {"time": self._now(), "event": "error", "message": message})

    def _now(self) -> float:
        if self.executor is not None and self.phase in (PHASE_AUTONOMOUS, PHASE_DONE):
            return float(self.executor.true_state.time)
        return float(self.teleop.state.time)

    def _current_state(self) -> tuple[QuadState, str | None]:
        if self.executor is not None and self.phase in (PHASE_AUTONOMOUS, PHASE_DONE):
            return self.executor.true_state, self.executor.mode
        return self.teleop.state, None

    def _handle_control(self, doc: dict) -> None:
        kind = doc["type"]
        try:
            if kind == "set_phase":
                self._set_phase(doc["phase"])
            elif kind == "start_autonomous":
                self._start_autonomous(int(doc.get("seed", self.config.seed)))
            elif kind == "load_mission":
                self._load_mission(doc["path"])
        except (GatewayError, MissionError, PlanningError, ValueError, OSError) as exc:
            self._emit_error(str(exc))

    def _set_phase(self, phase: str) -> None:
        if phase not in ("optimize", PHASE_OPTIMIZED):
            raise GatewayError(f"cannot switch to phase {phase!r}")
        if self.phase != PHASE_HUMAN:
            raise GatewayError("optimize is only legal at the end of the piloted phase")
        mission = self.teleop.build_mission(anchor_file="anchor.bin")
        self.anchor = self.teleop.build_anchor()
        self.optimization = optimize_points(mission.points, self.teleop.gmap)
        self.mission = replace(mission, optimized_order=list(self.optimization.tour.order))
        self.phase = PHASE_OPTIMIZED
        self._emit(
            "event",
            {
                "time": self._now(),
                "event": "optimized",
                "recorded_cost": self.optimization.recorded_cost,
                "optimized_cost": self.optimization.optimized_cost,
                "reduction_percent": self.optimization.reduction_percent,
            },
        )
        self._emit("points", _points_payload(self.mission.points, self.mission.optimized_order))
        rows = session_metrics_rows(self.teleop.log, None)
        if rows:
            self._emit("metrics", _metrics_payload(rows))

    def _start_autonomous(self, seed: int) -> None:
        if self.phase != PHASE_OPTIMIZED or self.mission is None or self.anchor is None:
            raise GatewayError("start_autonomous requires an optimized mission")
        self.executor = AutonomousExecutor(
            self.mission,
            self.scene,
            self.anchor,
            sensor_config=self.config.sensor,
            map_config=self.config.map,
            limits=self.config.limits,
            config=ExecutorConfig(takeoff_clearance=self.config.takeoff_clearance),
            odom_offset=sample_odom_offset(seed),
        )
        self.phase = PHASE_AUTONOMOUS
        self._events_sent = 0
        self._snapshots_sent = 0
        self._log_for_stream = self.executor.log
        self._emit("event", {"time": self._now(), "event": "autonomous_started", "seed": seed})

    def _load_mission(self, path: str) -> None:
        if self.phase != PHASE_HUMAN:
            raise GatewayError("load_mission is only legal before optimization")
        mission = load_mission(path)
        if mission.optimized_order is None:
            raise GatewayError("mission file has no optimized order")
        self.mission = mission
        self.anchor = load_anchor(Path(path).parent / mission.anchor_file)
        self.phase = PHASE_OPTIMIZED
        self._emit("points", _points_payload(mission.points, mission.optimized_order))
        self._emit("event", {"time": self._now(), "event": "mission_loaded", "path": path})

    def _flush_stream_extras(self) -> None:
        log = self._log_for_stream
        if log is None:
            return
        while self._events_sent < len(log.events):
            entry = log.events[self._events_sent]
            # log entries keep their kind under "type"; on the wire that key
            # is the envelope's, so the kind moves to "event"
            payload = {k: v for k, v in entry.items() if k != "type"}
            payload["event"] = entry["type"]
            self._emit("event", payload)
            self._events_sent += 1
        while self._snapshots_sent < len(log.snapshots):
            self._emit("snapshot", log.snapshots[self._snapshots_sent].to_dict())
            self._snapshots_sent += 1

    def _flush_map_delta(self) -> None:
        if not self._deltas:
            return
        merged: dict[tuple[int, int, int], int] = {}
        for batch in self._deltas:
            for cell, new in zip(batch.cells, batch.new):
                merged[(int(cell[0]), int(cell[1]), int(cell[2]))] = int(new)
        self._deltas.clear()
        cells = [[x, y, z, cls] for (x, y, z), cls in sorted(merged.items())]
        self._emit("map_delta", {"resolution": self.config.map.resolution, "cells": cells})

    def _human_tick(self) -> None:
        with self._lock:
            cmd = self._joystick
            record = self._record_pending and self.teleop.is_planner_tick
            if record:
                self._record_pending = False
        settled = self._tick >= self._settle_ticks
        if self.pilot is not None and settled and self.teleop.is_planner_tick:
            cmd = self.pilot.command(self.teleop.state)
            record = record or cmd.record_pressed
        self.teleop.tick(
            JoystickCommand(
                axes=np.asarray(cmd.axes, dtype=np.float64).copy(),
                gimbal_axis=cmd.gimbal_axis,
                record_pressed=record,
            )
        )
        if self.pilot is not None and self.pilot.done and self.teleop.points:
            # scripted workflow advances through the phases on its own
            self._handle_control({"type": "set_phase", "phase": PHASE_OPTIMIZED})
            if self.phase == PHASE_OPTIMIZED:
                self._handle_control({"type": "start_autonomous"})

    def _autonomous_tick(self) -> None:
        assert self.executor is not None
        if not self.executor.done:
            self.executor.tick()
        if self.executor.done and self.phase == PHASE_AUTONOMOUS:
            self.phase = PHASE_DONE
            rows = session_metrics_rows(self.teleop.log, self.executor.log)
            if rows:
                self._emit("metrics", _metrics_payload(rows))
            if self.config.metrics_out:
                Path(self.config.metrics_out).write_text(metrics_table(rows) + "\n")

    def tick(self) -> None:
        with self._lock:
            controls = list(self._control_queue)
            self._control_queue.clear()
        for doc in controls:
            self._handle_control(doc)
        if self.phase == PHASE_HUMAN:
            self._human_tick()
        elif self.phase == PHASE_AUTONOMOUS:
            self._autonomous_tick()
        self._tick += 1
        self._flush_stream_extras()
        if self._tick % self._ticks_per_state == 0:
            state, mode = self._current_state()
            self._emit("state", _state_payload(state, self.phase, mode))
        if self._tick % self._ticks_per_map == 0:
            self._flush_map_delta()


# ---------------------------------------------------------------------------
# network endpoint


def resolve_endpoint(host: str | None = None, port: int | None = None) -> tuple[str, int]:
    endpoint = os.environ.get(ENDPOINT_ENV, "") or DEFAULT_ENDPOINT
    env_host, _, env_port = endpoint.rpartition(":")
    return host or env_host or "127.0.0.1", port if port is not None else int(env_port)


def serve(
    config: SessionConfig,
    host: str | None = None,
    port: int | None = None,
    pilot: ScriptedPilot | None = None,
    ready: threading.Event | None = None,
    stop: threading.Event | None = None,
) -> None:
    """Run a live session and its protocol endpoint until stopped.

    The simulation advances on a wall-paced thread at config.tick_rate no
    matter how slow any client is; network I/O lives on the asyncio side
    and talks to the owner only through mailboxes and the broadcast hub.
    """
    import asyncio

    import websockets.asyncio.server

    bind_host, bind_port = resolve_endpoint(host, port)
    session = LiveSession(config, pilot=pilot)
    stop = stop or threading.Event()

    def sim_loop() -> None:
        dt = config.sim_dt
        next_due = time.monotonic()
        while not stop.is_set():
            session.tick()
            next_due += dt
            delay = next_due - time.monotonic()
            if delay > 0:
                time.sleep(delay)
            else:
                # a long stall must not trigger a catch-up burst
                next_due = time.monotonic()

    async def sender(ws, channel: _ClientChannel) -> None:
        loop = asyncio.get_running_loop()
        while True:
            batch = await loop.run_in_executor(None, channel.drain, 0.25)
            for message in batch:
                await ws.send(message)

    async def handler(ws) -> None:
        channel = session.broadcast.register()
        task = asyncio.create_task(sender(ws, channel))
        try:
            async for raw in ws:
                reply = session.submit(raw)
                if reply is not None:
                    await ws.send(reply)
        finally:
            channel.close()
            session.broadcast.unregister(channel)
            task.cancel()

    async def main() -> None:
        async with websockets.asyncio.server.serve(handler, bind_host, bind_port):
            if ready is not None:
                ready.set()
            while not stop.is_set():
                await asyncio.sleep(0.1)

    thread = threading.Thread(target=sim_loop, name="sim-loop", daemon=True)
    thread.start()
    try:
        asyncio.run(main())
    finally:
        stop.set()
        thread.join(timeout=2.0)
