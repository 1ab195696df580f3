import json
import math

import numpy as np
import pytest

from inspectsim.lidar import SensorConfig
from inspectsim.mapping import MapConfig
from inspectsim.mission import (
    AutonomousExecutor,
    Metrics,
    Mission,
    MissionError,
    MissionLog,
    MissionRecorder,
    Snapshot,
    TrajectorySample,
    capture_snapshot,
    compute_metrics,
    load_mission,
    metrics_table,
    save_mission,
    snapshot_agreement,
)
from inspectsim.sequencing import InspectionPoint
from inspectsim.world import QuadState

from conftest import (
    RELOC_P_INIT,
    box_scene,
    open_scene,
    positions_inside_obstacles,
    reloc_fixture_scene,
)

ROWS, COLS = 24, 32
H_FOV = math.radians(70.0)
V_FOV = math.radians(50.0)


def grid_angles():
    """Azimuth/elevation per depth cell, derived from the stated field of view."""
    az = ((np.arange(COLS) + 0.5) / COLS - 0.5) * H_FOV
    el = (0.5 - (np.arange(ROWS) + 0.5) / ROWS) * V_FOV
    return np.meshgrid(az, el)


def still_point(position, yaw=0.0, pitch=0.0, idx=0):
    return InspectionPoint(
        position=np.asarray(position, dtype=np.float64),
        yaw=yaw,
        gimbal_pitch=pitch,
        recorded_index=idx,
    )


# -- point recording -------------------------------------------------------


def test_recorder_copies_pose_and_indexes():
    rec = MissionRecorder("s", (0.0, 0.0, 1.0))
    state = QuadState(position=np.array([1.0, 2.0, 1.5]), yaw=0.4, gimbal_pitch=-0.2)
    p0 = rec.record_point(state)
    state.position[0] = 9.0  # recorded point must not alias the state
    state.yaw = 1.1
    p1 = rec.record_point(state)
    assert p0.recorded_index == 0 and p1.recorded_index == 1
    assert np.array_equal(p0.position, [1.0, 2.0, 1.5])
    assert abs(p0.yaw - 0.4) < 1e-12 and p0.gimbal_pitch == -0.2
    assert np.array_equal(p1.position, [9.0, 2.0, 1.5])
    assert len(rec.points) == 2


def test_recorder_warns_on_duplicate_pose():
    rec = MissionRecorder("s", (0.0, 0.0, 1.0))
    state = QuadState(position=np.array([1.0, 2.0, 1.5]), yaw=0.4)
    rec.record_point(state)
    with pytest.warns(UserWarning, match="duplicate"):
        rec.record_point(state)
    assert [p.recorded_index for p in rec.points] == [0, 1]


def test_recorder_rejects_after_human_phase():
    rec = MissionRecorder("s", (0.0, 0.0, 1.0))
    rec.end_human_phase()
    with pytest.raises(MissionError, match="human phase"):
        rec.record_point(QuadState(position=np.zeros(3)))


# -- snapshot capture ------------------------------------------------------


def test_snapshot_open_sky_has_no_hits():
    scene = open_scene()
    state = QuadState(position=np.array([0.0, 0.0, 1.0]), gimbal_pitch=0.6)
    snap = capture_snapshot(scene, state, still_point(state.position, pitch=0.6), -1)
    assert snap.depths.shape == (ROWS, COLS)
    assert not np.any(np.isfinite(snap.depths))


def test_snapshot_wall_depths_match_plane_geometry():
    # a wall filling the whole frustum: depth is 2 / (cos el * cos az)
    scene = box_scene([((2.0, -25.0, 0.0), (2.4, 25.0, 12.0))], half=30.0)
    state = QuadState(position=np.array([0.0, 0.0, 5.0]))
    snap = capture_snapshot(scene, state, still_point(state.position), 0)
    azg, elg = grid_angles()
    expected = 2.0 / (np.cos(elg) * np.cos(azg))
    assert np.all(np.isfinite(snap.depths))
    assert np.allclose(snap.depths, expected, atol=1e-9)


def test_snapshot_top_rows_look_up():
    # over flat ground from 1 m up, depth depends only on elevation
    scene = open_scene()
    state = QuadState(position=np.array([0.0, 0.0, 1.0]), yaw=0.7)
    snap = capture_snapshot(scene, state, still_point(state.position, yaw=0.7), 0)
    _, elg = grid_angles()
    for r in range(ROWS):
        el = elg[r, 0]
        expect = 1.0 / math.sin(-el) if el < 0 else math.inf
        if expect > 40.0:  # beyond sensor range
            assert not np.any(np.isfinite(snap.depths[r]))
        else:
            assert np.allclose(snap.depths[r], expect, atol=1e-9)


def test_snapshot_requires_aligned_pose():
    scene = open_scene()
    state = QuadState(position=np.zeros(3), yaw=0.5)
    with pytest.raises(MissionError, match="yaw"):
        capture_snapshot(scene, state, still_point(state.position, yaw=0.0), 0)
    state = QuadState(position=np.zeros(3), gimbal_pitch=0.3)
    with pytest.raises(MissionError, match="gimbal"):
        capture_snapshot(scene, state, still_point(state.position, pitch=0.0), 0)


def test_snapshot_identical_pose_identical_depths():
    # the recording phase (-1) and the autonomous revisit see the same grid
    scene = box_scene([((2.0, -1.0, 0.0), (2.5, 1.0, 3.0))])
    state = QuadState(position=np.array([0.0, 0.0, 1.0]))
    point = still_point(state.position)
    human = capture_snapshot(scene, state, point, -1)
    auto = capture_snapshot(scene, state, point, 3)
    assert human.point_index == -1 and auto.point_index == 3
    assert np.array_equal(human.depths, auto.depths)
    assert snapshot_agreement(human, auto) == 1.0


def test_snapshot_dict_round_trip_preserves_misses():
    scene = open_scene()
    state = QuadState(position=np.array([0.0, 0.0, 1.0]), yaw=0.7)
    snap = capture_snapshot(scene, state, still_point(state.position, yaw=0.7), 2)
    back = Snapshot.from_dict(json.loads(json.dumps(snap.to_dict())))
    assert back.point_index == 2
    assert np.array_equal(np.isfinite(back.depths), np.isfinite(snap.depths))
    finite = np.isfinite(snap.depths)
    assert np.array_equal(back.depths[finite], snap.depths[finite])


# -- metrics ---------------------------------------------------------------


def straight_log(speeds_and_durations, dt=0.5):
    """Log of straight x-axis flight segments given as (speed, seconds)."""
    log = MissionLog("human")
    t, x = 0.0, 0.0
    log.add_sample(TrajectorySample(0.0, np.array([0.0, 0.0, 1.0]), 0.0, 0.0,
                                    speeds_and_durations[0][0]))
    for speed, seconds in speeds_and_durations:
        for _ in range(int(round(seconds / dt))):
            t += dt
            x += speed * dt
            log.add_sample(TrajectorySample(t, np.array([x, 0.0, 1.0]), 0.0, 0.0, speed))
    return log


def test_metrics_constant_speed():
    m = compute_metrics(straight_log([(2.0, 60.0)]))
    assert m.max_speed == 2.0
    assert m.average_speed == 2.0
    assert m.trajectory_length == 120.0
    assert m.flight_time == 60.0
    assert m.flight_time_text == "1 : 00"


def test_metrics_hover_only():
    log = MissionLog("human")
    for k in range(91):
        log.add_sample(TrajectorySample(0.5 * k, np.array([1.0, 2.0, 1.5]), 0.0, 0.0, 0.0))
    m = compute_metrics(log)
    assert m.max_speed == 0.0
    assert m.average_speed == 0.0
    assert m.trajectory_length == 0.0
    assert m.flight_time == 45.0
    assert m.flight_time_text == "0 : 45"


def test_metrics_two_segments():
    m = compute_metrics(straight_log([(1.0, 10.0), (3.0, 10.0)]))
    assert m.max_speed == 3.0
    assert m.trajectory_length == 40.0
    assert m.average_speed == 2.0
    assert m.flight_time_text == "0 : 20"


def test_metrics_need_two_samples():
    log = MissionLog("human")
    log.add_sample(TrajectorySample(0.0, np.zeros(3), 0.0, 0.0, 0.0))
    with pytest.raises(MissionError):
        compute_metrics(log)


def test_metrics_table_layout():
    rows = [
        ("Manual", Metrics(3.0, 1.5, 45.0, 30.0)),
        ("Autonomous", Metrics(2.0, 1.8, 36.0, 20.0)),
    ]
    table = metrics_table(rows)
    lines = table.split("\n")
    assert len(lines) == 4  # header, rule, two data rows
    assert lines[0].split(" | ")[0].strip() == "Inspection Mode"
    assert set(lines[1]) <= {"-", "|"}
    assert lines[2].split(" | ")[1].strip() == "3.00"
    assert lines[3].split(" | ")[4].strip() == "0 : 20"
    # every row aligns to the same column edges
    for line in lines[2:]:
        assert [i for i, c in enumerate(lines[0]) if c == "|"] == [
            i for i, c in enumerate(line) if c == "|"
        ]


# -- mission persistence ---------------------------------------------------


def square_mission(order=None):
    corners = [(2.0, -1.0, 0.8), (2.6, -1.0, 0.8), (2.6, -0.4, 0.8), (2.0, -0.4, 0.8)]
    points = [still_point(c, idx=i) for i, c in enumerate(corners)]
    return Mission(
        scene_id="reloc-room",
        p_init=RELOC_P_INIT.copy(),
        anchor_file="anchor.bin",
        points=points,
        optimized_order=order,
    )


def test_mission_save_load_round_trip(tmp_path):
    mission = square_mission(order=[0, 3, 2, 1])
    path = tmp_path / "mission.json"
    (tmp_path / "anchor.bin").write_bytes(b"")
    save_mission(mission, path)
    back = load_mission(path)
    assert back.scene_id == mission.scene_id
    assert np.array_equal(back.p_init, mission.p_init)
    assert back.anchor_file == mission.anchor_file
    assert back.optimized_order == [0, 3, 2, 1]
    assert len(back.points) == 4
    for a, b in zip(mission.points, back.points):
        assert np.array_equal(a.position, b.position)
        assert a.yaw == b.yaw and a.gimbal_pitch == b.gimbal_pitch
        assert a.recorded_index == b.recorded_index
    assert back.hover_duration == mission.hover_duration
    assert back.abandon_limit == mission.abandon_limit


def test_mission_rejects_bad_order(tmp_path):
    mission = square_mission(order=[0, 1, 2, 3])
    path = tmp_path / "mission.json"
    (tmp_path / "anchor.bin").write_bytes(b"")
    save_mission(mission, path)
    doc = json.loads(path.read_text())
    doc["optimized_order"] = [0, 2, 2, 3]
    path.write_text(json.dumps(doc))
    with pytest.raises(MissionError, match="permutation"):
        load_mission(path)
    doc["optimized_order"] = [1, 0, 2, 3]
    path.write_text(json.dumps(doc))
    with pytest.raises(MissionError, match="start at point 0"):
        load_mission(path)


def test_mission_missing_anchor_names_path(tmp_path):
    path = tmp_path / "mission.json"
    save_mission(square_mission(), path)
    with pytest.raises(MissionError, match="anchor.bin"):
        load_mission(path)


# -- autonomous execution --------------------------------------------------


EXEC_SENSOR = SensorConfig(rays_per_frame=800, seed=3)
EXEC_MAP = MapConfig(resolution=0.2, window_extent=8.0)


def run_executor(mission, anchor):
    executor = AutonomousExecutor(
        mission,
        reloc_fixture_scene(),
        anchor,
        sensor_config=EXEC_SENSOR,
        map_config=EXEC_MAP,
    )
    log = executor.run()
    return executor, log


def path_length(log):
    pos = np.array([s.position for s in log.samples])
    return float(np.linalg.norm(np.diff(pos, axis=0), axis=1).sum())


def test_executor_requires_optimized_order(reloc_anchor):
    with pytest.raises(MissionError, match="optimized"):
        AutonomousExecutor(square_mission(order=None), reloc_fixture_scene(), reloc_anchor)


def test_executor_single_point_at_start(reloc_anchor):
    mission = Mission(
        scene_id="reloc-room",
        p_init=RELOC_P_INIT.copy(),
        anchor_file="anchor.bin",
        points=[still_point(RELOC_P_INIT)],
        optimized_order=[0],
    )
    executor, log = run_executor(mission, reloc_anchor)
    assert executor.done
    reached = log.events_of("point_reached")
    assert len(reached) == 1
    assert reached[0]["point"] == 0 and reached[0]["recorded_index"] == 0
    assert len(log.snapshots) == 1 and log.snapshots[0].point_index == 0
    landed = log.events_of("landed")
    assert len(landed) == 1 and landed[0]["in_place"] is False
    assert len(log.events_of("relocalized")) == 1
    assert not log.events_of("fallback")
    assert not log.events_of("point_abandoned")
    # the vehicle starts on the point: the whole run is station keeping
    assert path_length(log) < 0.5
    times = [e["time"] for e in log.events]
    assert times == sorted(times)


def test_executor_square_tour(reloc_anchor):
    # corners recorded in a crossing order; the optimized order walks the hull
    mission = square_mission(order=[0, 3, 2, 1])
    order = mission.optimized_order
    executor, log = run_executor(mission, reloc_anchor)
    assert executor.done

    reached = log.events_of("point_reached")
    assert [e["point"] for e in reached] == [0, 1, 2, 3]
    assert [e["recorded_index"] for e in reached] == order
    assert [s.point_index for s in log.snapshots] == [0, 1, 2, 3]
    assert not log.events_of("fallback")
    assert not log.events_of("point_abandoned")
    assert not log.events_of("timeout")
    landed = log.events_of("landed")
    assert len(landed) == 1 and landed[0]["in_place"] is False

    # each snapshot was taken close to its target corner
    targets = mission.optimized_points()
    for snap, point in zip(log.snapshots, targets):
        assert np.linalg.norm(snap.position - point.position) < 2 * mission.arrival_tolerance

    scene = reloc_fixture_scene()
    assert positions_inside_obstacles(log.samples, scene.obstacles) == 0

    # flown distance tracks the tour cost up to arrival tolerance per leg
    stops = [mission.p_init] + [p.position for p in targets] + [targets[0].position]
    ideal = sum(
        float(np.linalg.norm(b - np.asarray(a))) for a, b in zip(stops, stops[1:])
    )
    flown = path_length(log)
    legs = len(stops) - 1
    assert abs(flown - ideal) <= 0.1 * ideal + 2 * mission.arrival_tolerance * legs
