"""Regenerate the committed test fixtures.

Everything here is closed-form or hand-placed constants, so reruns are
bit-stable.  Run from the repository root after an editable install:

    python3 scripts/make_fixtures.py
"""

from __future__ import annotations

import sys
from pathlib import Path

import numpy as np

from inspectsim.gateway import ScriptWaypoint, save_script
from inspectsim.mapping import GlobalMap
from inspectsim.mission import (
    Mission,
    MissionLog,
    TrajectorySample,
    save_mission,
)
from inspectsim.registration import AnchorMap, save_anchor
from inspectsim.sequencing import InspectionPoint
from inspectsim.world import Scene, save_scene

FIXTURES = Path(__file__).resolve().parent.parent / "tests" / "fixtures"


def crossing_square() -> None:
    """Four corners recorded in crossing order: two diagonals in, square out.

    Recorded closed tour 0-1-2-3-0 costs 2 + 2*sqrt(2); the optimal tour
    walks the perimeter for 4.0.
    """
    out = FIXTURES / "crossing_square"
    out.mkdir(parents=True, exist_ok=True)
    z = 0.75  # coarse-cell centre
    corners = {
        "a": (0.25, 0.25),
        "b": (1.25, 1.25),
        "c": (1.25, 0.25),
        "d": (0.25, 1.25),
    }
    order = ["a", "b", "c", "d"]  # a->b and c->d are the crossing diagonals
    points = [
        InspectionPoint(
            position=np.array([*corners[k], z]),
            yaw=0.0,
            gimbal_pitch=0.0,
            recorded_index=i,
        )
        for i, k in enumerate(order)
    ]
    gmap = GlobalMap(center=np.array([0.75, 0.75, z]), resolution=0.5, extent=40.0)
    lo = gmap.cell_of([-2.0, -2.0, 0.0]) - gmap.origin
    hi = gmap.cell_of([3.5, 3.5, 2.0]) - gmap.origin
    gmap.free[lo[0] : hi[0] + 1, lo[1] : hi[1] + 1, lo[2] : hi[2] + 1] = True
    gmap.export_snapshot(out / "global_map.bin")

    # flat synthetic anchor; optimization never reads it, loaders demand it
    g = np.arange(-5, 6, dtype=np.float64) * 0.3
    gx, gy = np.meshgrid(g, g, indexing="ij")
    pts = np.column_stack([gx.ravel(), gy.ravel(), np.zeros(gx.size)])
    normals = np.tile([0.0, 0.0, 1.0], (pts.shape[0], 1))
    save_anchor(AnchorMap(points=pts, normals=normals, voxel_resolution=0.3), out / "anchor.bin")

    mission = Mission(
        scene_id="crossing-square",
        p_init=points[0].position.copy(),
        anchor_file="anchor.bin",
        points=points,
        map_file="global_map.bin",
    )
    save_mission(mission, out / "mission.json")


def reloc_scene() -> Scene:
    """Small room with asymmetric structure: two walls, a ceiling, two boxes.

    Enough planes to pin translation and two boxes to break yaw symmetry.
    """
    scene = Scene(
        scene_id="reloc-room",
        ground_height=0.0,
        bounds=np.array([-3.0, -3.0, 0.0, 3.0, 3.0, 2.2]),
        obstacles=np.array(
            [
                [-3.0, -3.0, 2.0, 3.0, 3.0, 2.2],  # ceiling
                [-2.1, -3.0, 0.0, -2.0, 3.0, 2.0],  # wall at x-
                [-3.0, -2.1, 0.0, 3.0, -2.0, 2.0],  # wall at y-
                [0.6, 0.2, 0.0, 1.2, 0.8, 1.2],
                [-1.0, 0.9, 0.0, -0.3, 1.5, 0.9],
            ]
        ),
    )
    save_scene(scene, FIXTURES / "reloc_scene.json")
    return scene


def smoke_script() -> None:
    """Three-point recording run in the reloc room, used by CLI round trips."""
    waypoints = [
        ScriptWaypoint([0.5, -0.5, 0.6], record=True),
        ScriptWaypoint([1.7, -0.8, 0.8], record=True, hold=0.3),
        ScriptWaypoint([1.5, 1.4, 1.0], record=True, hold=0.3),
        ScriptWaypoint([0.5, -0.5, 0.6], hold=0.2),
    ]
    save_script(waypoints, FIXTURES / "smoke_script.json")


def constant_speed_log() -> None:
    """Straight flight at exactly 2 m/s for exactly 60 s."""
    log = MissionLog("human")
    for i in range(121):
        t = 0.5 * i
        log.add_sample(
            TrajectorySample(
                time=t,
                position=np.array([2.0 * t, 0.0, 1.0]),
                yaw=0.0,
                gimbal_pitch=0.0,
                speed=2.0,
            )
        )
    log.save(FIXTURES / "constant_speed_log.json")


def cluttered() -> None:
    """Walled room with pillars; the script wanders before each recording.

    The recorded order crosses the room twice, so re-sequencing plus the
    dropped detours gives the autonomous pass a solidly shorter route.
    """
    out = FIXTURES / "cluttered"
    out.mkdir(parents=True, exist_ok=True)
    scene = Scene(
        scene_id="cluttered-hall",
        ground_height=0.0,
        bounds=np.array([-6.0, -4.0, 0.0, 6.0, 4.0, 3.0]),
        obstacles=np.array(
            [
                [-6.0, -4.0, 2.6, 6.0, 4.0, 3.0],  # ceiling
                [-6.0, -4.0, 0.0, -5.9, 4.0, 2.6],  # walls
                [5.9, -4.0, 0.0, 6.0, 4.0, 2.6],
                [-6.0, -4.0, 0.0, 6.0, -3.9, 2.6],
                [-6.0, 3.9, 0.0, 6.0, 4.0, 2.6],
                [-2.2, -1.2, 0.0, -1.4, -0.4, 2.6],  # pillars
                [0.8, 0.2, 0.0, 1.6, 1.0, 2.6],
                [3.0, -2.0, 0.0, 3.8, -1.2, 2.6],
            ]
        ),
    )
    save_scene(scene, out / "scene.json")

    z = 1.0
    waypoints = [
        ScriptWaypoint([-4.5, -2.5, z], record=True),
        ScriptWaypoint([-4.5, 2.0, z]),  # detour up the left side
        ScriptWaypoint([-1.0, -2.8, z]),  # and back down the middle
        ScriptWaypoint([4.5, 2.5, z], record=True, hold=0.3),
        ScriptWaypoint([2.0, -2.5, z]),  # overshoot before the next mark
        ScriptWaypoint([4.5, -2.5, z], record=True, hold=0.3),
        ScriptWaypoint([0.5, 2.5, z]),  # drift across the hall
        ScriptWaypoint([-4.5, 2.5, z], record=True, hold=0.3),
        ScriptWaypoint([-3.0, 0.0, z], hold=0.2),
    ]
    save_script(waypoints, out / "script.json")


def main() -> int:
    FIXTURES.mkdir(parents=True, exist_ok=True)
    crossing_square()
    reloc_scene()
    smoke_script()
    constant_speed_log()
    cluttered()
    print(f"fixtures written under {FIXTURES}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
