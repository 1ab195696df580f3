import math

import numpy as np
import pytest

from inspectsim.lidar import ScanFrame
from inspectsim.mapping import (
    KNOWN_FREE,
    NO_INFLATION,
    InflatedMap,
    MapConfig,
    ProbabilityMap,
)
from inspectsim.planning import (
    GridPath,
    JoystickCommand,
    NoFreeCell,
    Unreachable,
    astar_local,
    canonical_path_length,
    compute_local_goal,
    generate_sfc,
    nearest_no_inflation,
    nearest_reachable,
)
from inspectsim.world import QuadState

from conftest import dijkstra_grid_cost, small_map_config


def free_everything(prob: ProbabilityMap) -> None:
    w = prob.window
    cells = prob.origin + np.array(list(np.ndindex(w, w, w)), dtype=np.int64)
    prob.observe_free_cells(cells)


def occupy_cell(prob: ProbabilityMap, cell, shots: int = 6) -> list:
    """Drive one cell occupied with point-blank returns along +x.

    The sensor sits in the adjacent cell so no other cell receives evidence.
    Returns the per-shot class-change batches.
    """
    center = prob.center_of(np.asarray(cell, dtype=np.int64))
    sensor = center - np.array([prob.res, 0.0, 0.0])
    out = []
    for k in range(shots):
        frame = ScanFrame(
            stamp=0.01 * k,
            sensor_position=sensor,
            sensor_yaw=0.0,
            returns=center[None, :],
            misses=np.empty((0, 3)),
        )
        out.append(prob.integrate_scan(frame))
    return out


def free_world(center=(1.0, 1.0, 1.0), **overrides):
    prob = ProbabilityMap(small_map_config(**overrides), center=center)
    free_everything(prob)
    return prob, InflatedMap(prob)


# -- local goal from stick deflection --------------------------------------


def test_local_goal_hover():
    state = QuadState(position=np.array([1.0, 2.0, 3.0]), yaw=0.7)
    goal, yaw_ref = compute_local_goal(JoystickCommand(), state, horizon=5.0)
    assert np.allclose(goal, state.position)
    assert yaw_ref == pytest.approx(0.7)


def test_local_goal_forward_along_body_x():
    state = QuadState(position=np.zeros(3), yaw=0.0)
    goal, _ = compute_local_goal(
        JoystickCommand(axes=np.array([1.0, 0.0, 0.0, 0.0])), state, horizon=5.0
    )
    assert np.allclose(goal, [5.0, 0.0, 0.0], atol=1e-12)


def test_local_goal_rotates_with_yaw():
    state = QuadState(position=np.zeros(3), yaw=math.pi / 2)
    goal, _ = compute_local_goal(
        JoystickCommand(axes=np.array([1.0, 0.0, 0.0, 0.0])), state, horizon=5.0
    )
    assert np.allclose(goal, [0.0, 5.0, 0.0], atol=1e-9)


# -- grid search -----------------------------------------------------------


def test_free_diagonal_has_exact_length():
    prob, inflated = free_world()
    start = prob.center_of(np.array([0, 0, 0]))
    goal = prob.center_of(np.array([9, 9, 9]))
    path = astar_local(inflated, start, goal, margin_cells=25)
    assert path.length == pytest.approx(9 * math.sqrt(3.0) * prob.res, abs=1e-9)
    assert np.array_equal(path.cells[0], [0, 0, 0])
    assert np.array_equal(path.cells[-1], [9, 9, 9])


def test_wall_with_gap_matches_dijkstra():
    prob, inflated = free_world()
    # wall plane at x = 5 spanning the usable window, one gap left open
    gap = (5, 4, 4)
    for y in range(-2, 11):
        for z in range(-2, 11):
            if (5, y, z) != gap:
                occupy_cell(prob, (5, y, z))
    inflated = InflatedMap(prob)
    start = prob.center_of(np.array([1, 4, 4]))
    goal = prob.center_of(np.array([9, 4, 4]))
    path = astar_local(inflated, start, goal, margin_cells=25)
    for cell in path.cells:
        assert inflated.class_of(cell) == NO_INFLATION

    blocked = (inflated.classes_unrolled() != NO_INFLATION).astype(np.uint8)
    s = prob.cell_of(start) - prob.origin
    g = prob.cell_of(goal) - prob.origin
    oracle = dijkstra_grid_cost(blocked, s, g) * prob.res
    assert path.length == pytest.approx(oracle, abs=1e-9)


def test_sealed_goal_unreachable():
    prob, inflated = free_world()
    # hollow cube shell far enough out that the pocket center stays
    # traversable after inflation, yet disconnected from the outside
    target = np.array([7, 4, 4])
    for off in np.ndindex(7, 7, 7):
        d = np.array(off) - 3
        if np.abs(d).max() == 3:
            occupy_cell(prob, target + d)
    inflated = InflatedMap(prob)
    assert inflated.class_of(target) == NO_INFLATION
    start = prob.center_of(np.array([0, 4, 4]))
    goal = prob.center_of(target)
    with pytest.raises(Unreachable):
        astar_local(inflated, start, goal, margin_cells=25)


# -- safe corridor ---------------------------------------------------------


def grid_path_from_cells(prob, cells):
    cells = np.asarray(cells, dtype=np.int64)
    points = np.array([prob.center_of(c) for c in cells])
    return GridPath(cells=cells, points=points, length=canonical_path_length(cells, prob.res))


def test_straight_path_two_overlapping_boxes():
    prob, _ = free_world()
    path = grid_path_from_cells(prob, [(0, 0, 0), (1, 0, 0), (2, 0, 0)])
    corridor = generate_sfc(path, prob, max_box_edge=2)
    assert len(corridor.boxes) == 2
    for cell in path.cells:
        assert any(b.contains_cell(cell) for b in corridor.boxes)
    a, b = corridor.boxes
    assert np.all(a.cell_hi >= b.cell_lo)  # shared volume


def test_tunnel_constrains_box_cross_section():
    prob = ProbabilityMap(small_map_config(), center=(1.0, 1.0, 1.0))
    tube = [(x, 4, 4) for x in range(0, 6)]
    prob.observe_free_cells(np.asarray(tube, dtype=np.int64))
    for x in range(0, 6):
        for dy, dz in np.ndindex(3, 3):
            cell = (x, 4 + dy - 1, 4 + dz - 1)
            if cell not in tube:
                occupy_cell(prob, cell)
    path = grid_path_from_cells(prob, tube)
    corridor = generate_sfc(path, prob)
    for box in corridor.boxes:
        assert box.cell_hi[1] == box.cell_lo[1]
        assert box.cell_hi[2] == box.cell_lo[2]


def test_random_corridors_contain_only_known_free(rng_factory):
    rng = rng_factory(101)
    for trial in range(20):
        prob, inflated = free_world()
        interior = np.array([c for c in np.ndindex(10, 10, 10)])
        occ = interior[rng.choice(len(interior), size=12, replace=False)]
        for cell in occ:
            occupy_cell(prob, cell)
        inflated = InflatedMap(prob)
        open_cells = [
            c
            for c in map(tuple, interior)
            if inflated.class_of(c) == NO_INFLATION
        ]
        if len(open_cells) < 2:
            continue
        idx = rng.choice(len(open_cells), size=2, replace=False)
        start = prob.center_of(np.array(open_cells[idx[0]]))
        goal = prob.center_of(np.array(open_cells[idx[1]]))
        try:
            path = astar_local(inflated, start, goal, margin_cells=25)
        except Unreachable:
            continue
        corridor = generate_sfc(path, prob)
        for box in corridor.boxes:
            lo, hi = box.cell_lo, box.cell_hi
            for cell in np.ndindex(*(hi - lo + 1)):
                assert prob.class_of(lo + np.array(cell)) == KNOWN_FREE


# -- recovery queries ------------------------------------------------------


def test_nearest_no_inflation_identity():
    prob, inflated = free_world()
    p = prob.center_of(np.array([4, 4, 4]))
    out = nearest_no_inflation(inflated, p)
    assert np.allclose(out, p)


def test_nearest_no_inflation_prefers_plus_x():
    # zero inflation radius makes a single occupied cell its own blob
    prob, _ = free_world(inflation_radius=0.0)
    occupy_cell(prob, (4, 4, 4))
    inflated = InflatedMap(prob)
    query = prob.center_of(np.array([4, 4, 4]))
    out = nearest_no_inflation(inflated, query)
    assert np.allclose(out, prob.center_of(np.array([5, 4, 4])))


def test_nearest_no_inflation_exhausted():
    prob = ProbabilityMap(small_map_config(), center=(1.0, 1.0, 1.0))
    inflated = InflatedMap(prob)  # fully unknown window
    with pytest.raises(NoFreeCell):
        nearest_no_inflation(inflated, (1.0, 1.0, 1.0))


def test_nearest_reachable_stops_at_component_boundary():
    prob, _ = free_world()
    # seal the x = 5 plane completely
    for y in range(-2, 12):
        for z in range(-2, 12):
            occupy_cell(prob, (5, y, z))
    inflated = InflatedMap(prob)
    start = prob.center_of(np.array([0, 4, 4]))
    goal = prob.center_of(np.array([9, 4, 4]))
    out = nearest_reachable(inflated, start, goal)
    cell = prob.cell_of(out)
    assert cell[0] < 5  # stays on the start side
    assert inflated.class_of(cell) == NO_INFLATION
    # closer to the goal than the start is
    assert np.linalg.norm(out - goal) < np.linalg.norm(start - goal)
