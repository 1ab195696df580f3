"""Local planning: joystick goal projection, deterministic grid A*, greedy
safe-corridor generation, and the nearest-traversable-cell fallback.

A* runs over either the inflated local window (traversable = no inflation) or
the coarse global map (traversable = latched free).  Tie-breaking is fixed
(lower heuristic, then lower flat index) so paths are reproducible.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .kernels import KNOWN_FREE, NO_INFLATION
from .mapping import GlobalMap, InflatedMap, ProbabilityMap
from .world import QuadState, wrap_angle


class PlanningError(ValueError):
    pass


class StartBlocked(PlanningError):
    pass


class GoalBlocked(PlanningError):
    pass


class Unreachable(PlanningError):
    pass


class PathNotFree(PlanningError):
    pass


class NoFreeCell(PlanningError):
    pass


@dataclass
class JoystickCommand:
    """Normalized pilot input; axes are forward, lateral-left, vertical, yaw."""

    axes: np.ndarray = field(default_factory=lambda: np.zeros(4))
    gimbal_axis: float = 0.0
    record_pressed: bool = False

    def clamped(self) -> "JoystickCommand":
        return JoystickCommand(
            axes=np.clip(np.asarray(self.axes, dtype=np.float64), -1.0, 1.0),
            gimbal_axis=min(max(self.gimbal_axis, -1.0), 1.0),
            record_pressed=self.record_pressed,
        )


def compute_local_goal(
    cmd: JoystickCommand,
    state: QuadState,
    horizon: float,
    yaw_rate_max: float = 1.5,
    dt: float = 0.1,
) -> tuple[np.ndarray, float]:
    """Project stick deflection to a goal point and yaw reference.

    The translational axes span a body-frame displacement scaled to the
    horizon distance, rotated into the world by the current yaw; the yaw axis
    integrates at the maximum yaw rate over one planner period.
    """
    if horizon <= 0:
        raise ValueError("horizon must be positive")
    c = cmd.clamped()
    body = np.array([c.axes[0], c.axes[1], c.axes[2]]) * horizon
    cy = math.cos(state.yaw)
    sy = math.sin(state.yaw)
    goal = state.position + np.array(
        [cy * body[0] - sy * body[1], sy * body[0] + cy * body[1], body[2]]
    )
    yaw_ref = wrap_angle(state.yaw + c.axes[3] * yaw_rate_max * dt)
    return goal, yaw_ref


@dataclass
class GridPath:
    """A* result: world-cell waypoints and their centre positions."""

    cells: np.ndarray  # (L, 3) int64
    points: np.ndarray  # (L, 3) float64 cell centres
    length: float  # canonical metric length

    def __len__(self) -> int:
        return self.cells.shape[0]


_NEIGH_26 = np.array(
    [
        [dx, dy, dz]
        for dx in (-1, 0, 1)
        for dy in (-1, 0, 1)
        for dz in (-1, 0, 1)
        if (dx, dy, dz) != (0, 0, 0)
    ],
    np.int64,
)
_NEIGH_26_COST = np.sqrt((_NEIGH_26.astype(np.float64) ** 2).sum(axis=1))


def canonical_path_length(cells: np.ndarray, resolution: float) -> float:
    """Metric length from step-type counts (axis, face-diagonal, corner).

    Summing n1 + n2*sqrt(2) + n3*sqrt(3) in one expression makes equal-length
    paths compare exactly equal regardless of traversal order.
    """
    if cells.shape[0] < 2:
        return 0.0
    steps = np.abs(np.diff(cells, axis=0)).sum(axis=1)
    n1 = int((steps == 1).sum())
    n2 = int((steps == 2).sum())
    n3 = int((steps == 3).sum())
    return (n1 + n2 * math.sqrt(2.0) + n3 * math.sqrt(3.0)) * resolution


def _astar_on_grid(
    blocked: np.ndarray, start_local, goal_local, origin_cell, resolution: float
) -> GridPath:
    status, path = kernels.astar_grid(
        blocked,
        np.asarray(start_local, np.int64),
        np.asarray(goal_local, np.int64),
        _NEIGH_26,
        _NEIGH_26_COST,
        1,
    )
    if status == 1:
        raise StartBlocked("start cell is not traversable")
    if status == 2:
        raise GoalBlocked("goal cell is not traversable")
    if status == 3:
        raise Unreachable("no path between start and goal")
    cells = path + np.asarray(origin_cell, np.int64)[None, :]
    points = (cells.astype(np.float64) + 0.5) * resolution
    return GridPath(cells=cells, points=points, length=canonical_path_length(cells, resolution))


def astar_local(inflated: InflatedMap, start_point, goal_point, margin_cells: int = 12) -> GridPath:
    """A* between two points on the inflated window (traversable = no inflation).

    The search grid is cropped to the start/goal bounding box plus a margin so
    window-sized searches stay cheap; paths needing detours beyond the margin
    report unreachable and are retried as the map evolves.
    """
    p = inflated.prob
    start = p.cell_of(start_point)
    goal = p.cell_of(goal_point)
    for name, cell in (("start", start), ("goal", goal)):
        if not p.in_window(cell):
            raise PlanningError(f"{name} cell outside the map window")
    lo = np.minimum(start, goal) - margin_cells
    hi = np.maximum(start, goal) + margin_cells + 1
    lo = np.maximum(lo, p.origin)
    hi = np.minimum(hi, p.origin + p.window)
    blocked = inflated.blocked_crop(lo, hi)
    return _astar_on_grid(blocked, start - lo, goal - lo, lo, p.res)


def astar_global(gmap: GlobalMap, start_point, goal_point, margin_cells: int = 4) -> GridPath:
    """A* between two points on the coarse global map (traversable = free)."""
    start = gmap.cell_of(start_point)
    goal = gmap.cell_of(goal_point)
    for name, cell in (("start", start), ("goal", goal)):
        if not gmap.in_bounds(cell):
            raise PlanningError(f"{name} cell outside the global map")
    free_idx = np.argwhere(gmap.free)
    if free_idx.size == 0:
        raise StartBlocked("global map has no free cells")
    lo = np.minimum(np.minimum(start, goal), free_idx.min(axis=0) + gmap.origin) - margin_cells
    hi = np.maximum(np.maximum(start, goal), free_idx.max(axis=0) + gmap.origin) + margin_cells + 1
    lo = np.maximum(lo, gmap.origin)
    hi = np.minimum(hi, gmap.origin + gmap.size)
    sl = tuple(slice(int(lo[a] - gmap.origin[a]), int(hi[a] - gmap.origin[a])) for a in range(3))
    blocked = (~gmap.free[sl]).astype(np.uint8)
    return _astar_on_grid(blocked, start - lo, goal - lo, lo, gmap.res)


@dataclass
class CorridorBox:
    """Axis-aligned free box: world extents plus the covered cell range."""

    lo: np.ndarray  # (3,) world coords
    hi: np.ndarray
    cell_lo: np.ndarray  # (3,) int64 inclusive
    cell_hi: np.ndarray  # (3,) int64 inclusive

    def contains_point(self, point, tol: float = 0.0) -> bool:
        p = np.asarray(point, dtype=np.float64)
        return bool(np.all(p >= self.lo - tol) and np.all(p <= self.hi + tol))

    def contains_cell(self, cell) -> bool:
        c = np.asarray(cell, dtype=np.int64)
        return bool(np.all(c >= self.cell_lo) and np.all(c <= self.cell_hi))


@dataclass
class Corridor:
    boxes: list[CorridorBox]
    path: GridPath

    def box_for_stage(self, waypoint_index: int) -> int:
        """First box covering the given path waypoint."""
        cell = self.path.cells[waypoint_index]
        for i, box in enumerate(self.boxes):
            if box.contains_cell(cell):
                return i
        raise ValueError("waypoint not covered by any corridor box")


_FACE_ORDER = np.array(
    [[1, 0, 0], [-1, 0, 0], [0, 1, 0], [0, -1, 0], [0, 0, 1], [0, 0, -1]], np.int64
)


def _expand_box(seed: np.ndarray, free: np.ndarray, lo_cell: np.ndarray, max_edge: int):
    """Grow a cell-aligned box around seed one face layer at a time.

    free is the cropped known-free mask indexed from lo_cell; growth on a face
    stops permanently once a layer would include a non-free cell, leave the
    crop, or push the edge length past max_edge.
    """
    shape = np.array(free.shape, np.int64)
    b_lo = seed - lo_cell
    b_hi = b_lo.copy()
    open_faces = [True] * 6
    while any(open_faces):
        for f in range(6):
            if not open_faces[f]:
                continue
            axis = f // 2
            direction = 1 if f % 2 == 0 else -1
            if b_hi[axis] - b_lo[axis] + 2 > max_edge:
                open_faces[f] = False
                continue
            if direction > 0:
                new_coord = b_hi[axis] + 1
                if new_coord >= shape[axis]:
                    open_faces[f] = False
                    continue
            else:
                new_coord = b_lo[axis] - 1
                if new_coord < 0:
                    open_faces[f] = False
                    continue
            sl = [slice(b_lo[a], b_hi[a] + 1) for a in range(3)]
            sl[axis] = slice(new_coord, new_coord + 1)
            if not np.all(free[tuple(sl)]):
                open_faces[f] = False
                continue
            if direction > 0:
                b_hi[axis] = new_coord
            else:
                b_lo[axis] = new_coord
    return b_lo + lo_cell, b_hi + lo_cell


def generate_sfc(path: GridPath, prob: ProbabilityMap, max_box_edge: int = 20) -> Corridor:
    """Cover the path with overlapping axis-aligned boxes of known-free cells.

    Boxes expand greedily (faces in +x, -x, +y, -y, +z, -z order, one layer
    per round) from the first uncovered waypoint; each next box seeds at the
    last waypoint the previous box covered, so consecutive boxes overlap.
    """
    if len(path) == 0:
        raise ValueError("empty path")
    cls = prob.classes_unrolled()
    free = cls == KNOWN_FREE
    lo_cell = prob.origin
    rel = path.cells - lo_cell[None, :]
    if np.any(rel < 0) or np.any(rel >= prob.window):
        raise PathNotFree("path leaves the map window")
    if not np.all(free[rel[:, 0], rel[:, 1], rel[:, 2]]):
        raise PathNotFree("path crosses a cell that is not known-free")

    boxes: list[CorridorBox] = []
    covered_until = -1  # last covered waypoint index
    seed_idx = 0
    while covered_until < len(path) - 1:
        seed = path.cells[seed_idx]
        b_lo, b_hi = _expand_box(seed, free, lo_cell, max_box_edge)
        box = CorridorBox(
            lo=b_lo.astype(np.float64) * prob.res,
            hi=(b_hi.astype(np.float64) + 1.0) * prob.res,
            cell_lo=b_lo,
            cell_hi=b_hi,
        )
        boxes.append(box)
        advanced = covered_until
        j = seed_idx
        while j < len(path) and box.contains_cell(path.cells[j]):
            advanced = j
            j += 1
        if advanced <= covered_until:
            # box failed to extend coverage; should not happen since the seed
            # cell itself is free, but guard against pathological stalls
            raise PathNotFree("corridor expansion stalled")
        covered_until = advanced
        seed_idx = covered_until
        if covered_until >= len(path) - 1:
            break
    if len(path) >= 2 and len(boxes) == 1:
        # keep at least two overlapping boxes along any real leg
        seed = path.cells[-1]
        b_lo, b_hi = _expand_box(seed, free, lo_cell, max_box_edge)
        boxes.append(
            CorridorBox(
                lo=b_lo.astype(np.float64) * prob.res,
                hi=(b_hi.astype(np.float64) + 1.0) * prob.res,
                cell_lo=b_lo,
                cell_hi=b_hi,
            )
        )
    return Corridor(boxes=boxes, path=path)


def nearest_reachable(inflated: InflatedMap, start, goal) -> np.ndarray:
    """Traversable cell centre nearest the goal among cells connected to start.

    nearest_no_inflation can return a pocket of free space that is sealed
    off from the vehicle (for example the sensing shadow behind a fresh
    obstacle); this variant only considers the start cell's 26-connected
    component so the result is always reachable by grid search.
    """
    from scipy import ndimage

    p = inflated.prob
    start_cell = p.cell_of(start)
    if not p.in_window(start_cell):
        raise PlanningError("start outside the map window")
    free = inflated.classes_unrolled() == NO_INFLATION
    labels, _ = ndimage.label(free, structure=np.ones((3, 3, 3), dtype=bool))
    rel = start_cell - p.origin
    lab = labels[rel[0], rel[1], rel[2]]
    if lab == 0:
        # start cell itself inflated (transient, mid-manoeuvre); grow from
        # the closest traversable cell instead
        anchor = nearest_no_inflation(inflated, start)
        rel = p.cell_of(anchor) - p.origin
        lab = labels[rel[0], rel[1], rel[2]]
    cells = np.argwhere(labels == lab)
    centers = (cells + p.origin[None, :] + 0.5) * p.res
    d = np.linalg.norm(centers - np.asarray(goal, dtype=np.float64)[None, :], axis=1)
    return centers[int(np.argmin(d))]


def nearest_no_inflation(inflated: InflatedMap, point) -> np.ndarray:
    """Closest traversable position to a query point.

    If the containing cell is traversable the point comes back unchanged;
    otherwise a fixed-order (+x, -x, +y, -y, +z, -z) breadth-first search
    returns the centre of the first traversable cell found.
    """
    p = inflated.prob
    start = p.cell_of(point)
    if not p.in_window(start):
        raise PlanningError("query point outside the map window")
    if inflated.class_of(start) == NO_INFLATION:
        return np.asarray(point, dtype=np.float64).copy()
    seen = {tuple(start)}
    queue = deque([start])
    while queue:
        cell = queue.popleft()
        for face in _FACE_ORDER:
            n = cell + face
            key = (int(n[0]), int(n[1]), int(n[2]))
            if key in seen or not p.in_window(n):
                continue
            seen.add(key)
            if inflated.class_of(n) == NO_INFLATION:
                return p.center_of(n)
            queue.append(n)
    raise NoFreeCell("no traversable cell inside the window")
