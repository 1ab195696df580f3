"""Inspection-point re-ordering: pairwise route costs over the coarse global
map, an exact subset-DP solver for small instances, and a 2-opt / Or-opt
heuristic for the general case.

Tours are closed and anchored at index 0 (the takeoff vicinity).  All
tie-breaking is deterministic: the exact solver returns the lexicographically
smallest optimal tour, and both local searches scan moves in a fixed order
taking the first improvement.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .mapping import GlobalMap
from .planning import PlanningError, StartBlocked, GoalBlocked, Unreachable, astar_global
from .world import wrap_angle

UNREACHABLE_COST = 1e9

# float64 rounding of a four-term cost delta scales with the largest entry;
# the gate keeps zero-improvement moves from cycling when sentinels appear
_TIE_EPS = 1e-9


@dataclass
class InspectionPoint:
    position: np.ndarray  # (3,)
    yaw: float
    gimbal_pitch: float
    recorded_index: int

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=np.float64).reshape(3)
        self.yaw = wrap_angle(float(self.yaw))
        if not -math.pi / 2 <= self.gimbal_pitch <= math.pi / 2:
            raise ValueError("gimbal pitch outside [-pi/2, pi/2]")


@dataclass
class DistanceMatrix:
    costs: np.ndarray  # (N, N) float64, zero diagonal, symmetric
    unreachable: np.ndarray  # (N, N) bool

    @property
    def n(self) -> int:
        return self.costs.shape[0]


@dataclass
class Tour:
    order: list[int]  # permutation of range(N), order[0] == 0
    cost: float


@dataclass
class OptimizationResult:
    points: list[InspectionPoint]  # reordered, yaw and pitch untouched
    tour: Tour
    recorded_cost: float
    optimized_cost: float
    reduction_percent: float
    unreachable_points: list[int] = field(default_factory=list)


def tour_cost(costs: np.ndarray, order) -> float:
    idx = np.asarray(order, dtype=np.int64)
    return float(costs[idx, np.roll(idx, -1)].sum())


def build_distance_matrix(points: list[InspectionPoint], gmap: GlobalMap) -> DistanceMatrix:
    """Pairwise route lengths between point cells on the global map.

    Pairs with no route (including points whose cell is not latched free)
    get the sentinel cost and an unreachable flag; the matrix is symmetric
    because only the upper triangle is searched.
    """
    n = len(points)
    if n < 1:
        raise ValueError("need at least one point")
    costs = np.zeros((n, n))
    flags = np.zeros((n, n), dtype=bool)
    for i in range(n):
        for j in range(i + 1, n):
            try:
                path = astar_global(gmap, points[i].position, points[j].position)
                d = path.length
                bad = False
            except (StartBlocked, GoalBlocked, Unreachable):
                d = UNREACHABLE_COST
                bad = True
            costs[i, j] = costs[j, i] = d
            flags[i, j] = flags[j, i] = bad
    return DistanceMatrix(costs=costs, unreachable=flags)


def _delta_gate(*terms: float) -> float:
    return _TIE_EPS + 1e-14 * max(map(abs, terms))


def held_karp(matrix: DistanceMatrix) -> Tour:
    """Exact fixed-start closed tour by dynamic programming over subsets.

    g[S][j] is the cheapest completion from node j through every node of S
    and back to 0; the reconstruction walk prefers the smallest next index
    among ties, giving the lexicographically smallest optimal tour.
    """
    n = matrix.n
    if n > 13:
        raise ValueError("exact solver limited to 13 points")
    d = matrix.costs
    if n == 1:
        return Tour(order=[0], cost=0.0)
    m = n - 1  # nodes 1..n-1 carried as bits 0..m-1
    full = (1 << m) - 1
    g = np.empty((full + 1, n))
    g[0, :] = d[:, 0]
    for mask in range(1, full + 1):
        best = np.full(n, np.inf)
        rem = mask
        while rem:
            bit = rem & -rem
            k = bit.bit_length()  # node index = bit position + 1
            np.minimum(best, d[:, k] + g[mask ^ bit, k], out=best)
            rem ^= bit
        g[mask] = best

    order = [0]
    mask = full
    cur = 0
    while mask:
        target = g[mask, cur]
        rem = mask
        chosen = -1
        while rem:
            bit = rem & -rem
            k = bit.bit_length()
            val = d[cur, k] + g[mask ^ bit, k]
            if val <= target + _delta_gate(d[cur, k], g[mask ^ bit, k]):
                chosen = k
                chosen_bit = bit
                break  # bits iterate low to high, so first hit is smallest k
            rem ^= bit
        if chosen < 0:  # numerical safety net: take the true argmin
            best_val = np.inf
            for b in _bits(mask):
                k = b.bit_length()
                val = d[cur, k] + g[mask ^ b, k]
                if val < best_val:
                    best_val = val
                    chosen = k
                    chosen_bit = b
        order.append(chosen)
        mask ^= chosen_bit
        cur = chosen
    return Tour(order=order, cost=tour_cost(d, order))


def _bits(mask: int):
    while mask:
        bit = mask & -mask
        yield bit
        mask ^= bit


def _nearest_neighbor(d: np.ndarray) -> list[int]:
    n = d.shape[0]
    visited = np.zeros(n, dtype=bool)
    visited[0] = True
    order = [0]
    cur = 0
    for _ in range(n - 1):
        row = d[cur].copy()
        row[visited] = np.inf
        nxt = int(np.argmin(row))  # argmin takes the first index on ties
        order.append(nxt)
        visited[nxt] = True
        cur = nxt
    return order


def _candidate_lists(d: np.ndarray, k: int = 8) -> list[set[int]]:
    n = d.shape[0]
    cands = []
    for i in range(n):
        row = d[i].copy()
        row[i] = np.inf
        near = np.argsort(row, kind="stable")[: min(k, n - 1)]
        cands.append(set(int(x) for x in near))
    return cands


def _two_opt(d: np.ndarray, order: list[int], cands) -> list[int]:
    n = len(order)
    improved = True
    guard = 0
    while improved and guard < 10000:
        improved = False
        guard += 1
        for i in range(1, n - 1):
            a, b = order[i - 1], order[i]
            for j in range(i + 1, n):
                c = order[j]
                e = order[(j + 1) % n]
                if cands is not None and c not in cands[a] and e not in cands[b]:
                    continue
                removed = d[a, b] + d[c, e]
                added = d[a, c] + d[b, e]
                if added < removed - _delta_gate(removed, added):
                    order[i : j + 1] = order[i : j + 1][::-1]
                    improved = True
                    break
            if improved:
                break
    return order


def _or_opt(d: np.ndarray, order: list[int], cands) -> list[int]:
    n = len(order)
    improved = True
    guard = 0
    while improved and guard < 10000:
        improved = False
        guard += 1
        for seg_len in (1, 2, 3):
            for i in range(1, n - seg_len + 1):
                prev = order[i - 1]
                nxt = order[(i + seg_len) % n]
                s0 = order[i]
                s1 = order[i + seg_len - 1]
                base_removed = d[prev, s0] + d[s1, nxt]
                bridge = d[prev, nxt]
                rest = order[:i] + order[i + seg_len :]
                for jp in range(len(rest)):
                    u = rest[jp]
                    if jp == i - 1:  # reinserting where it came from
                        continue
                    v = rest[(jp + 1) % len(rest)]
                    if u == prev and v == nxt:
                        continue
                    if cands is not None and s0 not in cands[u] and s1 not in cands[v]:
                        continue
                    delta = (
                        bridge + d[u, s0] + d[s1, v] - base_removed - d[u, v]
                    )
                    if delta < -_delta_gate(bridge, base_removed, d[u, v]):
                        seg = order[i : i + seg_len]
                        new_rest = rest[: jp + 1] + seg + rest[jp + 1 :]
                        # rotation keeping 0 first (segment may land before it)
                        z = new_rest.index(0)
                        order = new_rest[z:] + new_rest[:z]
                        improved = True
                        break
                if improved:
                    break
            if improved:
                break
    return order


def solve_heuristic(matrix: DistanceMatrix) -> Tour:
    """Local-search tour: best of nearest-neighbor and recorded order,
    improved by first-improvement 2-opt then Or-opt (segments of 1 to 3).

    Starting from the better of the two constructions guarantees the result
    never costs more than the recorded order.  For more than 12 points the
    scans only consider moves touching an 8-nearest-neighbor candidate edge.
    """
    n = matrix.n
    d = matrix.costs
    if n <= 2:
        return Tour(order=list(range(n)), cost=tour_cost(d, list(range(n))) if n > 1 else 0.0)
    identity = list(range(n))
    nn = _nearest_neighbor(d)
    order = nn if tour_cost(d, nn) < tour_cost(d, identity) else identity
    cands = _candidate_lists(d) if n > 12 else None
    order = _two_opt(d, list(order), cands)
    order = _or_opt(d, order, cands)
    return Tour(order=order, cost=tour_cost(d, order))


def optimize_points(
    recorded: list[InspectionPoint], gmap: GlobalMap
) -> OptimizationResult:
    """Re-sequence recorded points for the shortest closed tour.

    Unreachable points stay in the tour at sentinel cost (execution handles
    abandonment); each point's yaw and gimbal pitch ride along untouched.
    """
    matrix = build_distance_matrix(recorded, gmap)
    tour = solve_heuristic(matrix)
    recorded_cost = tour_cost(matrix.costs, list(range(matrix.n)))
    reduction = 0.0
    if recorded_cost > 0:
        reduction = (recorded_cost - tour.cost) / recorded_cost * 100.0
    unreachable = [i for i in range(1, matrix.n) if matrix.unreachable[0, i]]
    return OptimizationResult(
        points=[recorded[i] for i in tour.order],
        tour=tour,
        recorded_cost=recorded_cost,
        optimized_cost=tour.cost,
        reduction_percent=reduction,
        unreachable_points=unreachable,
    )
