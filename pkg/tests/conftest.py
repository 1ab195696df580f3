"""Shared scene builders and independent oracles for the test suite.

Oracles here deliberately avoid the package's own algorithms: graph search
goes through scipy.sparse.csgraph, inflation through scipy.ndimage dilation,
tours through itertools enumeration, and map bookkeeping through naive
reallocation.  Tests compare package output against these.
"""

from __future__ import annotations

import itertools
import math
from pathlib import Path

import numpy as np
import pytest
from scipy import ndimage
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import dijkstra as csgraph_dijkstra

from inspectsim.lidar import ScanFrame, SensorConfig, simulate_scan
from inspectsim.mapping import (
    KNOWN_FREE,
    OCCUPIED,
    OCCUPIED_INFLATION,
    NO_INFLATION,
    UNKNOWN,
    UNKNOWN_INFLATION,
    MapConfig,
    ProbabilityMap,
    neighborhood_offsets,
)
from inspectsim.world import QuadState, Scene

FIXTURES = Path(__file__).parent / "fixtures"


# ---------------------------------------------------------------------------
# scene builders


def open_scene(half: float = 25.0, scene_id: str = "open") -> Scene:
    bounds = np.array([-half, -half, -1.0, half, half, 2 * half])
    return Scene(scene_id, 0.0, bounds, np.empty((0, 6)))


def box_scene(boxes, half: float = 25.0, scene_id: str = "boxes") -> Scene:
    """boxes: iterable of (lo, hi) corner pairs, stored as flat 6-vectors."""
    bounds = np.array([-half, -half, -1.0, half, half, 2 * half])
    rows = np.asarray(boxes, dtype=np.float64).reshape(-1, 6)
    return Scene(scene_id, 0.0, bounds, rows)


def reloc_fixture_scene() -> Scene:
    from inspectsim.world import load_scene

    return load_scene(FIXTURES / "reloc_scene.json")


# ---------------------------------------------------------------------------
# map helpers


def small_map_config(**overrides) -> MapConfig:
    cfg = dict(resolution=0.2, window_extent=4.0, inflation_radius=0.4)
    cfg.update(overrides)
    return MapConfig(**cfg)


def unrolled_log_odds(prob: ProbabilityMap) -> np.ndarray:
    """Window log-odds in world-cell order, index [u] = cell origin+u."""
    w = prob.window
    arr = prob.log_odds.reshape(w, w, w)
    shift = tuple(-int(s) for s in np.mod(prob.origin, w))
    return np.roll(arr, shift, axis=(0, 1, 2))


def random_frame(rng: np.random.Generator, center: np.ndarray, stamp: float,
                 n_hits: int = 12, n_miss: int = 4, reach: float = 1.6) -> ScanFrame:
    """Synthetic sensor frame with returns scattered around the window center."""
    sensor = center + rng.uniform(-0.3, 0.3, 3)
    hits = sensor + rng.uniform(-reach, reach, (n_hits, 3))
    dirs = rng.normal(size=(n_miss, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    return ScanFrame(stamp=stamp, sensor_position=sensor, sensor_yaw=0.0,
                     returns=hits, misses=dirs)


def scan_pose_into(prob: ProbabilityMap, scene: Scene, position, frames: int,
                   sensor: SensorConfig, inflated=None, start_frame: int = 0):
    """Integrate several real frames from one pose; returns the frame list."""
    out = []
    state = QuadState(position=np.asarray(position, dtype=np.float64))
    for i in range(frames):
        frame = simulate_scan(scene, state, sensor, start_frame + i)
        batch = prob.integrate_scan(frame)
        if inflated is not None:
            inflated.apply_deltas(batch)
        out.append(frame)
    return out


# ---------------------------------------------------------------------------
# independent oracles


def dilation_inflation_oracle(prob: ProbabilityMap, unknown_enabled: bool = True) -> np.ndarray:
    """Inflated classes by scipy binary dilation over the exact offset ball."""
    offs = neighborhood_offsets(prob.config.inflation_radius, prob.res)
    m = int(np.abs(offs).max())
    size = 2 * m + 1
    structure = np.zeros((size, size, size), dtype=bool)
    structure[offs[:, 0] + m, offs[:, 1] + m, offs[:, 2] + m] = True
    cls = prob.classes_unrolled()
    occ_inf = ndimage.binary_dilation(cls == OCCUPIED, structure=structure)
    out = np.where(occ_inf, OCCUPIED_INFLATION, NO_INFLATION).astype(np.uint8)
    if unknown_enabled:
        unk_inf = ndimage.binary_dilation(cls == UNKNOWN, structure=structure)
        # space beyond the window edge counts as unknown
        w = prob.window
        idx = np.arange(w)
        edge = (idx < m) | (idx >= w - m)
        unk_inf |= edge[:, None, None] | edge[None, :, None] | edge[None, None, :]
        out[unk_inf & ~occ_inf] = UNKNOWN_INFLATION
    return out


def brute_frontiers(prob: ProbabilityMap) -> set:
    """Known-free cells with a face-adjacent in-window unknown cell."""
    cls = prob.classes_unrolled()
    w = prob.window
    out = set()
    faces = [(1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1)]
    free = np.argwhere(cls == KNOWN_FREE)
    for u in free:
        for f in faces:
            v = u + np.array(f)
            if np.all(v >= 0) and np.all(v < w) and cls[v[0], v[1], v[2]] == UNKNOWN:
                out.add(tuple(int(c) for c in (u + prob.origin)))
                break
    return out


def dijkstra_grid_cost(blocked: np.ndarray, start, goal) -> float:
    """Shortest 26-connected path cost in cell units via scipy csgraph.

    Returns inf when no path exists.  Edge weights are Euclidean offset
    lengths, matching the planner's step costs.
    """
    nx, ny, nz = blocked.shape
    n = nx * ny * nz
    free = ~blocked.astype(bool)
    idx = np.arange(n).reshape(blocked.shape)
    rows, cols, data = [], [], []
    for dx, dy, dz in itertools.product((-1, 0, 1), repeat=3):
        if dx == dy == dz == 0:
            continue
        cost = math.sqrt(dx * dx + dy * dy + dz * dz)
        src = free[max(0, -dx):nx - max(0, dx), max(0, -dy):ny - max(0, dy), max(0, -dz):nz - max(0, dz)]
        dst = free[max(0, dx):nx - max(0, -dx), max(0, dy):ny - max(0, -dy), max(0, dz):nz - max(0, -dz)]
        ok = src & dst
        s_idx = idx[max(0, -dx):nx - max(0, dx), max(0, -dy):ny - max(0, dy), max(0, -dz):nz - max(0, dz)][ok]
        d_idx = idx[max(0, dx):nx - max(0, -dx), max(0, dy):ny - max(0, -dy), max(0, dz):nz - max(0, -dz)][ok]
        rows.append(s_idx)
        cols.append(d_idx)
        data.append(np.full(s_idx.size, cost))
    graph = csr_matrix(
        (np.concatenate(data), (np.concatenate(rows), np.concatenate(cols))), shape=(n, n)
    )
    s = int(idx[tuple(start)])
    g = int(idx[tuple(goal)])
    dist = csgraph_dijkstra(graph, directed=False, indices=s, min_only=True)
    return float(dist[g])


def enumerate_closed_tours(costs: np.ndarray):
    """All fixed-start closed tour costs by brute-force permutation."""
    n = costs.shape[0]
    for perm in itertools.permutations(range(1, n)):
        order = (0,) + perm
        yield order, sum(costs[order[i], order[(i + 1) % n]] for i in range(n))


def best_tour_by_enumeration(costs: np.ndarray):
    best_order, best_cost = None, np.inf
    for order, cost in enumerate_closed_tours(costs):
        if cost < best_cost - 1e-12:
            best_order, best_cost = order, cost
    return list(best_order), best_cost


def random_tsp_costs(rng: np.random.Generator, n: int) -> np.ndarray:
    pts = rng.uniform(0.0, 10.0, (n, 2))
    d = np.linalg.norm(pts[:, None, :] - pts[None, :, :], axis=2)
    np.fill_diagonal(d, 0.0)
    return d


def segment_inside_any_box(p: np.ndarray, q: np.ndarray, boxes: np.ndarray,
                           margin: float = 0.0, samples: int = 8) -> bool:
    """True when any sample along [p, q] falls strictly inside an obstacle."""
    for t in np.linspace(0.0, 1.0, samples):
        x = p + (q - p) * t
        for row in boxes:
            if np.all(x > row[:3] + margin) and np.all(x < row[3:] - margin):
                return True
    return False


def positions_inside_obstacles(samples, boxes, margin: float = 0.0) -> int:
    """Count logged samples strictly inside any obstacle box (flat 6-vectors)."""
    n = 0
    for s in samples:
        p = s.position
        for row in boxes:
            if np.all(p > row[:3] + margin) and np.all(p < row[3:] - margin):
                n += 1
                break
    return n


RELOC_P_INIT = np.array([0.5, -0.5, 0.6])


def reloc_anchor_frames(n: int = 50, seed: int = 0, rays: int = 800):
    """Stationary scans from the relocalization room's start pose."""
    scene = reloc_fixture_scene()
    cfg = SensorConfig(rays_per_frame=rays, seed=seed)
    state = QuadState(position=RELOC_P_INIT.copy())
    return [simulate_scan(scene, state, cfg, i) for i in range(n)]


@pytest.fixture(scope="session")
def reloc_anchor():
    from inspectsim.registration import accumulate_anchor

    return accumulate_anchor(reloc_anchor_frames(), duration=5.0)


@pytest.fixture(scope="session")
def rng_factory():
    def make(seed: int) -> np.random.Generator:
        return np.random.default_rng(seed)

    return make
