import numpy as np
import pytest

from inspectsim.lidar import ScanFrame, SensorConfig
from inspectsim.mapping import (
    KNOWN_FREE,
    NO_INFLATION,
    OCCUPIED,
    OCCUPIED_INFLATION,
    UNKNOWN,
    UNKNOWN_INFLATION,
    FrontierSet,
    GlobalMap,
    InflatedMap,
    MapConfig,
    ProbabilityMap,
    attest_clear_ball,
    neighborhood_offsets,
    update_frontiers,
    update_global,
    update_inflated,
)

from conftest import (
    box_scene,
    brute_frontiers,
    dilation_inflation_oracle,
    random_frame,
    scan_pose_into,
    small_map_config,
    unrolled_log_odds,
)


def frame_at(sensor, returns=(), misses=(), stamp=0.0):
    return ScanFrame(
        stamp=stamp,
        sensor_position=np.asarray(sensor, dtype=np.float64),
        sensor_yaw=0.0,
        returns=np.asarray(returns, dtype=np.float64).reshape(-1, 3),
        misses=np.asarray(misses, dtype=np.float64).reshape(-1, 3),
    )


# -- scan integration ------------------------------------------------------


def test_single_return_cell_walk():
    # sensor at a cell center, return 1.0 m along +x: the four cells between
    # the sensor cell and the endpoint cell carve free, the endpoint marks hit
    cfg = small_map_config()
    prob = ProbabilityMap(cfg, center=(0.1, 0.1, 0.1))
    prob.integrate_scan(frame_at((0.1, 0.1, 0.1), returns=[(1.1, 0.1, 0.1)]))
    assert prob.log_odds_at((0, 0, 0)) == 0.0
    for x in range(1, 5):
        assert prob.log_odds_at((x, 0, 0)) == pytest.approx(cfg.l_miss, abs=0)
    assert prob.log_odds_at((5, 0, 0)) == pytest.approx(cfg.l_hit, abs=0)
    assert prob.log_odds_at((6, 0, 0)) == 0.0


def test_miss_ray_carves_to_cap_only():
    cfg = MapConfig(resolution=0.2, window_extent=40.0, carve_cap=15.0)
    prob = ProbabilityMap(cfg, center=(0.1, 0.1, 0.1))
    prob.integrate_scan(frame_at((0.1, 0.1, 0.1), misses=[(1.0, 0.0, 0.0)]))
    touched = [x for x in range(0, 99) if prob.log_odds_at((x, 0, 0)) != 0.0]
    assert touched, "miss ray carved nothing"
    # cells strictly within 15 m along the ray, sensor cell excluded
    assert min(touched) == 1
    assert max(touched) * cfg.resolution <= 15.0 + cfg.resolution
    for x in touched:
        assert prob.log_odds_at((x, 0, 0)) == pytest.approx(cfg.l_miss, abs=0)
        assert prob.class_of((x, 0, 0)) != OCCUPIED


def test_second_hit_flips_unknown_to_occupied():
    cfg = small_map_config(l_hit=0.85, l_occ=1.2)
    prob = ProbabilityMap(cfg, center=(0.1, 0.1, 0.1))
    hit = [(1.1, 0.1, 0.1)]
    b1 = prob.integrate_scan(frame_at((0.1, 0.1, 0.1), returns=hit))
    assert prob.class_of((5, 0, 0)) == UNKNOWN  # 0.85 < 1.2
    b2 = prob.integrate_scan(frame_at((0.1, 0.1, 0.1), returns=hit, stamp=0.1))
    assert prob.class_of((5, 0, 0)) == OCCUPIED  # 1.7 >= 1.2
    flips = {tuple(c): (o, n) for c, o, n in zip(b2.cells, b2.old, b2.new)}
    assert flips[(5, 0, 0)] == (UNKNOWN, OCCUPIED)
    assert all(n != OCCUPIED for n in b1.new)


def test_classification_boundaries_inclusive():
    # evidence sums land exactly on the thresholds: 2 * -0.4 == -0.8 and
    # 2 * 0.6 == 1.2 are exact in binary floating point
    cfg = small_map_config(l_hit=0.6, l_miss=-0.4, l_occ=1.2, l_free=-0.8)
    prob = ProbabilityMap(cfg, center=(0.1, 0.1, 0.1))
    assert prob.class_of((3, 3, 3)) == UNKNOWN  # untouched
    for _ in range(2):
        prob.integrate_scan(frame_at((0.1, 0.1, 0.1), returns=[(1.1, 0.1, 0.1)]))
    assert prob.log_odds_at((3, 0, 0)) == cfg.l_free
    assert prob.class_of((3, 0, 0)) == KNOWN_FREE
    assert prob.log_odds_at((5, 0, 0)) == cfg.l_occ
    assert prob.class_of((5, 0, 0)) == OCCUPIED


def test_log_odds_saturate_at_limits():
    cfg = small_map_config()
    prob = ProbabilityMap(cfg, center=(0.1, 0.1, 0.1))
    for k in range(30):
        prob.integrate_scan(frame_at((0.1, 0.1, 0.1), returns=[(1.1, 0.1, 0.1)], stamp=0.1 * k))
    assert prob.log_odds_at((5, 0, 0)) == cfg.l_max
    assert prob.log_odds_at((2, 0, 0)) == cfg.l_min


def test_freed_cells_lie_on_some_ray():
    # the ray pipeline never frees a cell no ray passed through
    rng = np.random.default_rng(4)
    cfg = small_map_config()
    prob = ProbabilityMap(cfg, center=(0.0, 0.0, 0.0))
    for k in range(40):
        frame = random_frame(rng, np.zeros(3), stamp=0.1 * k)
        batch = prob.integrate_scan(frame)
        freed = batch.cells[batch.new == KNOWN_FREE]
        if len(freed) == 0:
            continue
        sensor = frame.sensor_position
        ends = np.concatenate(
            [frame.returns, sensor[None, :] + frame.misses * cfg.carve_cap]
        )
        centers = (freed.astype(np.float64) + 0.5) * cfg.resolution
        seg = ends - sensor[None, :]
        seg_len2 = (seg**2).sum(axis=1)
        rel = centers[:, None, :] - sensor[None, None, :]
        t = np.clip((rel * seg[None, :, :]).sum(axis=2) / seg_len2[None, :], 0.0, 1.0)
        closest = sensor[None, None, :] + t[:, :, None] * seg[None, :, :]
        dist = np.linalg.norm(centers[:, None, :] - closest, axis=2).min(axis=1)
        # a traversed cell's center is within half a cell diagonal of its ray
        assert dist.max() <= cfg.resolution * np.sqrt(3.0) / 2.0 + 1e-9


# -- window slide ----------------------------------------------------------


def test_slide_zero_is_identity():
    cfg = small_map_config()
    prob = ProbabilityMap(cfg, center=(0.1, 0.1, 0.1))
    prob.integrate_scan(frame_at((0.1, 0.1, 0.1), returns=[(1.1, 0.1, 0.1)]))
    before = unrolled_log_odds(prob).copy()
    sr = prob.slide_to((0.15, 0.1, 0.1))  # same origin cell
    assert len(sr.left) == 0 and len(sr.entered) == 0
    assert np.array_equal(unrolled_log_odds(prob), before)


def test_slide_full_window_resets_everything():
    cfg = small_map_config()
    prob = ProbabilityMap(cfg, center=(0.1, 0.1, 0.1))
    prob.integrate_scan(frame_at((0.1, 0.1, 0.1), returns=[(1.1, 0.1, 0.1)]))
    prob.slide_to((0.1 + cfg.window_extent, 0.1, 0.1))
    assert np.all(prob.log_odds == 0.0)


def test_slide_one_cell_matches_realloc_oracle():
    cfg = small_map_config()
    prob = ProbabilityMap(cfg, center=(0.1, 0.1, 0.1))
    prob.integrate_scan(frame_at((0.1, 0.1, 0.1), returns=[(1.1, 0.1, 0.1)]))
    old = unrolled_log_odds(prob).copy()
    old_origin = prob.origin.copy()
    center_cell = old_origin + prob.window // 2
    center_val = prob.log_odds_at(center_cell)

    sr = prob.slide_to((0.1 + cfg.resolution, 0.1, 0.1))
    assert np.array_equal(sr.new_origin - sr.old_origin, [1, 0, 0])
    assert len(sr.left.cells) if len(sr.left) else True
    assert prob.log_odds_at(center_cell) == center_val

    new = unrolled_log_odds(prob)
    w = prob.window
    for u in np.ndindex(3, w, w):  # sample the moved boundary planes fully
        pass
    # every retained world cell keeps its value; entered slab is zero
    shift = sr.new_origin - sr.old_origin
    expected = np.zeros_like(new)
    expected[: w - 1, :, :] = old[1:, :, :]
    assert np.array_equal(new, expected)
    assert int(shift[0]) == 1


def test_random_slides_match_realloc_oracle():
    rng = np.random.default_rng(17)
    cfg = small_map_config()
    prob = ProbabilityMap(cfg, center=(0.0, 0.0, 0.0))
    value_by_cell: dict = {}
    center = np.zeros(3)
    for trial in range(12):
        for k in range(4):
            prob.integrate_scan(random_frame(rng, center, stamp=trial + 0.1 * k))
        # oracle state: world-cell dictionary of current window contents
        arr = unrolled_log_odds(prob)
        value_by_cell = {
            tuple(prob.origin + np.array(u)): arr[u]
            for u in np.ndindex(*arr.shape)
            if arr[u] != 0.0
        }
        center = center + rng.uniform(-0.7, 0.7, 3)
        prob.slide_to(center)
        arr2 = unrolled_log_odds(prob)
        for u in np.ndindex(*arr2.shape):
            cell = tuple(prob.origin + np.array(u))
            assert arr2[u] == value_by_cell.get(cell, 0.0)


# -- inflation -------------------------------------------------------------


def test_offsets_ball_is_boundary_inclusive():
    offs = neighborhood_offsets(0.4, 0.2)
    d = np.linalg.norm(offs, axis=1) * 0.2
    assert d.max() == pytest.approx(0.4, abs=1e-9)
    assert [0, 0, 2] in offs.tolist()
    assert [2, 1, 0] not in offs.tolist()  # 0.447 m is outside


def test_empty_delta_changes_nothing():
    cfg = small_map_config()
    prob = ProbabilityMap(cfg, center=(0.0, 0.0, 0.0))
    inflated = InflatedMap(prob)
    before = inflated.classes_unrolled().copy()
    from inspectsim.mapping import DeltaBatch

    out = update_inflated(inflated, DeltaBatch.empty())
    assert len(out) == 0
    assert np.array_equal(inflated.classes_unrolled(), before)


def test_single_occupied_cell_inflates_ball():
    cfg = small_map_config()
    prob = ProbabilityMap(cfg, center=(0.1, 0.1, 0.1))
    inflated = InflatedMap(prob)
    sensor = (0.1, 0.1, 0.1)
    for _ in range(2):
        batch = prob.integrate_scan(frame_at(sensor, returns=[(1.1, 0.1, 0.1)]))
        inflated.apply_deltas(batch)
    offs = neighborhood_offsets(cfg.inflation_radius, cfg.resolution)
    occ_cell = np.array([5, 0, 0])
    for off in offs:
        cell = occ_cell + off
        if prob.in_window(cell):
            assert inflated.class_of(cell) == OCCUPIED_INFLATION
    # just outside the ball along +x
    assert inflated.class_of(occ_cell + (3, 0, 0)) != OCCUPIED_INFLATION


def test_unknown_inflation_toggle():
    cfg = small_map_config(unknown_inflation=False)
    prob = ProbabilityMap(cfg, center=(0.0, 0.0, 0.0))
    inflated = InflatedMap(prob)
    cls = inflated.classes_unrolled()
    assert np.all(cls == NO_INFLATION)


def test_incremental_inflation_matches_scratch_and_dilation():
    rng = np.random.default_rng(23)
    cfg = small_map_config()
    prob = ProbabilityMap(cfg, center=(0.0, 0.0, 0.0))
    inflated = InflatedMap(prob)
    for trial in range(30):
        batch = prob.integrate_scan(random_frame(rng, np.zeros(3), stamp=float(trial)))
        update_inflated(inflated, batch)
        scratch = InflatedMap(prob)
        assert np.array_equal(inflated.classes_unrolled(), scratch.classes_unrolled())
    assert np.array_equal(inflated.classes_unrolled(), dilation_inflation_oracle(prob))


def test_inflation_survives_slides():
    rng = np.random.default_rng(29)
    cfg = small_map_config()
    prob = ProbabilityMap(cfg, center=(0.0, 0.0, 0.0))
    inflated = InflatedMap(prob)
    center = np.zeros(3)
    for trial in range(10):
        batch = prob.integrate_scan(random_frame(rng, center, stamp=float(trial)))
        inflated.apply_deltas(batch)
        center = center + rng.uniform(-0.5, 0.5, 3)
        sr = prob.slide_to(center)
        inflated.apply_slide(sr)
        assert np.array_equal(
            inflated.classes_unrolled(), InflatedMap(prob).classes_unrolled()
        )


# -- frontiers -------------------------------------------------------------


def test_unknown_map_has_no_frontiers():
    prob = ProbabilityMap(small_map_config(), center=(0.0, 0.0, 0.0))
    assert FrontierSet(prob).cells == set()


def test_lone_free_cell_is_sole_frontier():
    cfg = small_map_config()
    prob = ProbabilityMap(cfg, center=(0.1, 0.1, 0.1))
    cell = prob.cell_of((0.5, 0.5, 0.5))
    prob.observe_free_cells(cell[None, :])
    fs = FrontierSet(prob)
    assert fs.cells == {tuple(int(c) for c in cell)}


def test_incremental_frontiers_match_brute_force():
    rng = np.random.default_rng(31)
    cfg = small_map_config()
    prob = ProbabilityMap(cfg, center=(0.0, 0.0, 0.0))
    fs = FrontierSet(prob)
    for trial in range(30):
        batch = prob.integrate_scan(random_frame(rng, np.zeros(3), stamp=float(trial)))
        update_frontiers(fs, batch)
        assert fs.cells == brute_frontiers(prob)


def test_frontiers_track_slides():
    rng = np.random.default_rng(37)
    cfg = small_map_config()
    prob = ProbabilityMap(cfg, center=(0.0, 0.0, 0.0))
    fs = FrontierSet(prob)
    center = np.zeros(3)
    for trial in range(8):
        batch = prob.integrate_scan(random_frame(rng, center, stamp=float(trial)))
        fs.apply_deltas(batch)
        center = center + rng.uniform(-0.6, 0.6, 3)
        sr = prob.slide_to(center)
        fs.apply_slide(sr)
        assert fs.cells == brute_frontiers(prob)


# -- coarse global map -----------------------------------------------------


def test_global_map_conservative_on_unknown():
    prob = ProbabilityMap(small_map_config(), center=(0.0, 0.0, 0.0))
    gmap = GlobalMap(center=(0.0, 0.0, 0.0), resolution=0.5, extent=20.0)
    update_global(gmap, prob)
    assert not gmap.free_at(gmap.cell_of((0.0, 0.0, 0.0)))


def test_global_map_free_when_fine_cells_free():
    cfg = small_map_config()
    prob = ProbabilityMap(cfg, center=(0.0, 0.0, 0.0))
    prob.observe_free_ball((0.0, 0.0, 0.0), 1.2)
    gmap = GlobalMap(center=(0.0, 0.0, 0.0), resolution=0.5, extent=20.0)
    update_global(gmap, prob)
    assert gmap.free_at(gmap.cell_of((0.0, 0.0, 0.0)))


def test_global_map_occupied_fine_cell_blocks_coarse():
    cfg = small_map_config()
    prob = ProbabilityMap(cfg, center=(0.1, 0.1, 0.1))
    prob.observe_free_ball((0.1, 0.1, 0.1), 1.4)
    for _ in range(3):  # out-vote the free evidence on one fine cell
        prob.integrate_scan(frame_at((0.1, 0.1, 0.1), returns=[(0.9, 0.1, 0.1)]))
    assert prob.class_of((4, 0, 0)) == OCCUPIED
    gmap = GlobalMap(center=(0.0, 0.0, 0.0), resolution=0.5, extent=20.0)
    update_global(gmap, prob)
    coarse = gmap.cell_of(prob.center_of((4, 0, 0)))
    assert not gmap.free_at(coarse)


def test_global_snapshot_round_trip(tmp_path):
    rng = np.random.default_rng(41)
    cfg = small_map_config()
    prob = ProbabilityMap(cfg, center=(0.0, 0.0, 0.0))
    prob.observe_free_ball((0.0, 0.0, 0.0), 1.0)
    for k in range(6):
        prob.integrate_scan(random_frame(rng, np.zeros(3), stamp=float(k)))
    gmap = GlobalMap(center=(0.0, 0.0, 0.0), resolution=0.5, extent=20.0)
    update_global(gmap, prob)
    path = tmp_path / "gmap.bin"
    gmap.export_snapshot(path)
    back = GlobalMap.from_snapshot(path)
    assert back.res == gmap.res
    assert np.array_equal(back.free, gmap.free)
    assert np.array_equal(back.origin, gmap.origin)


# -- launch attest ---------------------------------------------------------


def test_attest_frees_reachable_unknown_only():
    cfg = small_map_config()
    prob = ProbabilityMap(cfg, center=(0.1, 0.1, 0.1))
    sensor = (0.1, 0.1, 0.1)
    # observe one occupied cell a metre ahead
    for _ in range(2):
        prob.integrate_scan(frame_at(sensor, returns=[(1.1, 0.1, 0.1)]))
    assert prob.class_of((5, 0, 0)) == OCCUPIED
    batch = attest_clear_ball(prob, sensor, 1.6)
    assert len(batch) > 0
    assert all(n == KNOWN_FREE for n in batch.new)
    # open space off to the side is now free
    assert prob.class_of(prob.cell_of((0.1, 1.0, 0.1))) == KNOWN_FREE
    # cells directly behind the observed cell stay unknown
    assert prob.class_of((6, 0, 0)) == UNKNOWN
    assert prob.class_of((7, 0, 0)) == UNKNOWN


def test_attest_preserves_occupied_evidence():
    cfg = small_map_config()
    prob = ProbabilityMap(cfg, center=(0.1, 0.1, 0.1))
    for _ in range(2):
        prob.integrate_scan(frame_at((0.1, 0.1, 0.1), returns=[(1.1, 0.1, 0.1)]))
    before = prob.log_odds_at((5, 0, 0))
    attest_clear_ball(prob, (0.1, 0.1, 0.1), 1.6)
    assert prob.log_odds_at((5, 0, 0)) == before
    assert prob.class_of((5, 0, 0)) == OCCUPIED
