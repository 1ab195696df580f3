"""Probabilistic local occupancy mapping with zero-copy sliding, inflation,
frontier tracking, and a coarse latching global map.

The local map is a cubic window of log-odds cells stored in a ring buffer:
sliding the window re-labels storage (index arithmetic only) and resets just
the vacated cells.  Cell classes derive from thresholds on the log-odds.  The
inflated companion map maintains per-cell counts of occupied/unknown sources
within the inflation radius so class changes update incrementally; space
outside the window counts as unknown, which appears as an analytic boundary
shell rather than stored counts.

Conventions: world cell = floor(position / resolution) per axis; a window
with origin o covers world cells [o, o + window) and world cell w lives at
storage index w mod window on each axis.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .kernels import (
    KNOWN_FREE,
    NO_INFLATION,
    OCCUPIED,
    OCCUPIED_INFLATION,
    OUTSIDE,
    UNKNOWN,
    UNKNOWN_INFLATION,
)
from .lidar import ScanFrame

MAP_SNAPSHOT_MAGIC = b"IMAP"
MAP_SNAPSHOT_VERSION = 1


@dataclass
class MapConfig:
    """Local map geometry and log-odds parameters."""

    resolution: float = 0.2  # [m]
    window_extent: float = 30.0  # [m] cube edge
    l_hit: float = 0.85
    l_miss: float = -0.41
    l_min: float = -2.0
    l_max: float = 4.0
    l_occ: float = 1.2  # >= occupied (inclusive)
    l_free: float = -0.8  # <= known-free (inclusive)
    inflation_radius: float = 0.4  # [m]
    unknown_inflation: bool = True
    carve_cap: float = 15.0  # [m] max carve distance for rays with no return

    def validate(self) -> None:
        if self.resolution <= 0 or self.window_extent <= 0:
            raise ValueError("resolution and window_extent must be positive")
        if not (self.l_min <= self.l_free < self.l_occ <= self.l_max):
            raise ValueError("log-odds thresholds must satisfy l_min <= l_free < l_occ <= l_max")
        if self.l_hit <= 0 or self.l_miss >= 0:
            raise ValueError("l_hit must be positive and l_miss negative")
        if self.inflation_radius < 0 or self.carve_cap <= 0:
            raise ValueError("inflation_radius must be >= 0 and carve_cap > 0")

    @property
    def window_cells(self) -> int:
        return int(round(self.window_extent / self.resolution))


@dataclass
class DeltaBatch:
    """Cells whose class changed: world cells with old and new class codes."""

    cells: np.ndarray  # (k, 3) int64
    old: np.ndarray  # (k,) uint8
    new: np.ndarray  # (k,) uint8

    @classmethod
    def empty(cls) -> "DeltaBatch":
        return cls(
            np.empty((0, 3), np.int64), np.empty(0, np.uint8), np.empty(0, np.uint8)
        )

    def __len__(self) -> int:
        return self.cells.shape[0]


@dataclass
class SlideResult:
    """Bookkeeping from one window slide."""

    left: DeltaBatch  # old class -> OUTSIDE, covers exactly the vacated region
    entered: DeltaBatch  # OUTSIDE -> UNKNOWN
    old_origin: np.ndarray
    new_origin: np.ndarray


def _box_diff_slabs(a_lo, a_hi, b_lo, b_hi):
    """Disjoint slabs covering box A minus box B (world cell coords, half-open)."""
    rl = list(a_lo)
    rh = list(a_hi)
    slabs = []
    for axis in range(3):
        lo_end = min(max(b_lo[axis], rl[axis]), rh[axis])
        if lo_end > rl[axis]:
            lo = rl.copy()
            hi = rh.copy()
            hi[axis] = lo_end
            slabs.append((lo, hi))
            rl[axis] = lo_end
        hi_start = max(min(b_hi[axis], rh[axis]), rl[axis])
        if hi_start < rh[axis]:
            lo = rl.copy()
            hi = rh.copy()
            lo[axis] = hi_start
            slabs.append((lo, hi))
            rh[axis] = hi_start
        if rl[axis] >= rh[axis]:
            break
    return slabs


def _slab_cells(lo, hi) -> np.ndarray:
    xs = np.arange(lo[0], hi[0], dtype=np.int64)
    ys = np.arange(lo[1], hi[1], dtype=np.int64)
    zs = np.arange(lo[2], hi[2], dtype=np.int64)
    grid = np.meshgrid(xs, ys, zs, indexing="ij")
    return np.stack([g.ravel() for g in grid], axis=1)


def neighborhood_offsets(radius: float, resolution: float) -> np.ndarray:
    """Integer cell offsets whose centre distance is within radius (incl. self)."""
    r_cells = int(np.floor(radius / resolution + 1e-9))
    rng = np.arange(-r_cells, r_cells + 1, dtype=np.int64)
    grid = np.meshgrid(rng, rng, rng, indexing="ij")
    offs = np.stack([g.ravel() for g in grid], axis=1)
    dist = np.sqrt((offs.astype(np.float64) ** 2).sum(axis=1)) * resolution
    keep = dist <= radius + 1e-9
    return np.ascontiguousarray(offs[keep])


class ProbabilityMap:
    """Ring-buffered log-odds occupancy window."""

    def __init__(self, config: MapConfig, center) -> None:
        config.validate()
        self.config = config
        self.window = config.window_cells
        self.res = config.resolution
        w = self.window
        self.log_odds = np.zeros(w * w * w, np.float64)
        self.origin = self._origin_for(np.asarray(center, dtype=np.float64))
        # scan-integration scratch
        self._delta_acc = np.zeros(w * w * w, np.float64)
        self._touched_mark = np.zeros(w * w * w, np.uint8)
        self._touched_buf = np.empty((0, 4), np.int64)

    def _origin_for(self, center: np.ndarray) -> np.ndarray:
        cell = np.floor(center / self.res).astype(np.int64)
        return cell - self.window // 2

    # -- coordinate helpers ------------------------------------------------

    def cell_of(self, point) -> np.ndarray:
        return np.floor(np.asarray(point, dtype=np.float64) / self.res).astype(np.int64)

    def center_of(self, cell) -> np.ndarray:
        return (np.asarray(cell, dtype=np.float64) + 0.5) * self.res

    def in_window(self, cell) -> bool:
        u = np.asarray(cell, dtype=np.int64) - self.origin
        return bool(np.all(u >= 0) and np.all(u < self.window))

    def _flat(self, cells: np.ndarray) -> np.ndarray:
        w = self.window
        m = np.mod(cells, w)
        return (m[..., 0] * w + m[..., 1]) * w + m[..., 2]

    def log_odds_at(self, cell) -> float:
        if not self.in_window(cell):
            raise KeyError(f"cell {tuple(int(c) for c in np.atleast_1d(cell))} outside window")
        return float(self.log_odds[self._flat(np.asarray(cell, dtype=np.int64))])

    def class_of(self, cell) -> int:
        lo = self.log_odds_at(cell)
        if lo >= self.config.l_occ:
            return OCCUPIED
        if lo <= self.config.l_free:
            return KNOWN_FREE
        return UNKNOWN

    def classes_storage(self) -> np.ndarray:
        c = self.config
        lo = self.log_odds
        out = np.where(
            lo >= c.l_occ, OCCUPIED, np.where(lo <= c.l_free, KNOWN_FREE, UNKNOWN)
        ).astype(np.uint8)
        return out.reshape(self.window, self.window, self.window)

    def classes_unrolled(self) -> np.ndarray:
        """(W, W, W) uint8 ordered by world cell: index u maps to origin + u."""
        o = np.mod(self.origin, self.window)
        return np.roll(self.classes_storage(), tuple(-o), axis=(0, 1, 2))

    # -- updates -----------------------------------------------------------

    def integrate_scan(self, frame: ScanFrame, carve_cap: float | None = None) -> DeltaBatch:
        """Fold one scan frame into the grid; returns cells that changed class.

        Returns carve misses along the ray and a hit at the endpoint cell;
        range-capped misses carve up to carve_cap.  Segments outside the
        window are truncated.  The frame pose must be inside the window.
        """
        cap_dist = self.config.carve_cap if carve_cap is None else carve_cap
        sensor = np.asarray(frame.sensor_position, dtype=np.float64)
        if not self.in_window(self.cell_of(sensor)):
            raise ValueError("scan pose outside the map window")
        n_ret = frame.returns.shape[0]
        n_miss = frame.misses.shape[0]
        pts = np.empty((n_ret + n_miss, 3), np.float64)
        is_hit = np.zeros(n_ret + n_miss, np.uint8)
        if n_ret:
            pts[:n_ret] = frame.returns
            is_hit[:n_ret] = 1
        if n_miss:
            pts[n_ret:] = sensor[None, :] + frame.misses * cap_dist
        need = (n_ret + n_miss) * (3 * self.window + 6)
        need = min(need, self.window**3 + 8)
        if self._touched_buf.shape[0] < need:
            self._touched_buf = np.empty((need, 4), np.int64)
        c = self.config
        cells, old, new = kernels.carve_frame(
            self.log_odds,
            self.origin,
            self.window,
            self.res,
            sensor,
            pts,
            is_hit,
            c.l_hit,
            c.l_miss,
            c.l_min,
            c.l_max,
            c.l_occ,
            c.l_free,
            self._delta_acc,
            self._touched_mark,
            self._touched_buf,
        )
        return DeltaBatch(cells.copy(), old.copy(), new.copy())

    def observe_free_cells(self, cells: np.ndarray) -> DeltaBatch:
        """Drop the given unknown cells to the known-free threshold.

        Out-of-window cells are ignored; occupied evidence is left alone so
        real obstacles keep inflating.
        """
        cells = np.asarray(cells, dtype=np.int64).reshape(-1, 3)
        u = cells - self.origin
        cells = cells[np.all((u >= 0) & (u < self.window), axis=1)]
        if cells.shape[0] == 0:
            return DeltaBatch.empty()
        idx = self._flat(cells)
        lo = self.log_odds[idx]
        c = self.config
        unknown = (lo > c.l_free) & (lo < c.l_occ)
        cells = cells[unknown]
        if cells.shape[0] == 0:
            return DeltaBatch.empty()
        self.log_odds[idx[unknown]] = c.l_free
        return DeltaBatch(
            np.ascontiguousarray(cells),
            np.full(cells.shape[0], UNKNOWN, np.uint8),
            np.full(cells.shape[0], KNOWN_FREE, np.uint8),
        )

    def observe_free_ball(self, center, radius: float) -> DeltaBatch:
        """Mark the ball the vehicle's body sweeps as observed free space.

        The sensor cannot look straight down, so cells under a hover point
        would stay unknown forever and inflation would swallow the vehicle's
        own cell.  Unknown cells within radius drop to the known-free
        threshold; occupied evidence is left alone so real obstacles keep
        inflating.
        """
        cells = self.cell_of(center)[None, :] + neighborhood_offsets(radius, self.res)
        return self.observe_free_cells(cells)

    def slide_to(self, center) -> SlideResult:
        """Re-centre the window; vacated cells reset to unknown in place."""
        new_origin = self._origin_for(np.asarray(center, dtype=np.float64))
        old_origin = self.origin.copy()
        if np.array_equal(new_origin, old_origin):
            return SlideResult(DeltaBatch.empty(), DeltaBatch.empty(), old_origin, new_origin)
        w = self.window
        old_box = (old_origin, old_origin + w)
        new_box = (new_origin, new_origin + w)
        left_cells = []
        left_cls = []
        for lo, hi in _box_diff_slabs(old_box[0], old_box[1], new_box[0], new_box[1]):
            cells = _slab_cells(lo, hi)
            left_cells.append(cells)
            left_cls.append(
                kernels.gather_classes(
                    self.log_odds, w, cells, self.config.l_occ, self.config.l_free
                )
            )
            kernels.zero_cells(self.log_odds, w, cells)
        entered_cells = [
            _slab_cells(lo, hi)
            for lo, hi in _box_diff_slabs(new_box[0], new_box[1], old_box[0], old_box[1])
        ]
        self.origin = new_origin

        def _cat(parts, dtype, width=None):
            if not parts:
                return (
                    np.empty((0, 3), dtype) if width else np.empty(0, dtype)
                )
            return np.concatenate(parts)

        lc = _cat(left_cells, np.int64, width=3)
        lo_cls = _cat(left_cls, np.uint8)
        ec = _cat(entered_cells, np.int64, width=3)
        left = DeltaBatch(lc, lo_cls, np.full(len(lc), OUTSIDE, np.uint8))
        entered = DeltaBatch(
            ec, np.full(len(ec), OUTSIDE, np.uint8), np.full(len(ec), UNKNOWN, np.uint8)
        )
        return SlideResult(left, entered, old_origin, new_origin)

    # -- persistence -------------------------------------------------------

    def export_snapshot(self, path) -> None:
        save_class_snapshot(path, self.res, self.origin, self.classes_unrolled())


def save_class_snapshot(path, resolution: float, origin_cell, classes: np.ndarray) -> None:
    """Run-length-encoded cell class snapshot.

    Layout (little-endian): magic "IMAP", uint16 version, float64 resolution,
    int64[3] origin cell, uint32[3] shape, uint32 run count, then runs of
    (uint32 length, uint8 class) over C-order flattened classes.
    """
    flat = np.ascontiguousarray(classes, dtype=np.uint8).ravel()
    if flat.size == 0:
        raise ValueError("empty class grid")
    boundaries = np.flatnonzero(np.diff(flat)) + 1
    starts = np.concatenate([[0], boundaries])
    ends = np.concatenate([boundaries, [flat.size]])
    lengths = (ends - starts).astype(np.uint32)
    values = flat[starts]
    with open(path, "wb") as fh:
        fh.write(MAP_SNAPSHOT_MAGIC)
        fh.write(struct.pack("<H", MAP_SNAPSHOT_VERSION))
        fh.write(struct.pack("<d", resolution))
        fh.write(struct.pack("<3q", *[int(v) for v in origin_cell]))
        fh.write(struct.pack("<3I", *classes.shape))
        fh.write(struct.pack("<I", len(lengths)))
        rec = np.empty(len(lengths), dtype=[("len", "<u4"), ("val", "u1")])
        rec["len"] = lengths
        rec["val"] = values
        fh.write(rec.tobytes())


def load_class_snapshot(path):
    """Inverse of save_class_snapshot: (resolution, origin_cell, classes)."""
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != MAP_SNAPSHOT_MAGIC:
        raise ValueError("not a map snapshot (bad magic)")
    (version,) = struct.unpack_from("<H", data, 4)
    if version != MAP_SNAPSHOT_VERSION:
        raise ValueError(f"unsupported map snapshot version {version}")
    (resolution,) = struct.unpack_from("<d", data, 6)
    origin = np.array(struct.unpack_from("<3q", data, 14), np.int64)
    shape = struct.unpack_from("<3I", data, 38)
    (n_runs,) = struct.unpack_from("<I", data, 50)
    rec = np.frombuffer(data, dtype=[("len", "<u4"), ("val", "u1")], count=n_runs, offset=54)
    classes = np.repeat(rec["val"], rec["len"].astype(np.int64))
    expect = shape[0] * shape[1] * shape[2]
    if classes.size != expect:
        raise ValueError("snapshot run lengths do not match shape")
    return resolution, origin, classes.reshape(shape)


class InflatedMap:
    """Robot-size expansion of the probability map, maintained incrementally.

    A cell is occupied-inflated when any occupied cell sits within the
    inflation radius; otherwise unknown-inflated when unknown inflation is
    enabled and an unknown cell (or space beyond the window edge) is within
    the radius; otherwise traversable.
    """

    def __init__(self, prob: ProbabilityMap) -> None:
        self.prob = prob
        cfg = prob.config
        self.offsets = neighborhood_offsets(cfg.inflation_radius, cfg.resolution)
        self.shell_margin = int(np.max(np.abs(self.offsets)))
        self.unknown_enabled = cfg.unknown_inflation
        w = prob.window
        self.occ_count = np.zeros(w * w * w, np.int32)
        self.unk_count = np.zeros(w * w * w, np.int32)
        self._mark = np.zeros(w * w * w, np.uint8)
        self._neigh_buf = np.empty((0, 4), np.int64)
        self._recount_window()

    def _recount_window(self) -> None:
        p = self.prob
        kernels.recount_box(
            p.log_odds,
            self.occ_count,
            self.unk_count,
            p.origin,
            p.window,
            p.origin,
            p.origin + p.window,
            self.offsets,
            p.config.l_occ,
            p.config.l_free,
        )

    # -- queries -----------------------------------------------------------

    def class_of(self, cell) -> int:
        p = self.prob
        if not p.in_window(cell):
            raise KeyError("cell outside window")
        cell = np.asarray(cell, dtype=np.int64)
        flat = int(p._flat(cell))
        if self.occ_count[flat] > 0:
            return OCCUPIED_INFLATION
        if self.unknown_enabled:
            u = cell - p.origin
            m = self.shell_margin
            if np.any(u < m) or np.any(u >= p.window - m) or self.unk_count[flat] > 0:
                return UNKNOWN_INFLATION
        return NO_INFLATION

    def classes_unrolled(self) -> np.ndarray:
        p = self.prob
        w = p.window
        occ = (self.occ_count.reshape(w, w, w) > 0)
        unk = (self.unk_count.reshape(w, w, w) > 0)
        o = np.mod(p.origin, w)
        occ = np.roll(occ, tuple(-o), axis=(0, 1, 2))
        unk = np.roll(unk, tuple(-o), axis=(0, 1, 2))
        out = np.full((w, w, w), NO_INFLATION, np.uint8)
        if self.unknown_enabled:
            m = self.shell_margin
            shell = np.zeros((w, w, w), bool)
            if m > 0:
                shell[:m] = shell[-m:] = True
                shell[:, :m] = shell[:, -m:] = True
                shell[:, :, :m] = shell[:, :, -m:] = True
            out[unk | shell] = UNKNOWN_INFLATION
        out[occ] = OCCUPIED_INFLATION
        return out

    def blocked_crop(self, lo_cell, hi_cell) -> np.ndarray:
        """uint8 blocked mask for world cells [lo, hi) (must be in-window)."""
        p = self.prob
        lo = np.asarray(lo_cell, np.int64)
        hi = np.asarray(hi_cell, np.int64)
        u_lo = lo - p.origin
        u_hi = hi - p.origin
        if np.any(u_lo < 0) or np.any(u_hi > p.window):
            raise ValueError("crop extends outside window")
        w = p.window
        idx = [np.mod(np.arange(lo[a], hi[a]), w) for a in range(3)]
        occ3 = self.occ_count.reshape(w, w, w)
        unk3 = self.unk_count.reshape(w, w, w)
        sel = np.ix_(idx[0], idx[1], idx[2])
        blocked = occ3[sel] > 0
        if self.unknown_enabled:
            unk = unk3[sel] > 0
            m = self.shell_margin
            for a in range(3):
                coords = np.arange(lo[a], hi[a]) - p.origin[a]
                shell_a = (coords < m) | (coords >= w - m)
                shape = [1, 1, 1]
                shape[a] = shell_a.size
                unk |= shell_a.reshape(shape)
            blocked = blocked | unk
        return blocked.astype(np.uint8)

    # -- updates -----------------------------------------------------------

    def apply_deltas(self, batch: DeltaBatch) -> DeltaBatch:
        """Propagate occupancy class changes (window origin unchanged)."""
        if len(batch) == 0:
            return DeltaBatch.empty()
        p = self.prob
        need = len(batch) * self.offsets.shape[0]
        if self._neigh_buf.shape[0] < need:
            self._neigh_buf = np.empty((need, 4), np.int64)
        cells, old, new = kernels.inflation_apply_and_diff(
            self.occ_count,
            self.unk_count,
            p.origin,
            p.window,
            batch.cells,
            batch.old,
            batch.new,
            self.offsets,
            1 if self.unknown_enabled else 0,
            self.shell_margin,
            self._mark,
            self._neigh_buf,
        )
        return DeltaBatch(cells.copy(), old.copy(), new.copy())

    def apply_slide(self, sr: SlideResult) -> DeltaBatch:
        """Mirror a window slide; returns all inflation class changes.

        Must be called after ProbabilityMap.slide_to, before other updates.
        """
        if np.array_equal(sr.old_origin, sr.new_origin):
            return DeltaBatch.empty()
        p = self.prob
        w = p.window
        # classes under the old origin, after counts but before any maintenance:
        # counts still describe the old window contents
        old_classes = kernels.inflated_classes_box(
            self.occ_count,
            self.unk_count,
            sr.old_origin,
            w,
            sr.old_origin,
            sr.old_origin + w,
            1 if self.unknown_enabled else 0,
            self.shell_margin,
        ).reshape(w, w, w)
        # remove contributions of cells that left, add entering unknown sources
        kernels.apply_count_deltas(
            self.occ_count, self.unk_count, sr.new_origin, w,
            sr.left.cells, sr.left.old, sr.left.new, self.offsets,
        )
        kernels.apply_count_deltas(
            self.occ_count, self.unk_count, sr.new_origin, w,
            sr.entered.cells, sr.entered.old, sr.entered.new, self.offsets,
        )
        # entering cells' own counts are stale storage: rebuild them outright
        for lo, hi in _box_diff_slabs(
            sr.new_origin, sr.new_origin + w, sr.old_origin, sr.old_origin + w
        ):
            kernels.recount_box(
                p.log_odds,
                self.occ_count,
                self.unk_count,
                sr.new_origin,
                w,
                np.asarray(lo, np.int64),
                np.asarray(hi, np.int64),
                self.offsets,
                p.config.l_occ,
                p.config.l_free,
            )
        new_classes = kernels.inflated_classes_box(
            self.occ_count,
            self.unk_count,
            sr.new_origin,
            w,
            sr.new_origin,
            sr.new_origin + w,
            1 if self.unknown_enabled else 0,
            self.shell_margin,
        ).reshape(w, w, w)
        # align the old snapshot onto the new window; cells that were outside
        # the old window report OUTSIDE as their previous class
        shift = sr.new_origin - sr.old_origin
        old_aligned = np.full((w, w, w), OUTSIDE, np.uint8)
        src_lo = np.maximum(shift, 0)
        src_hi = np.minimum(shift + w, w)
        if np.all(src_lo < src_hi):
            dst_lo = src_lo - shift
            old_aligned[
                dst_lo[0] - 0 : dst_lo[0] + (src_hi[0] - src_lo[0]),
                dst_lo[1] : dst_lo[1] + (src_hi[1] - src_lo[1]),
                dst_lo[2] : dst_lo[2] + (src_hi[2] - src_lo[2]),
            ] = old_classes[
                src_lo[0] : src_hi[0], src_lo[1] : src_hi[1], src_lo[2] : src_hi[2]
            ]
        diff = old_aligned != new_classes
        idx = np.argwhere(diff)
        cells = idx + sr.new_origin[None, :]
        return DeltaBatch(
            cells.astype(np.int64),
            old_aligned[diff].copy(),
            new_classes[diff].copy(),
        )


class FrontierSet:
    """Known-free cells adjacent (faces) to an in-window unknown cell."""

    _FACES = np.array(
        [[1, 0, 0], [-1, 0, 0], [0, 1, 0], [0, -1, 0], [0, 0, 1], [0, 0, -1]],
        np.int64,
    )

    def __init__(self, prob: ProbabilityMap) -> None:
        self.prob = prob
        self.cells: set[tuple[int, int, int]] = set()
        self._rebuild()

    def __contains__(self, cell) -> bool:
        return tuple(int(c) for c in cell) in self.cells

    def __len__(self) -> int:
        return len(self.cells)

    def _rebuild(self) -> None:
        self.cells = self._compute_full()

    def _compute_full(self) -> set[tuple[int, int, int]]:
        grid = self.prob.classes_unrolled()
        free = grid == KNOWN_FREE
        if not free.any():
            return set()
        unknown = grid == UNKNOWN
        adj = np.zeros_like(free)
        adj[:-1] |= unknown[1:]
        adj[1:] |= unknown[:-1]
        adj[:, :-1] |= unknown[:, 1:]
        adj[:, 1:] |= unknown[:, :-1]
        adj[:, :, :-1] |= unknown[:, :, 1:]
        adj[:, :, 1:] |= unknown[:, :, :-1]
        members = np.argwhere(free & adj) + self.prob.origin[None, :]
        return set(map(tuple, members.tolist()))

    def _membership(self, cand: np.ndarray) -> np.ndarray:
        """Vectorized frontier predicate for candidate world cells (in-window)."""
        p = self.prob
        cfg = p.config
        cls = kernels.gather_classes(p.log_odds, p.window, cand, cfg.l_occ, cfg.l_free)
        is_free = cls == KNOWN_FREE
        any_unknown = np.zeros(len(cand), bool)
        for face in self._FACES:
            n = cand + face[None, :]
            u = n - p.origin[None, :]
            inw = np.all((u >= 0) & (u < p.window), axis=1)
            if inw.any():
                ncls = kernels.gather_classes(
                    p.log_odds, p.window, np.ascontiguousarray(n[inw]), cfg.l_occ, cfg.l_free
                )
                sel = np.zeros(len(cand), bool)
                sel[inw] = ncls == UNKNOWN
                any_unknown |= sel
        return is_free & any_unknown

    def apply_deltas(self, batch: DeltaBatch) -> tuple[set, set]:
        """Refresh membership around changed cells; returns (added, removed)."""
        if len(batch) == 0:
            return set(), set()
        p = self.prob
        cand = np.concatenate(
            [batch.cells] + [batch.cells + f[None, :] for f in self._FACES]
        )
        cand = np.unique(cand, axis=0)
        u = cand - p.origin[None, :]
        cand = cand[np.all((u >= 0) & (u < p.window), axis=1)]
        if len(cand) == 0:
            return set(), set()
        member = self._membership(np.ascontiguousarray(cand))
        tuples = list(map(tuple, cand.tolist()))
        added = set()
        removed = set()
        for t, m in zip(tuples, member):
            if m and t not in self.cells:
                self.cells.add(t)
                added.add(t)
            elif not m and t in self.cells:
                self.cells.discard(t)
                removed.add(t)
        return added, removed

    def apply_slide(self, sr: SlideResult) -> tuple[set, set]:
        """Recompute after a window slide; returns (added, removed)."""
        if np.array_equal(sr.old_origin, sr.new_origin):
            return set(), set()
        old = self.cells
        new = self._compute_full()
        self.cells = new
        return new - old, old - new


# -- module-level op wrappers (gateway and tests use these names) ----------


def integrate_scan(prob: ProbabilityMap, frame: ScanFrame, carve_cap: float | None = None) -> DeltaBatch:
    return prob.integrate_scan(frame, carve_cap)


def slide_window(prob: ProbabilityMap, center) -> SlideResult:
    return prob.slide_to(center)


def update_inflated(inflated: InflatedMap, batch: DeltaBatch) -> DeltaBatch:
    return inflated.apply_deltas(batch)


def update_frontiers(frontiers: FrontierSet, batch: DeltaBatch) -> tuple[set, set]:
    return frontiers.apply_deltas(batch)


def attest_clear_ball(prob: ProbabilityMap, center, radius: float) -> DeltaBatch:
    """Declare the launch volume around center clear of obstacles.

    Models the operator's pre-arming visual check: unknown cells within
    radius become known free, but only where the straight line from center
    is unobstructed by cells already observed occupied, so obstacle
    interiors and pockets behind observed surfaces stay unknown.  This is a
    deliberate operator declaration, not sensor evidence; the ray-casting
    pipeline itself never frees a cell no ray traversed.
    """
    center = np.asarray(center, dtype=np.float64)
    cells = prob.cell_of(center)[None, :] + neighborhood_offsets(radius, prob.res)
    u = cells - prob.origin
    cells = cells[np.all((u >= 0) & (u < prob.window), axis=1)]
    if cells.shape[0] == 0:
        return DeltaBatch.empty()
    targets = (cells.astype(np.float64) + 0.5) * prob.res
    rays = targets - center[None, :]
    span = float(np.linalg.norm(rays, axis=1).max())
    n_steps = max(2, int(np.ceil(span / (prob.res / 3.0))) + 1)
    t = np.linspace(0.0, 1.0, n_steps)
    pts = center[None, None, :] + rays[:, None, :] * t[None, :, None]
    sample = np.floor(pts / prob.res).astype(np.int64)
    rel = sample - prob.origin[None, None, :]
    inside = np.all((rel >= 0) & (rel < prob.window), axis=2)
    blocked = np.zeros(inside.shape, dtype=bool)
    r = rel[inside]
    cls = prob.classes_unrolled()
    blocked[inside] = cls[r[:, 0], r[:, 1], r[:, 2]] == OCCUPIED
    return prob.observe_free_cells(cells[~blocked.any(axis=1)])


class GlobalMap:
    """Coarse static world map; cells latch Free once fully observed free.

    Non-free cells are treated as blocked for coarse planning, which makes
    unvisited space conservative by default.
    """

    def __init__(self, center, resolution: float = 0.5, extent: float = 200.0) -> None:
        if resolution <= 0 or extent <= 0:
            raise ValueError("resolution and extent must be positive")
        self.res = resolution
        self.extent = extent
        self.size = int(round(extent / resolution))
        center = np.asarray(center, dtype=np.float64)
        self.origin = np.floor(center / resolution).astype(np.int64) - self.size // 2
        self.free = np.zeros((self.size, self.size, self.size), bool)

    def cell_of(self, point) -> np.ndarray:
        return np.floor(np.asarray(point, dtype=np.float64) / self.res).astype(np.int64)

    def center_of(self, cell) -> np.ndarray:
        return (np.asarray(cell, dtype=np.float64) + 0.5) * self.res

    def in_bounds(self, cell) -> bool:
        u = np.asarray(cell, dtype=np.int64) - self.origin
        return bool(np.all(u >= 0) and np.all(u < self.size))

    def free_at(self, cell) -> bool:
        u = np.asarray(cell, dtype=np.int64) - self.origin
        if np.any(u < 0) or np.any(u >= self.size):
            return False
        return bool(self.free[u[0], u[1], u[2]])

    def export_snapshot(self, path) -> None:
        classes = np.where(self.free, np.uint8(KNOWN_FREE), np.uint8(UNKNOWN))
        save_class_snapshot(path, self.res, self.origin, classes)

    @classmethod
    def from_snapshot(cls, path) -> "GlobalMap":
        resolution, origin, classes = load_class_snapshot(path)
        if classes.shape[0] != classes.shape[1] or classes.shape[0] != classes.shape[2]:
            raise ValueError("global snapshot must be cubic")
        gm = cls.__new__(cls)
        gm.res = float(resolution)
        gm.size = int(classes.shape[0])
        gm.extent = gm.size * gm.res
        gm.origin = origin
        gm.free = classes == KNOWN_FREE
        return gm


def _coarse_axis_counts(c_lo: int, c_hi: int, res_f: float, res_c: float) -> np.ndarray:
    """Fine cells whose centre falls in each coarse cell of [c_lo, c_hi).

    Exact integer arithmetic at micrometre granularity, so non-integer
    resolution ratios (e.g. 0.5 / 0.2) stay exact.
    """
    rf = int(round(res_f * 1e6))
    rc = int(round(res_c * 1e6))
    cs = np.arange(c_lo, c_hi, dtype=np.int64)
    # fine index f belongs to coarse c iff c*rc <= (f + 0.5)*rf < (c+1)*rc
    f_min = -((-(2 * cs * rc - rf)) // (2 * rf))
    f_end = -((-(2 * (cs + 1) * rc - rf)) // (2 * rf))
    return (f_end - f_min).astype(np.int64)


def update_global(gmap: GlobalMap, prob: ProbabilityMap) -> int:
    """Latch coarse cells whose full fine coverage is currently known-free.

    Only coarse cells whose every fine cell lies inside the window can latch;
    already-free cells stay free.  Returns the number of newly freed cells.
    """
    res_f = prob.res
    res_c = gmap.res
    w = prob.window
    grid = prob.classes_unrolled()
    free_fine = (grid == KNOWN_FREE)
    fine_idx = [prob.origin[a] + np.arange(w, dtype=np.int64) for a in range(3)]
    rf = int(round(res_f * 1e6))
    rc = int(round(res_c * 1e6))
    coarse_idx = [(2 * fine_idx[a] + 1) * rf // (2 * rc) for a in range(3)]
    c_lo = [int(coarse_idx[a][0]) for a in range(3)]
    c_hi = [int(coarse_idx[a][-1]) + 1 for a in range(3)]
    n_axis = [c_hi[a] - c_lo[a] for a in range(3)]
    local = [coarse_idx[a] - c_lo[a] for a in range(3)]
    flat = (
        local[0][:, None, None] * (n_axis[1] * n_axis[2])
        + local[1][None, :, None] * n_axis[2]
        + local[2][None, None, :]
    )
    total = n_axis[0] * n_axis[1] * n_axis[2]
    observed = np.bincount(flat.ravel(), minlength=total)
    free_count = np.bincount(flat.ravel(), weights=free_fine.ravel(), minlength=total)
    expected = (
        _coarse_axis_counts(c_lo[0], c_hi[0], res_f, res_c)[:, None, None]
        * _coarse_axis_counts(c_lo[1], c_hi[1], res_f, res_c)[None, :, None]
        * _coarse_axis_counts(c_lo[2], c_hi[2], res_f, res_c)[None, None, :]
    ).ravel()
    latch = (observed == expected) & (free_count == observed) & (observed > 0)
    if not latch.any():
        return 0
    ids = np.flatnonzero(latch)
    cz = ids % n_axis[2]
    cy = (ids // n_axis[2]) % n_axis[1]
    cx = ids // (n_axis[2] * n_axis[1])
    cells = np.stack(
        [cx + c_lo[0], cy + c_lo[1], cz + c_lo[2]], axis=1
    ) - gmap.origin[None, :]
    inb = np.all((cells >= 0) & (cells < gmap.size), axis=1)
    cells = cells[inb]
    before = gmap.free[cells[:, 0], cells[:, 1], cells[:, 2]]
    gmap.free[cells[:, 0], cells[:, 1], cells[:, 2]] = True
    return int((~before).sum())
