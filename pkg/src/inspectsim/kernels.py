"""Numeric hot loops shared by the simulator and mapping stack.

Every kernel here is written once, in nopython-compatible numpy, and compiled
with numba when available.  Setting ``INSPECTSIM_NO_NUMBA=1`` (or running
without numba installed) selects the interpreted fallback lane instead.  Both
lanes run the same statements in the same order with no fastmath, so results
are bit-identical; the fallback exists for debugging and for environments
without a working compiler, not for speed.  ``benchmarks/bench_kernels.py``
measures the gap.

Cell state conventions used throughout:

* occupancy classes: 0 = unknown, 1 = known-free, 2 = occupied
* inflation classes: 0 = traversable, 1 = unknown-inflated, 2 = occupied-inflated
* 255 marks a cell outside the sliding window in delta records
"""

from __future__ import annotations

import os

import numpy as np

NUMBA_DISABLED = os.environ.get("INSPECTSIM_NO_NUMBA", "") not in ("", "0")

try:
    if NUMBA_DISABLED:
        raise ImportError
    from numba import njit

    NUMBA_ENABLED = True
except ImportError:
    NUMBA_ENABLED = False

    def njit(*args, **kwargs):
        # mirror both @njit and @njit(...) usage
        if len(args) == 1 and callable(args[0]) and not kwargs:
            return args[0]

        def wrap(func):
            return func

        return wrap


UNKNOWN = 0
KNOWN_FREE = 1
OCCUPIED = 2

NO_INFLATION = 0
UNKNOWN_INFLATION = 1
OCCUPIED_INFLATION = 2

OUTSIDE = 255


@njit(cache=True)
def ray_cast(origin, dirs, boxes, ground_z, use_ground, max_range):
    """First-hit distances for rays against axis-aligned boxes and a ground plane.

    origin: (3,) float64, dirs: (n, 3) float64 unit vectors, boxes: (m, 6)
    float64 rows [xlo, ylo, zlo, xhi, yhi, zhi].  Returns (n,) float64 with
    np.inf where nothing is hit within max_range.  Rays starting inside a box
    do not register that box (scenes validate spawn clearance instead).
    """
    n = dirs.shape[0]
    m = boxes.shape[0]
    out = np.empty(n, np.float64)
    for i in range(n):
        best = np.inf
        dz = dirs[i, 2]
        if use_ground and dz != 0.0:
            t = (ground_z - origin[2]) / dz
            if t > 1e-12 and t < best:
                best = t
        for b in range(m):
            tmin = -np.inf
            tmax = np.inf
            ok = True
            for a in range(3):
                d = dirs[i, a]
                o = origin[a]
                lo = boxes[b, a]
                hi = boxes[b, a + 3]
                if d == 0.0:
                    if o < lo or o > hi:
                        ok = False
                        break
                else:
                    t1 = (lo - o) / d
                    t2 = (hi - o) / d
                    if t1 > t2:
                        t1, t2 = t2, t1
                    if t1 > tmin:
                        tmin = t1
                    if t2 < tmax:
                        tmax = t2
            if ok and tmin <= tmax and tmin > 1e-12 and tmin < best:
                best = tmin
        out[i] = best if best <= max_range else np.inf
    return out


@njit(cache=True)
def _classify(lo, l_occ, l_free):
    if lo >= l_occ:
        return OCCUPIED
    if lo <= l_free:
        return KNOWN_FREE
    return UNKNOWN


@njit(cache=True)
def carve_frame(
    log_odds,
    origin,
    window,
    res,
    sensor,
    pts,
    is_hit,
    l_hit,
    l_miss,
    l_min,
    l_max,
    l_occ,
    l_free,
    delta_acc,
    touched_mark,
    touched_buf,
):
    """Integrate one scan frame into the ring-buffered log-odds grid.

    Walks each ray with a 3D digital differential analyzer from the sensor
    cell toward pts[i].  Cells before the endpoint accumulate l_miss; the
    endpoint cell accumulates l_hit when is_hit[i] is set, l_miss otherwise
    (range-capped carve).  Per-cell contributions from the whole frame are
    summed first and clamped once, so the result is independent of ray order.
    Rays are truncated at the window boundary.

    delta_acc (float64 flat), touched_mark (uint8 flat) must be zero on entry
    and are re-zeroed before returning.  touched_buf is an (cap, 4) int64
    scratch holding [flat, wx, wy, wz] rows.

    Returns (changed (k, 3) int64 world cells, old_cls (k,), new_cls (k,) uint8).
    """
    w = window
    cap = touched_buf.shape[0]
    n_touched = 0
    n = pts.shape[0]
    for i in range(n):
        ex = pts[i, 0] - sensor[0]
        ey = pts[i, 1] - sensor[1]
        ez = pts[i, 2] - sensor[2]
        seg = np.sqrt(ex * ex + ey * ey + ez * ez)
        if seg <= 0.0:
            continue
        dx = ex / seg
        dy = ey / seg
        dz = ez / seg
        # endpoint cell, nudged forward so boundary hits land inside the surface cell
        eps = res * 1e-6
        gx = int(np.floor((pts[i, 0] + dx * eps) / res))
        gy = int(np.floor((pts[i, 1] + dy * eps) / res))
        gz = int(np.floor((pts[i, 2] + dz * eps) / res))
        cx = int(np.floor(sensor[0] / res))
        cy = int(np.floor(sensor[1] / res))
        cz = int(np.floor(sensor[2] / res))
        sx = 1 if dx > 0.0 else (-1 if dx < 0.0 else 0)
        sy = 1 if dy > 0.0 else (-1 if dy < 0.0 else 0)
        sz = 1 if dz > 0.0 else (-1 if dz < 0.0 else 0)
        if dx != 0.0:
            nbx = (cx + 1) * res if sx > 0 else cx * res
            tmx = (nbx - sensor[0]) / dx
            tdx = res / abs(dx)
        else:
            tmx = np.inf
            tdx = np.inf
        if dy != 0.0:
            nby = (cy + 1) * res if sy > 0 else cy * res
            tmy = (nby - sensor[1]) / dy
            tdy = res / abs(dy)
        else:
            tmy = np.inf
            tdy = np.inf
        if dz != 0.0:
            nbz = (cz + 1) * res if sz > 0 else cz * res
            tmz = (nbz - sensor[2]) / dz
            tdz = res / abs(dz)
        else:
            tmz = np.inf
            tdz = np.inf

        guard = 3 * w + 6
        first = True
        for _ in range(guard):
            ux = cx - origin[0]
            uy = cy - origin[1]
            uz = cz - origin[2]
            if ux < 0 or ux >= w or uy < 0 or uy >= w or uz < 0 or uz >= w:
                break
            at_end = cx == gx and cy == gy and cz == gz
            # the sensor occupies its own cell; rays carry no evidence for it
            skip = first and not (at_end and is_hit[i] != 0)
            first = False
            if not skip:
                flat = (((cx % w) + w) % w) * w * w + (((cy % w) + w) % w) * w + (((cz % w) + w) % w)
                if touched_mark[flat] == 0:
                    touched_mark[flat] = 1
                    if n_touched < cap:
                        touched_buf[n_touched, 0] = flat
                        touched_buf[n_touched, 1] = cx
                        touched_buf[n_touched, 2] = cy
                        touched_buf[n_touched, 3] = cz
                        n_touched += 1
                if at_end and is_hit[i] != 0:
                    delta_acc[flat] += l_hit
                else:
                    delta_acc[flat] += l_miss
            if at_end:
                break
            if tmx <= tmy and tmx <= tmz:
                cx += sx
                tmx += tdx
            elif tmy <= tmz:
                cy += sy
                tmy += tdy
            else:
                cz += sz
                tmz += tdz

    changed = np.empty((n_touched, 3), np.int64)
    old_cls = np.empty(n_touched, np.uint8)
    new_cls = np.empty(n_touched, np.uint8)
    k = 0
    for t in range(n_touched):
        flat = touched_buf[t, 0]
        lo_old = log_odds[flat]
        lo_new = lo_old + delta_acc[flat]
        if lo_new > l_max:
            lo_new = l_max
        elif lo_new < l_min:
            lo_new = l_min
        log_odds[flat] = lo_new
        delta_acc[flat] = 0.0
        touched_mark[flat] = 0
        c_old = _classify(lo_old, l_occ, l_free)
        c_new = _classify(lo_new, l_occ, l_free)
        if c_old != c_new:
            changed[k, 0] = touched_buf[t, 1]
            changed[k, 1] = touched_buf[t, 2]
            changed[k, 2] = touched_buf[t, 3]
            old_cls[k] = c_old
            new_cls[k] = c_new
            k += 1
    return changed[:k], old_cls[:k], new_cls[:k]


@njit(cache=True)
def _emit_box(x0, x1, y0, y1, z0, z1, out, n):
    for x in range(x0, x1):
        for y in range(y0, y1):
            for z in range(z0, z1):
                out[n, 0] = x
                out[n, 1] = y
                out[n, 2] = z
                n += 1
    return n


@njit(cache=True)
def box_difference_cells(a_lo, a_hi, b_lo, b_hi, out):
    """Cells of box A (world cell coords, half-open) not inside box B.

    Writes rows into out (int64 (cap, 3)) in a fixed slab-sweep order and
    returns the count.  Each cell appears exactly once.
    """
    rl = np.empty(3, np.int64)
    rh = np.empty(3, np.int64)
    for a in range(3):
        rl[a] = a_lo[a]
        rh[a] = a_hi[a]
    n = 0
    for axis in range(3):
        lo_end = b_lo[axis]
        if lo_end > rh[axis]:
            lo_end = rh[axis]
        if lo_end > rl[axis]:
            if axis == 0:
                n = _emit_box(rl[0], lo_end, rl[1], rh[1], rl[2], rh[2], out, n)
            elif axis == 1:
                n = _emit_box(rl[0], rh[0], rl[1], lo_end, rl[2], rh[2], out, n)
            else:
                n = _emit_box(rl[0], rh[0], rl[1], rh[1], rl[2], lo_end, out, n)
            rl[axis] = lo_end
        hi_start = b_hi[axis]
        if hi_start < rl[axis]:
            hi_start = rl[axis]
        if hi_start < rh[axis]:
            if axis == 0:
                n = _emit_box(hi_start, rh[0], rl[1], rh[1], rl[2], rh[2], out, n)
            elif axis == 1:
                n = _emit_box(rl[0], rh[0], hi_start, rh[1], rl[2], rh[2], out, n)
            else:
                n = _emit_box(rl[0], rh[0], rl[1], rh[1], hi_start, rh[2], out, n)
            rh[axis] = hi_start
        if rl[axis] >= rh[axis]:
            return n
    return n


@njit(cache=True)
def gather_classes(log_odds, window, cells, l_occ, l_free):
    """Current occupancy class of each world cell (caller ensures in-window)."""
    w = window
    k = cells.shape[0]
    out = np.empty(k, np.uint8)
    for i in range(k):
        flat = (
            (((cells[i, 0] % w) + w) % w) * w * w
            + (((cells[i, 1] % w) + w) % w) * w
            + (((cells[i, 2] % w) + w) % w)
        )
        out[i] = _classify(log_odds[flat], l_occ, l_free)
    return out


@njit(cache=True)
def zero_cells(log_odds, window, cells):
    w = window
    for i in range(cells.shape[0]):
        flat = (
            (((cells[i, 0] % w) + w) % w) * w * w
            + (((cells[i, 1] % w) + w) % w) * w
            + (((cells[i, 2] % w) + w) % w)
        )
        log_odds[flat] = 0.0


@njit(cache=True)
def recount_box(log_odds, occ_count, unk_count, origin, window, box_lo, box_hi, offsets, l_occ, l_free):
    """Rebuild inflation source counts for every cell of a world-cell box.

    Counts consider in-window sources only; the window-boundary shell is
    handled analytically by the classification step.
    """
    w = window
    n_off = offsets.shape[0]
    for x in range(box_lo[0], box_hi[0]):
        for y in range(box_lo[1], box_hi[1]):
            for z in range(box_lo[2], box_hi[2]):
                occ = 0
                unk = 0
                for j in range(n_off):
                    nx = x + offsets[j, 0]
                    ny = y + offsets[j, 1]
                    nz = z + offsets[j, 2]
                    ux = nx - origin[0]
                    uy = ny - origin[1]
                    uz = nz - origin[2]
                    if ux < 0 or ux >= w or uy < 0 or uy >= w or uz < 0 or uz >= w:
                        continue
                    flat = (
                        (((nx % w) + w) % w) * w * w
                        + (((ny % w) + w) % w) * w
                        + (((nz % w) + w) % w)
                    )
                    c = _classify(log_odds[flat], l_occ, l_free)
                    if c == OCCUPIED:
                        occ += 1
                    elif c == UNKNOWN:
                        unk += 1
                flat_c = (
                    (((x % w) + w) % w) * w * w
                    + (((y % w) + w) % w) * w
                    + (((z % w) + w) % w)
                )
                occ_count[flat_c] = occ
                unk_count[flat_c] = unk


@njit(cache=True)
def apply_count_deltas(occ_count, unk_count, origin, window, cells, old_cls, new_cls, offsets):
    """Shift inflation source counts for a batch of occupancy class changes.

    Class value 255 (outside the window) contributes nothing on either side,
    so slide bookkeeping reuses this path for cells leaving the window.
    """
    w = window
    n_off = offsets.shape[0]
    for i in range(cells.shape[0]):
        d_occ = 0
        d_unk = 0
        if old_cls[i] == OCCUPIED:
            d_occ -= 1
        elif old_cls[i] == UNKNOWN:
            d_unk -= 1
        if new_cls[i] == OCCUPIED:
            d_occ += 1
        elif new_cls[i] == UNKNOWN:
            d_unk += 1
        if d_occ == 0 and d_unk == 0:
            continue
        for j in range(n_off):
            nx = cells[i, 0] + offsets[j, 0]
            ny = cells[i, 1] + offsets[j, 1]
            nz = cells[i, 2] + offsets[j, 2]
            ux = nx - origin[0]
            uy = ny - origin[1]
            uz = nz - origin[2]
            if ux < 0 or ux >= w or uy < 0 or uy >= w or uz < 0 or uz >= w:
                continue
            flat = (
                (((nx % w) + w) % w) * w * w
                + (((ny % w) + w) % w) * w
                + (((nz % w) + w) % w)
            )
            occ_count[flat] += d_occ
            unk_count[flat] += d_unk


@njit(cache=True)
def inflated_classes_box(occ_count, unk_count, origin, window, box_lo, box_hi, unknown_enabled, shell_margin):
    """Inflation class for every cell of a world-cell box (fixed x,y,z order).

    A cell within shell_margin cells of the window boundary on any axis picks
    up unknown inflation from the unobserved space outside the window.
    """
    w = window
    n0 = box_hi[0] - box_lo[0]
    n1 = box_hi[1] - box_lo[1]
    n2 = box_hi[2] - box_lo[2]
    out = np.empty(n0 * n1 * n2, np.uint8)
    idx = 0
    for x in range(box_lo[0], box_hi[0]):
        for y in range(box_lo[1], box_hi[1]):
            for z in range(box_lo[2], box_hi[2]):
                flat = (
                    (((x % w) + w) % w) * w * w
                    + (((y % w) + w) % w) * w
                    + (((z % w) + w) % w)
                )
                if occ_count[flat] > 0:
                    out[idx] = OCCUPIED_INFLATION
                elif unknown_enabled:
                    ux = x - origin[0]
                    uy = y - origin[1]
                    uz = z - origin[2]
                    shell = (
                        ux < shell_margin
                        or ux >= w - shell_margin
                        or uy < shell_margin
                        or uy >= w - shell_margin
                        or uz < shell_margin
                        or uz >= w - shell_margin
                    )
                    if shell or unk_count[flat] > 0:
                        out[idx] = UNKNOWN_INFLATION
                    else:
                        out[idx] = NO_INFLATION
                else:
                    out[idx] = NO_INFLATION
                idx += 1
    return out


@njit(cache=True)
def inflation_apply_and_diff(
    occ_count,
    unk_count,
    origin,
    window,
    cells,
    old_cls,
    new_cls,
    offsets,
    unknown_enabled,
    shell_margin,
    mark,
    neigh_buf,
):
    """Apply occupancy deltas to the counts and report inflation class changes.

    Valid while the window origin is unchanged (scan integration); slides are
    handled by recount_box plus a full-window diff instead.  mark is a uint8
    flat scratch (zero on entry, re-zeroed on exit); neigh_buf is int64
    (cap, 4) rows [flat, wx, wy, wz].
    """
    w = window
    n_off = offsets.shape[0]
    cap = neigh_buf.shape[0]
    n_aff = 0
    # record affected neighborhood with pre-update classes
    for i in range(cells.shape[0]):
        for j in range(n_off):
            nx = cells[i, 0] + offsets[j, 0]
            ny = cells[i, 1] + offsets[j, 1]
            nz = cells[i, 2] + offsets[j, 2]
            ux = nx - origin[0]
            uy = ny - origin[1]
            uz = nz - origin[2]
            if ux < 0 or ux >= w or uy < 0 or uy >= w or uz < 0 or uz >= w:
                continue
            flat = (
                (((nx % w) + w) % w) * w * w
                + (((ny % w) + w) % w) * w
                + (((nz % w) + w) % w)
            )
            if mark[flat] == 0:
                mark[flat] = 1
                if n_aff < cap:
                    neigh_buf[n_aff, 0] = flat
                    neigh_buf[n_aff, 1] = nx
                    neigh_buf[n_aff, 2] = ny
                    neigh_buf[n_aff, 3] = nz
                    n_aff += 1

    old_inf = np.empty(n_aff, np.uint8)
    for t in range(n_aff):
        flat = neigh_buf[t, 0]
        if occ_count[flat] > 0:
            old_inf[t] = OCCUPIED_INFLATION
        elif unknown_enabled:
            ux = neigh_buf[t, 1] - origin[0]
            uy = neigh_buf[t, 2] - origin[1]
            uz = neigh_buf[t, 3] - origin[2]
            shell = (
                ux < shell_margin
                or ux >= w - shell_margin
                or uy < shell_margin
                or uy >= w - shell_margin
                or uz < shell_margin
                or uz >= w - shell_margin
            )
            if shell or unk_count[flat] > 0:
                old_inf[t] = UNKNOWN_INFLATION
            else:
                old_inf[t] = NO_INFLATION
        else:
            old_inf[t] = NO_INFLATION

    apply_count_deltas(occ_count, unk_count, origin, window, cells, old_cls, new_cls, offsets)

    changed = np.empty((n_aff, 3), np.int64)
    changed_old = np.empty(n_aff, np.uint8)
    changed_new = np.empty(n_aff, np.uint8)
    k = 0
    for t in range(n_aff):
        flat = neigh_buf[t, 0]
        mark[flat] = 0
        if occ_count[flat] > 0:
            new_inf = OCCUPIED_INFLATION
        elif unknown_enabled:
            ux = neigh_buf[t, 1] - origin[0]
            uy = neigh_buf[t, 2] - origin[1]
            uz = neigh_buf[t, 3] - origin[2]
            shell = (
                ux < shell_margin
                or ux >= w - shell_margin
                or uy < shell_margin
                or uy >= w - shell_margin
                or uz < shell_margin
                or uz >= w - shell_margin
            )
            if shell or unk_count[flat] > 0:
                new_inf = UNKNOWN_INFLATION
            else:
                new_inf = NO_INFLATION
        else:
            new_inf = NO_INFLATION
        if new_inf != old_inf[t]:
            changed[k, 0] = neigh_buf[t, 1]
            changed[k, 1] = neigh_buf[t, 2]
            changed[k, 2] = neigh_buf[t, 3]
            changed_old[k] = old_inf[t]
            changed_new[k] = new_inf
            k += 1
    return changed[:k], changed_old[:k], changed_new[:k]


@njit(cache=True)
def _heap_push(heap_f, heap_h, heap_i, size, f, h, idx):
    pos = size
    heap_f[pos] = f
    heap_h[pos] = h
    heap_i[pos] = idx
    while pos > 0:
        parent = (pos - 1) >> 1
        pf = heap_f[parent]
        ph = heap_h[parent]
        pi = heap_i[parent]
        better = False
        if f < pf:
            better = True
        elif f == pf:
            if h < ph:
                better = True
            elif h == ph and idx < pi:
                better = True
        if not better:
            break
        heap_f[pos] = pf
        heap_h[pos] = ph
        heap_i[pos] = pi
        heap_f[parent] = f
        heap_h[parent] = h
        heap_i[parent] = idx
        pos = parent
    return size + 1


@njit(cache=True)
def _heap_pop(heap_f, heap_h, heap_i, size):
    top_f = heap_f[0]
    top_h = heap_h[0]
    top_i = heap_i[0]
    size -= 1
    if size > 0:
        f = heap_f[size]
        h = heap_h[size]
        idx = heap_i[size]
        pos = 0
        while True:
            left = 2 * pos + 1
            if left >= size:
                break
            right = left + 1
            child = left
            if right < size:
                rf = heap_f[right]
                lf = heap_f[left]
                if rf < lf or (
                    rf == lf
                    and (
                        heap_h[right] < heap_h[left]
                        or (heap_h[right] == heap_h[left] and heap_i[right] < heap_i[left])
                    )
                ):
                    child = right
            cf = heap_f[child]
            ch = heap_h[child]
            ci = heap_i[child]
            smaller = False
            if cf < f:
                smaller = True
            elif cf == f:
                if ch < h:
                    smaller = True
                elif ch == h and ci < idx:
                    smaller = True
            if not smaller:
                break
            heap_f[pos] = cf
            heap_h[pos] = ch
            heap_i[pos] = ci
            pos = child
        heap_f[pos] = f
        heap_h[pos] = h
        heap_i[pos] = idx
    return top_f, top_h, top_i, size


@njit(cache=True)
def _heap_rebuild(heap_f, heap_h, heap_i, g, closed, use_heuristic, gx, gy, gz, ny, nz):
    """Repack the open set from the g table after heap exhaustion (rare)."""
    size = 0
    for flat in range(g.shape[0]):
        if closed[flat] == 0 and g[flat] < np.inf:
            if use_heuristic != 0:
                cz = flat % nz
                cy = (flat // nz) % ny
                cx = flat // (nz * ny)
                ddx = float(cx - gx)
                ddy = float(cy - gy)
                ddz = float(cz - gz)
                hh = np.sqrt(ddx * ddx + ddy * ddy + ddz * ddz)
            else:
                hh = 0.0
            size = _heap_push(heap_f, heap_h, heap_i, size, g[flat] + hh, hh, flat)
    return size


@njit(cache=True)
def astar_grid(blocked, start, goal, neigh, neigh_cost, use_heuristic):
    """Deterministic 26-connected A* over a dense blocked grid.

    blocked: (nx, ny, nz) uint8 (nonzero = untraversable); start/goal: (3,)
    int64 local indices; neigh: (26, 3) int64 offsets with neigh_cost (26,)
    step costs in cell units.  With use_heuristic=0 this is Dijkstra ordering.
    Ties break on lower heuristic, then lower flat index.

    Returns (status, path): status 0 = found, 1 = start blocked, 2 = goal
    blocked, 3 = unreachable; path is (L, 3) int64 local cells start..goal.
    """
    nx, ny, nz = blocked.shape
    total = nx * ny * nz
    empty = np.empty((0, 3), np.int64)
    if blocked[start[0], start[1], start[2]] != 0:
        return 1, empty
    if blocked[goal[0], goal[1], goal[2]] != 0:
        return 2, empty
    g = np.full(total, np.inf, np.float64)
    parent = np.full(total, -1, np.int64)
    closed = np.zeros(total, np.uint8)
    heap_cap = total * 4 + 64
    heap_f = np.empty(heap_cap, np.float64)
    heap_h = np.empty(heap_cap, np.float64)
    heap_i = np.empty(heap_cap, np.int64)
    size = 0
    s_flat = (start[0] * ny + start[1]) * nz + start[2]
    goal_flat = (goal[0] * ny + goal[1]) * nz + goal[2]
    gx, gy, gz = goal[0], goal[1], goal[2]

    dx0 = float(start[0] - gx)
    dy0 = float(start[1] - gy)
    dz0 = float(start[2] - gz)
    h0 = np.sqrt(dx0 * dx0 + dy0 * dy0 + dz0 * dz0) if use_heuristic != 0 else 0.0
    g[s_flat] = 0.0
    size = _heap_push(heap_f, heap_h, heap_i, size, h0, h0, s_flat)

    found = False
    while size > 0:
        f, h, flat, size = _heap_pop(heap_f, heap_h, heap_i, size)
        if closed[flat] != 0:
            continue
        closed[flat] = 1
        if flat == goal_flat:
            found = True
            break
        cz = flat % nz
        cy = (flat // nz) % ny
        cx = flat // (nz * ny)
        g_cur = g[flat]
        for j in range(neigh.shape[0]):
            mx = cx + neigh[j, 0]
            my = cy + neigh[j, 1]
            mz = cz + neigh[j, 2]
            if mx < 0 or mx >= nx or my < 0 or my >= ny or mz < 0 or mz >= nz:
                continue
            if blocked[mx, my, mz] != 0:
                continue
            m_flat = (mx * ny + my) * nz + mz
            if closed[m_flat] != 0:
                continue
            g_new = g_cur + neigh_cost[j]
            if g_new < g[m_flat]:
                g[m_flat] = g_new
                parent[m_flat] = flat
                if use_heuristic != 0:
                    ddx = float(mx - gx)
                    ddy = float(my - gy)
                    ddz = float(mz - gz)
                    hh = np.sqrt(ddx * ddx + ddy * ddy + ddz * ddz)
                else:
                    hh = 0.0
                if size >= heap_cap:
                    size = _heap_rebuild(
                        heap_f, heap_h, heap_i, g, closed, use_heuristic, gx, gy, gz, ny, nz
                    )
                size = _heap_push(heap_f, heap_h, heap_i, size, g_new + hh, hh, m_flat)
    if not found:
        return 3, empty

    length = 1
    flat = goal_flat
    while parent[flat] >= 0:
        flat = parent[flat]
        length += 1
    path = np.empty((length, 3), np.int64)
    flat = goal_flat
    for i in range(length - 1, -1, -1):
        path[i, 2] = flat % nz
        path[i, 1] = (flat // nz) % ny
        path[i, 0] = flat // (nz * ny)
        flat = parent[flat]
    return 0, path
