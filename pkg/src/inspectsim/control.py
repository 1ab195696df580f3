"""Corridor-constrained tracking MPC and proportional yaw / gimbal tracking.

The MPC is a convex QP over the stacked acceleration sequence.  Dynamics,
costs, and box constraints are all axis-separable, so the problem matrices
are block-diagonal over x, y, z; we still solve one QP for the whole stack.

The discrete model matches the simulator exactly: one controller period of
length dt covers `substeps` semi-implicit integrator steps under a held
acceleration, which gives p' = p + v dt + c a with c = dt^2 (K+1) / (2K).
Predictions therefore coincide with simulated states whenever no actuator
or speed clamp engages.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from cvxopt import matrix as _cvx_matrix
from cvxopt import solvers as _cvx_solvers

from .planning import Corridor
from .world import wrap_angle

_QP_OPTIONS = {
    "show_progress": False,
    "abstol": 1e-9,
    "reltol": 1e-9,
    "feastol": 1e-9,
    "maxiters": 200,
}


class MpcSetupError(ValueError):
    pass


@dataclass
class MpcProblem:
    horizon: int
    dt: float
    position: np.ndarray  # (3,)
    velocity: np.ndarray  # (3,)
    references: np.ndarray  # (H, 3) per-stage position references
    box_lo: np.ndarray  # (H, 3) per-stage lower corners (already shrunk)
    box_hi: np.ndarray  # (H, 3)
    v_max: float  # per-axis bound
    a_max: float  # per-axis bound
    w_pos: float = 10.0
    w_vel: float = 1.0
    w_effort: float = 0.1
    substeps: int = 10

    def validate(self) -> None:
        if self.horizon < 2:
            raise MpcSetupError("horizon must be at least 2")
        if self.dt <= 0:
            raise MpcSetupError("dt must be positive")
        if self.substeps < 1:
            raise MpcSetupError("substeps must be at least 1")
        h = self.horizon
        for name, arr, shape in (
            ("references", self.references, (h, 3)),
            ("box_lo", self.box_lo, (h, 3)),
            ("box_hi", self.box_hi, (h, 3)),
        ):
            if np.asarray(arr).shape != shape:
                raise MpcSetupError(f"{name} must have shape {shape}")
        if self.v_max <= 0 or self.a_max <= 0:
            raise MpcSetupError("limits must be positive")
        if np.any(self.position < self.box_lo[0]) or np.any(self.position > self.box_hi[0]):
            raise MpcSetupError("initial position outside the stage-0 box")


@dataclass
class MpcSolution:
    accelerations: np.ndarray  # (H, 3)
    positions: np.ndarray  # (H, 3) predicted, stages 1..H
    velocities: np.ndarray  # (H, 3)
    objective: float
    feasible: bool

    @property
    def command(self) -> np.ndarray:
        return self.accelerations[0]


def _prediction_matrices(horizon: int, dt: float, substeps: int):
    """Lower-triangular maps from the accel stack to per-stage p and v."""
    c = dt * dt * (substeps + 1) / (2.0 * substeps)
    k = np.arange(horizon)
    sv = np.tril(np.full((horizon, horizon), dt))
    # row i is stage i+1; input j contributes c plus one full dt^2 per whole
    # period it has been held before that stage
    gap = k[:, None] - k[None, :]
    sp = np.where(gap >= 0, c + dt * dt * gap, 0.0)
    return sp, sv, c


_PRED_CACHE: dict[tuple[int, float, int], tuple[np.ndarray, np.ndarray, float]] = {}


def _cached_prediction(horizon: int, dt: float, substeps: int):
    key = (horizon, dt, substeps)
    entry = _PRED_CACHE.get(key)
    if entry is None:
        entry = _prediction_matrices(horizon, dt, substeps)
        _PRED_CACHE[key] = entry
    return entry


def _braking(problem: MpcProblem) -> np.ndarray:
    v = problem.velocity
    speed = float(np.linalg.norm(v))
    if speed < 1e-12:
        return np.zeros(3)
    return -problem.a_max * v / speed


def mpc_step(problem: MpcProblem) -> MpcSolution:
    """Solve the tracking QP; infeasibility returns a braking command."""
    problem.validate()
    h = problem.horizon
    dt = problem.dt
    sp, sv, _ = _cached_prediction(h, dt, problem.substeps)
    k1 = np.arange(1, h + 1, dtype=np.float64)

    # per-axis condensed blocks, stacked block-diagonally over x, y, z
    n = 3 * h
    big_p = np.zeros((n, n))
    big_q = np.zeros(n)
    rows_g = []
    rows_h = []
    p_axis_const = np.empty((h, 3))
    for a in range(3):
        drift = problem.position[a] + k1 * dt * problem.velocity[a]
        p_axis_const[:, a] = drift
        err0 = drift - problem.references[:, a]
        vel0 = np.full(h, problem.velocity[a])
        p_blk = 2.0 * (
            problem.w_pos * sp.T @ sp
            + problem.w_vel * sv.T @ sv
            + problem.w_effort * np.eye(h)
        )
        q_blk = 2.0 * (problem.w_pos * sp.T @ err0 + problem.w_vel * sv.T @ vel0)
        sl = slice(a * h, (a + 1) * h)
        big_p[sl, sl] = p_blk
        big_q[sl] = q_blk

        g_axis = np.vstack([sp, -sp, sv, -sv, np.eye(h), -np.eye(h)])
        h_axis = np.concatenate(
            [
                problem.box_hi[:, a] - drift,
                drift - problem.box_lo[:, a],
                np.full(h, problem.v_max - problem.velocity[a]),
                np.full(h, problem.v_max + problem.velocity[a]),
                np.full(h, problem.a_max),
                np.full(h, problem.a_max),
            ]
        )
        g_full = np.zeros((g_axis.shape[0], n))
        g_full[:, sl] = g_axis
        rows_g.append(g_full)
        rows_h.append(h_axis)

    g_mat = np.vstack(rows_g)
    h_vec = np.concatenate(rows_h)

    try:
        result = _cvx_solvers.qp(
            _cvx_matrix(big_p),
            _cvx_matrix(big_q),
            _cvx_matrix(g_mat),
            _cvx_matrix(h_vec),
            options=_QP_OPTIONS,
        )
    except (ValueError, ArithmeticError):
        result = None
    if result is None or result["status"] != "optimal":
        brake = _braking(problem)
        acc = np.tile(brake, (h, 1))
        pos, vel = _predict(problem, acc, sp, sv, p_axis_const)
        return MpcSolution(acc, pos, vel, math.inf, False)

    accel = np.asarray(result["x"]).reshape(3, h).T.copy()
    pos, vel = _predict(problem, accel, sp, sv, p_axis_const)
    obj = (
        problem.w_pos * float(((pos - problem.references) ** 2).sum())
        + problem.w_vel * float((vel**2).sum())
        + problem.w_effort * float((accel**2).sum())
    )
    return MpcSolution(accel, pos, vel, obj, True)


def _predict(problem, accel, sp, sv, p_const):
    pos = p_const + sp @ accel
    vel = problem.velocity[None, :] + sv @ accel
    return pos, vel


def stage_references(
    corridor: Corridor, position, cruise_speed: float, horizon: int, dt: float
) -> tuple[np.ndarray, np.ndarray]:
    """Per-stage reference points and waypoint indices along the path.

    The reference advances by cruise_speed * dt of arc length per stage,
    starting from the projection of the current position onto the path
    polyline, and saturates at the final waypoint.
    """
    pts = corridor.path.points
    if pts.shape[0] == 1:
        refs = np.tile(pts[0], (horizon, 1))
        return refs, np.zeros(horizon, dtype=np.int64)
    seg = np.diff(pts, axis=0)
    seg_len = np.linalg.norm(seg, axis=1)
    cum = np.concatenate([[0.0], np.cumsum(seg_len)])
    p = np.asarray(position, dtype=np.float64)

    # arc-length of the closest polyline point to the current position
    rel = p[None, :] - pts[:-1]
    t = np.einsum("ij,ij->i", rel, seg) / (seg_len**2)
    t = np.clip(t, 0.0, 1.0)
    proj = pts[:-1] + t[:, None] * seg
    d2 = ((proj - p[None, :]) ** 2).sum(axis=1)
    i = int(np.argmin(d2))
    s0 = cum[i] + t[i] * seg_len[i]

    s = np.minimum(s0 + cruise_speed * dt * np.arange(1, horizon + 1), cum[-1])
    seg_idx = np.minimum(np.searchsorted(cum, s, side="right") - 1, len(seg_len) - 1)
    frac = (s - cum[seg_idx]) / seg_len[seg_idx]
    refs = pts[seg_idx] + frac[:, None] * seg[seg_idx]
    wp_idx = np.where(frac > 0.5, seg_idx + 1, seg_idx).astype(np.int64)
    return refs, wp_idx


def build_tracking_problem(
    corridor: Corridor,
    position,
    velocity,
    cruise_speed: float,
    v_max_axis: float,
    a_max: float,
    horizon: int = 20,
    dt: float = 0.1,
    margin: float = 0.02,
    substeps: int = 10,
) -> MpcProblem:
    """Assemble the per-stage references and shrunk box constraints.

    Each stage is assigned the first corridor box covering the waypoint
    nearest its reference; boxes are shrunk by the margin on every face so
    solver-tolerance wobble cannot graze a box wall.
    """
    refs, wp_idx = stage_references(corridor, position, cruise_speed, horizon, dt)
    lo = np.empty((horizon, 3))
    hi = np.empty((horizon, 3))
    for k in range(horizon):
        b = corridor.boxes[corridor.box_for_stage(int(wp_idx[k]))]
        lo[k] = b.lo + margin
        hi[k] = b.hi - margin
    p = np.asarray(position, dtype=np.float64)
    # keep the precondition honest when the vehicle sits on a box face
    lo[0] = np.minimum(lo[0], p)
    hi[0] = np.maximum(hi[0], p)
    return MpcProblem(
        horizon=horizon,
        dt=dt,
        position=p.copy(),
        velocity=np.asarray(velocity, dtype=np.float64).copy(),
        references=refs,
        box_lo=lo,
        box_hi=hi,
        v_max=v_max_axis,
        a_max=a_max,
        substeps=substeps,
    )


def track_yaw_gimbal(
    yaw: float,
    gimbal_pitch: float,
    yaw_target: float,
    pitch_target: float,
    yaw_rate_max: float,
    gimbal_rate_max: float,
    dt: float,
    gain: float = 3.0,
) -> tuple[float, float]:
    """Proportional rate commands; yaw takes the shortest wrapped direction."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    yaw_err = wrap_angle(yaw_target - yaw)
    yaw_rate = min(max(gain * yaw_err, -yaw_rate_max), yaw_rate_max)
    pitch_err = pitch_target - gimbal_pitch
    gimbal_rate = min(max(gain * pitch_err, -gimbal_rate_max), gimbal_rate_max)
    return yaw_rate, gimbal_rate
