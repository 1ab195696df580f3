"""Ground-truth scene geometry and quadrotor point-mass dynamics.

The scene is a flat ground plane plus axis-aligned box obstacles inside a
bounding region.  Scene files are versioned JSON documents; see
``load_scene`` for the schema.  All geometry queries are analytic.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import kernels

SCENE_FORMAT_VERSION = 1


class SceneError(ValueError):
    """Raised when a scene document is malformed or inconsistent."""


@dataclass
class Scene:
    """Static inspection site: ground plane, box obstacles, overall bounds.

    bounds and obstacles are (lo, hi) corner pairs; obstacles is an (m, 6)
    float64 array with rows [xlo, ylo, zlo, xhi, yhi, zhi].
    """

    scene_id: str
    ground_height: float
    bounds: np.ndarray  # (6,) [xlo, ylo, zlo, xhi, yhi, zhi]
    obstacles: np.ndarray  # (m, 6)

    def contains(self, point) -> bool:
        p = np.asarray(point, dtype=np.float64)
        return bool(np.all(p >= self.bounds[:3]) and np.all(p <= self.bounds[3:]))

    def inside_obstacle(self, point, margin: float = 0.0) -> bool:
        """True when the point lies strictly inside any obstacle grown by margin."""
        p = np.asarray(point, dtype=np.float64)
        if self.obstacles.shape[0] == 0:
            return False
        lo = self.obstacles[:, :3] - margin
        hi = self.obstacles[:, 3:] + margin
        return bool(np.any(np.all(p > lo, axis=1) & np.all(p < hi, axis=1)))


def _as_corners(raw, what: str, index: int | None = None) -> np.ndarray:
    where = f"{what}[{index}]" if index is not None else what
    try:
        lo = np.asarray(raw["lo"], dtype=np.float64)
        hi = np.asarray(raw["hi"], dtype=np.float64)
    except (KeyError, TypeError) as exc:
        raise SceneError(f"{where}: expected lo/hi corner arrays") from exc
    if lo.shape != (3,) or hi.shape != (3,):
        raise SceneError(f"{where}: corners must be 3-vectors")
    if not np.all(np.isfinite(lo)) or not np.all(np.isfinite(hi)):
        raise SceneError(f"{where}: corners must be finite")
    if not np.all(lo < hi):
        raise SceneError(f"{where}: lo must be strictly below hi on every axis")
    return np.concatenate([lo, hi])


def scene_from_dict(doc: dict) -> Scene:
    if doc.get("version") != SCENE_FORMAT_VERSION:
        raise SceneError(f"unsupported scene version {doc.get('version')!r}")
    scene_id = doc.get("id")
    if not isinstance(scene_id, str) or not scene_id:
        raise SceneError("scene id must be a non-empty string")
    try:
        ground = float(doc["ground_height"])
    except (KeyError, TypeError, ValueError) as exc:
        raise SceneError("ground_height must be a number") from exc
    bounds = _as_corners(doc.get("bounds", {}), "bounds")
    raw_obstacles = doc.get("obstacles", [])
    if not isinstance(raw_obstacles, list):
        raise SceneError("obstacles must be a list")
    rows = []
    for i, raw in enumerate(raw_obstacles):
        box = _as_corners(raw, "obstacles", i)
        if np.any(box[:3] < bounds[:3]) or np.any(box[3:] > bounds[3:]):
            raise SceneError(f"obstacles[{i}]: extends outside scene bounds")
        rows.append(box)
    obstacles = np.array(rows, dtype=np.float64) if rows else np.empty((0, 6), np.float64)
    if ground < bounds[2] or ground > bounds[5]:
        raise SceneError("ground_height outside scene bounds")
    return Scene(scene_id=scene_id, ground_height=ground, bounds=bounds, obstacles=obstacles)


def scene_to_dict(scene: Scene) -> dict:
    return {
        "version": SCENE_FORMAT_VERSION,
        "id": scene.scene_id,
        "ground_height": scene.ground_height,
        "bounds": {"lo": scene.bounds[:3].tolist(), "hi": scene.bounds[3:].tolist()},
        "obstacles": [
            {"lo": row[:3].tolist(), "hi": row[3:].tolist()} for row in scene.obstacles
        ],
    }


def load_scene(path) -> Scene:
    with open(path, "r", encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise SceneError(f"{path}: not valid JSON: {exc}") from exc
    return scene_from_dict(doc)


def save_scene(scene: Scene, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(scene_to_dict(scene), fh, indent=2, sort_keys=True)
        fh.write("\n")


def ray_hit(scene: Scene, origin, direction, max_range: float) -> float | None:
    """Distance to the first obstacle or ground intersection, None on miss.

    direction must be unit length (checked to 1e-9); hits strictly beyond
    max_range are misses.
    """
    origin = np.asarray(origin, dtype=np.float64)
    direction = np.asarray(direction, dtype=np.float64)
    norm = float(np.linalg.norm(direction))
    if abs(norm - 1.0) > 1e-9:
        raise ValueError(f"direction must be unit length, |d| = {norm}")
    d = kernels.ray_cast(
        origin,
        direction.reshape(1, 3),
        scene.obstacles,
        scene.ground_height,
        True,
        max_range,
    )[0]
    return None if math.isinf(d) else float(d)


def ray_hits(scene: Scene, origin, directions, max_range: float) -> np.ndarray:
    """Vectorized first-hit distances; np.inf rows are misses."""
    origin = np.asarray(origin, dtype=np.float64)
    directions = np.ascontiguousarray(directions, dtype=np.float64)
    return kernels.ray_cast(
        origin, directions, scene.obstacles, scene.ground_height, True, max_range
    )


@dataclass
class QuadLimits:
    """Symmetric actuation envelope of the simulated vehicle."""

    v_max: float = 2.5  # [m/s] Euclidean speed cap
    a_max: float = 6.0  # [m/s^2] per-axis acceleration cap
    yaw_rate_max: float = 1.5  # [rad/s]
    gimbal_rate_max: float = 2.0  # [rad/s]

    def validate(self) -> None:
        for name in ("v_max", "a_max", "yaw_rate_max", "gimbal_rate_max"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")


@dataclass
class QuadState:
    """Point-mass vehicle state; yaw wrapped to [-pi, pi), gimbal to [-pi/2, pi/2]."""

    position: np.ndarray = field(default_factory=lambda: np.zeros(3))
    velocity: np.ndarray = field(default_factory=lambda: np.zeros(3))
    yaw: float = 0.0
    gimbal_pitch: float = 0.0
    time: float = 0.0

    def copy(self) -> "QuadState":
        return replace(
            self, position=self.position.copy(), velocity=self.velocity.copy()
        )


def wrap_angle(angle: float) -> float:
    """Wrap to [-pi, pi)."""
    return float((angle + math.pi) % (2.0 * math.pi) - math.pi)


def step_quad(
    state: QuadState,
    accel_cmd,
    yaw_rate_cmd: float,
    gimbal_rate_cmd: float,
    dt: float,
    limits: QuadLimits,
) -> QuadState:
    """Advance the vehicle one step with semi-implicit Euler integration.

    Acceleration is clamped per axis, then velocity is updated and rescaled
    onto the speed ball if needed; position integrates the new velocity.
    Projection onto the ball is non-expansive, so the per-step velocity
    change never exceeds a_max * dt * sqrt(3).
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    a = np.clip(np.asarray(accel_cmd, dtype=np.float64), -limits.a_max, limits.a_max)
    v = state.velocity + a * dt
    speed = float(np.linalg.norm(v))
    if speed > limits.v_max:
        v = v * (limits.v_max / speed)
    p = state.position + v * dt
    yaw_rate = min(max(yaw_rate_cmd, -limits.yaw_rate_max), limits.yaw_rate_max)
    gimbal_rate = min(max(gimbal_rate_cmd, -limits.gimbal_rate_max), limits.gimbal_rate_max)
    yaw = wrap_angle(state.yaw + yaw_rate * dt)
    gimbal = min(max(state.gimbal_pitch + gimbal_rate * dt, -math.pi / 2), math.pi / 2)
    return QuadState(position=p, velocity=v, yaw=yaw, gimbal_pitch=gimbal, time=state.time + dt)
