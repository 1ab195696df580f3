"""Spinning-lidar simulation with a non-repetitive low-discrepancy scan pattern.

Ray directions come from an additive-recurrence (R2) sequence indexed by the
global ray counter, so consecutive frames sample different directions while
the union over a stationary window fills the field of view evenly.  The
pattern is a pure function of (seed, frame_index).
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field

import numpy as np

from . import world as world_mod
from .world import QuadState, Scene

# plastic-number additive recurrence, a 2D low-discrepancy generator
_R2_A = 0.7548776662466927
_R2_B = 0.5698402909980532

SCAN_LOG_MAGIC = b"ISCN"
SCAN_LOG_VERSION = 1


@dataclass
class SensorConfig:
    """Lidar geometry and rates.

    Vertical field of view is asymmetric about the horizon; defaults span
    59 degrees.  rays_per_frame at frame_rate sets the point throughput.
    """

    h_fov_deg: float = 360.0
    v_min_deg: float = -7.0
    v_max_deg: float = 52.0
    max_range: float = 40.0
    rays_per_frame: int = 2000
    frame_rate: float = 10.0
    seed: int = 0

    def validate(self) -> None:
        if not (0.0 < self.h_fov_deg <= 360.0):
            raise ValueError("h_fov_deg must be in (0, 360]")
        if self.v_max_deg <= self.v_min_deg:
            raise ValueError("v_max_deg must exceed v_min_deg")
        if self.max_range <= 0:
            raise ValueError("max_range must be positive")
        if self.rays_per_frame <= 0:
            raise ValueError("rays_per_frame must be positive")
        if self.frame_rate <= 0:
            raise ValueError("frame_rate must be positive")


@dataclass
class ScanFrame:
    """One sensor revolution: world/odom-frame returns plus miss directions."""

    stamp: float
    sensor_position: np.ndarray  # (3,)
    sensor_yaw: float
    returns: np.ndarray  # (r, 3) hit points
    misses: np.ndarray  # (m, 3) unit directions with no return in range


@dataclass
class OdometrySample:
    stamp: float
    position: np.ndarray
    velocity: np.ndarray
    yaw: float


def pattern_directions(config: SensorConfig, frame_index: int) -> np.ndarray:
    """Unit ray directions in the sensor frame for one frame.

    Azimuth covers h_fov centred on +x; elevation covers [v_min, v_max].
    Deterministic in (config.seed, frame_index); successive frames differ.
    """
    if frame_index < 0:
        raise ValueError("frame_index must be non-negative")
    n = config.rays_per_frame
    base = np.arange(
        frame_index * n, (frame_index + 1) * n, dtype=np.float64
    )
    # seed folds in as a fixed offset of the recurrence
    off_a = (config.seed * _R2_A) % 1.0
    off_b = (config.seed * _R2_B) % 1.0
    u = (off_a + base * _R2_A) % 1.0
    v = (off_b + base * _R2_B) % 1.0
    az = np.deg2rad((u - 0.5) * config.h_fov_deg)
    el = np.deg2rad(config.v_min_deg + v * (config.v_max_deg - config.v_min_deg))
    cos_el = np.cos(el)
    dirs = np.empty((n, 3), np.float64)
    dirs[:, 0] = cos_el * np.cos(az)
    dirs[:, 1] = cos_el * np.sin(az)
    dirs[:, 2] = np.sin(el)
    return dirs


def rotate_z(vectors: np.ndarray, yaw: float) -> np.ndarray:
    c = math.cos(yaw)
    s = math.sin(yaw)
    out = np.empty_like(vectors)
    out[:, 0] = c * vectors[:, 0] - s * vectors[:, 1]
    out[:, 1] = s * vectors[:, 0] + c * vectors[:, 1]
    out[:, 2] = vectors[:, 2]
    return out


def simulate_scan(
    scene: Scene, state: QuadState, config: SensorConfig, frame_index: int
) -> ScanFrame:
    """Trace one frame of the scan pattern against the scene.

    Returns are absolute hit points; rays with no hit within max_range are
    reported as unit directions.  len(returns) + len(misses) equals
    rays_per_frame always.
    """
    dirs = rotate_z(pattern_directions(config, frame_index), state.yaw)
    dists = world_mod.ray_hits(scene, state.position, dirs, config.max_range)
    hit = np.isfinite(dists)
    returns = state.position[None, :] + dirs[hit] * dists[hit, None]
    misses = dirs[~hit]
    return ScanFrame(
        stamp=state.time,
        sensor_position=state.position.copy(),
        sensor_yaw=state.yaw,
        returns=returns,
        misses=misses,
    )


def sample_odometry(state: QuadState, noise_sigma: float, seed: int) -> OdometrySample:
    """Odometry reading: ground truth plus seeded Gaussian position noise.

    The same (state, noise_sigma, seed) always yields the same sample.  Yaw
    and velocity are reported noise-free.
    """
    if noise_sigma < 0:
        raise ValueError("noise_sigma must be non-negative")
    if noise_sigma == 0.0:
        noise = np.zeros(3)
    else:
        rng = np.random.default_rng(seed)
        noise = rng.normal(0.0, noise_sigma, size=3)
    return OdometrySample(
        stamp=state.time,
        position=state.position + noise,
        velocity=state.velocity.copy(),
        yaw=state.yaw,
    )


def save_scan_log(frames: list[ScanFrame], path) -> None:
    """Write frames to the binary scan log.

    Layout (little-endian): magic "ISCN", uint16 version, uint32 frame count;
    then per frame: float64 stamp, float64[3] position, float64 yaw,
    uint32 return count r, uint32 miss count m, float32[r*3] returns,
    float32[m*3] miss directions.
    """
    with open(path, "wb") as fh:
        fh.write(SCAN_LOG_MAGIC)
        fh.write(struct.pack("<HI", SCAN_LOG_VERSION, len(frames)))
        for fr in frames:
            fh.write(struct.pack("<d", fr.stamp))
            fh.write(struct.pack("<3d", *fr.sensor_position))
            fh.write(struct.pack("<d", fr.sensor_yaw))
            fh.write(struct.pack("<II", fr.returns.shape[0], fr.misses.shape[0]))
            fh.write(np.ascontiguousarray(fr.returns, dtype="<f4").tobytes())
            fh.write(np.ascontiguousarray(fr.misses, dtype="<f4").tobytes())


def load_scan_log(path) -> list[ScanFrame]:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != SCAN_LOG_MAGIC:
        raise ValueError("not a scan log (bad magic)")
    version, count = struct.unpack_from("<HI", data, 4)
    if version != SCAN_LOG_VERSION:
        raise ValueError(f"unsupported scan log version {version}")
    off = 10
    frames = []
    for _ in range(count):
        stamp, px, py, pz, yaw = struct.unpack_from("<5d", data, off)
        off += 40
        r, m = struct.unpack_from("<II", data, off)
        off += 8
        returns = np.frombuffer(data, dtype="<f4", count=r * 3, offset=off).reshape(r, 3)
        off += r * 12
        misses = np.frombuffer(data, dtype="<f4", count=m * 3, offset=off).reshape(m, 3)
        off += m * 12
        frames.append(
            ScanFrame(
                stamp=stamp,
                sensor_position=np.array([px, py, pz]),
                sensor_yaw=yaw,
                returns=returns.astype(np.float64),
                misses=misses.astype(np.float64),
            )
        )
    return frames
