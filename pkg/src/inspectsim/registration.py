"""Anchor-map construction and session-to-session rigid alignment.

The anchor map is a voxel-downsampled point cloud with per-point normals,
accumulated while the vehicle sits still at its starting pose.  A later
session aligns its own stationary accumulation against the anchor in three
stages: yaw-sampled translation-only fits, then full point-to-plane ICP
seeded by the best sample.  All correspondence search is nearest-neighbor
against the anchor within a fixed radius, with source points borrowing the
matched anchor point's normal.
"""

from __future__ import annotations

import struct
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree
from scipy.spatial.transform import Rotation

from .lidar import ScanFrame

ANCHOR_MAGIC = b"IANC"
ANCHOR_VERSION = 1

DEFAULT_VOXEL = 0.1
DEFAULT_NORMAL_K = 10
MAX_CORRESPONDENCE_DIST = 1.0
MIN_CORRESPONDENCES = 10


class RegistrationError(ValueError):
    pass


class NotObservable(RegistrationError):
    pass


class CorrespondenceStarvation(RegistrationError):
    pass


class IcpDivergence(RegistrationError):
    def __init__(self, message: str, transform: "RigidTransform", error: float):
        super().__init__(message)
        self.transform = transform
        self.error = error


@dataclass
class RigidTransform:
    rotation: np.ndarray  # (3, 3)
    translation: np.ndarray  # (3,)

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_yaw(cls, yaw: float, translation=(0.0, 0.0, 0.0)) -> "RigidTransform":
        c, s = np.cos(yaw), np.sin(yaw)
        r = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
        return cls(r, np.asarray(translation, dtype=np.float64))

    def validate(self, tol: float = 1e-9) -> None:
        r = self.rotation
        if not np.allclose(r.T @ r, np.eye(3), atol=tol):
            raise RegistrationError("rotation is not orthonormal")
        if np.linalg.det(r) < 0:
            raise RegistrationError("rotation has negative determinant")

    def apply(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points, dtype=np.float64) @ self.rotation.T + self.translation

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """self after other: (self ∘ other)(x) = self(other(x))."""
        return RigidTransform(
            self.rotation @ other.rotation,
            self.rotation @ other.translation + self.translation,
        )

    def inverse(self) -> "RigidTransform":
        rt = self.rotation.T
        return RigidTransform(rt, -rt @ self.translation)

    def yaw_angle(self) -> float:
        return float(np.arctan2(self.rotation[1, 0], self.rotation[0, 0]))


@dataclass
class AnchorMap:
    points: np.ndarray  # (n, 3)
    normals: np.ndarray  # (n, 3) unit
    voxel_resolution: float
    _tree: cKDTree | None = field(default=None, repr=False, compare=False)

    def tree(self) -> cKDTree:
        if self._tree is None:
            self._tree = cKDTree(self.points)
        return self._tree

    def __len__(self) -> int:
        return self.points.shape[0]


def voxel_downsample(points: np.ndarray, voxel: float) -> np.ndarray:
    """Centroid of each occupied voxel, ordered by voxel key."""
    if points.shape[0] == 0:
        return points.reshape(0, 3).astype(np.float64)
    keys = np.floor(np.asarray(points, dtype=np.float64) / voxel).astype(np.int64)
    order = np.lexsort((keys[:, 2], keys[:, 1], keys[:, 0]))
    keys = keys[order]
    pts = np.asarray(points, dtype=np.float64)[order]
    boundary = np.any(np.diff(keys, axis=0) != 0, axis=1)
    starts = np.concatenate([[0], np.nonzero(boundary)[0] + 1])
    ends = np.concatenate([starts[1:], [keys.shape[0]]])
    sums = np.add.reduceat(pts, starts, axis=0)
    return sums / (ends - starts)[:, None]


def estimate_normals(
    points: np.ndarray, k: int = DEFAULT_NORMAL_K, view_point=(0.0, 0.0, 0.0)
) -> tuple[np.ndarray, np.ndarray]:
    """Per-point unit normals with a degeneracy flag.

    Each normal is the least-eigenvalue eigenvector of the covariance of the
    k nearest neighbors (the point itself included), sign-flipped toward the
    view point.  Neighborhoods whose two smallest eigenvalues are both tiny
    relative to the largest (rank below 2) are flagged degenerate.
    """
    pts = np.asarray(points, dtype=np.float64)
    n = pts.shape[0]
    if k < 3:
        raise ValueError("k must be at least 3")
    if n < k:
        raise ValueError("need at least k points")
    tree = cKDTree(pts)
    _, idx = tree.query(pts, k=k)
    neigh = pts[idx]  # (n, k, 3)
    centered = neigh - neigh.mean(axis=1, keepdims=True)
    cov = np.einsum("nki,nkj->nij", centered, centered) / k
    eigvals, eigvecs = np.linalg.eigh(cov)  # ascending
    normals = eigvecs[:, :, 0].copy()
    scale = np.maximum(eigvals[:, 2], 1e-30)
    degenerate = eigvals[:, 1] <= 1e-8 * scale
    to_view = np.asarray(view_point, dtype=np.float64)[None, :] - pts
    flip = np.einsum("ni,ni->n", normals, to_view) < 0
    normals[flip] *= -1.0
    norms = np.linalg.norm(normals, axis=1, keepdims=True)
    normals /= np.maximum(norms, 1e-30)
    return normals, degenerate


def accumulate_anchor(
    frames: list[ScanFrame],
    duration: float,
    voxel: float = DEFAULT_VOXEL,
    normal_k: int = DEFAULT_NORMAL_K,
    min_duration: float = 5.0,
) -> AnchorMap:
    """Build the anchor map from scans taken at one stationary pose.

    Degenerate-normal points are dropped so every stored normal is a real
    surface estimate.  Short accumulations work but draw a warning.
    """
    if not frames:
        raise ValueError("no frames")
    pos0 = frames[0].sensor_position
    yaw0 = frames[0].sensor_yaw
    for f in frames[1:]:
        if np.any(np.abs(f.sensor_position - pos0) > 1e-9) or abs(f.sensor_yaw - yaw0) > 1e-12:
            raise ValueError("frames come from a moving pose")
    if duration < min_duration:
        warnings.warn(
            f"accumulation spans {duration:.2f} s, below the recommended {min_duration:.1f} s",
            stacklevel=2,
        )
    all_pts = [f.returns for f in frames if f.returns.shape[0] > 0]
    if not all_pts:
        raise ValueError("no returns in any frame")
    merged = np.concatenate(all_pts, axis=0)
    down = voxel_downsample(merged, voxel)
    if down.shape[0] < normal_k:
        raise ValueError("too few points for normal estimation")
    normals, degenerate = estimate_normals(down, k=normal_k, view_point=pos0)
    keep = ~degenerate
    return AnchorMap(points=down[keep], normals=normals[keep], voxel_resolution=voxel)


def save_anchor(anchor: AnchorMap, path) -> None:
    """count, then per point 3 position + 3 normal float32, little-endian."""
    n = len(anchor)
    interleaved = np.empty((n, 6), dtype="<f4")
    interleaved[:, :3] = anchor.points
    interleaved[:, 3:] = anchor.normals
    with open(path, "wb") as fh:
        fh.write(ANCHOR_MAGIC)
        fh.write(struct.pack("<HdI", ANCHOR_VERSION, anchor.voxel_resolution, n))
        fh.write(interleaved.tobytes())


def load_anchor(path) -> AnchorMap:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != ANCHOR_MAGIC:
            raise ValueError("not an anchor map file")
        version, voxel, n = struct.unpack("<HdI", fh.read(14))
        if version != ANCHOR_VERSION:
            raise ValueError(f"unsupported anchor version {version}")
        data = np.frombuffer(fh.read(n * 24), dtype="<f4").reshape(n, 6)
    pts = data[:, :3].astype(np.float64)
    normals = data[:, 3:].astype(np.float64)
    lens = np.linalg.norm(normals, axis=1, keepdims=True)
    normals = normals / np.maximum(lens, 1e-30)  # re-unit after f32 rounding
    return AnchorMap(points=pts, normals=normals, voxel_resolution=voxel)


def _correspondences(anchor: AnchorMap, moved: np.ndarray, max_dist: float):
    dist, idx = anchor.tree().query(moved, distance_upper_bound=max_dist)
    ok = np.isfinite(dist)
    return ok, idx[ok]


def _solve_translation(moved, anchor_pts, anchor_normals):
    """Closed-form minimizer of sum(((p + t - q) . n)^2) over t."""
    n = anchor_normals
    a = n.T @ n
    rhs = (np.einsum("ni,ni->n", anchor_pts - moved, n)[:, None] * n).sum(axis=0)
    w = np.linalg.eigvalsh(a)
    if w[0] <= 1e-6 * max(w[2], 1e-30):
        raise NotObservable("translation not observable from the normal set")
    return np.linalg.solve(a, rhs)


def align_translation_only(
    source: np.ndarray,
    anchor: AnchorMap,
    rotation: np.ndarray,
    max_dist: float = MAX_CORRESPONDENCE_DIST,
    max_rounds: int = 20,
) -> tuple[np.ndarray, float]:
    """Fixed-rotation fit: alternate correspondence search and the 3x3
    closed-form translation solve until the step stalls.

    Returns the translation and the mean absolute point-to-plane distance
    of the final correspondences.
    """
    rot = np.asarray(rotation, dtype=np.float64)
    src = np.asarray(source, dtype=np.float64) @ rot.T
    # centroid difference as the starting guess: both clouds cover the same
    # physical surfaces, so this removes most of the offset before the first
    # correspondence search and still gives t = 0 for identical clouds
    t = anchor.points.mean(axis=0) - src.mean(axis=0)
    err = np.inf
    for _ in range(max_rounds):
        moved = src + t
        ok, idx = _correspondences(anchor, moved, max_dist)
        if int(ok.sum()) < MIN_CORRESPONDENCES:
            raise CorrespondenceStarvation("fewer than 10 correspondences")
        delta = _solve_translation(moved[ok], anchor.points[idx], anchor.normals[idx])
        t = t + delta
        res = np.einsum(
            "ni,ni->n", src[ok] + t - anchor.points[idx], anchor.normals[idx]
        )
        err = float(np.abs(res).mean())
        if np.linalg.norm(delta) < 1e-7:
            break
    return t, err


def coarse_align(
    source: np.ndarray,
    anchor: AnchorMap,
    yaw_samples: int = 36,
    max_dist: float = MAX_CORRESPONDENCE_DIST,
) -> RigidTransform:
    """Best yaw-sampled translation-only fit over a uniform grid on [0, 2pi)."""
    if yaw_samples < 1:
        raise ValueError("need at least one yaw sample")
    best = None
    best_err = np.inf
    for i in range(yaw_samples):
        yaw = 2.0 * np.pi * i / yaw_samples
        rot = RigidTransform.from_yaw(yaw).rotation
        try:
            t, err = align_translation_only(source, anchor, rot, max_dist=max_dist)
        except RegistrationError:
            continue
        if err < best_err:
            best_err = err
            best = RigidTransform(rot, t)
    if best is None:
        raise NotObservable("no yaw sample produced an observable fit")
    return best


@dataclass
class IcpResult:
    transform: RigidTransform
    error: float  # mean absolute point-to-plane distance
    iterations: int
    correspondences: int


def icp_6dof(
    source: np.ndarray,
    anchor: AnchorMap,
    init: RigidTransform,
    max_dist: float = MAX_CORRESPONDENCE_DIST,
    max_iterations: int = 50,
) -> IcpResult:
    """Point-to-plane ICP with small-angle updates left-composed onto init.

    Terminates on update norm below 1e-4, error improvement below 1e-6, or
    the iteration cap; three consecutive error growths raise IcpDivergence
    carrying the best transform seen.
    """
    src = np.asarray(source, dtype=np.float64)
    current = RigidTransform(init.rotation.copy(), init.translation.copy())
    prev_err = np.inf
    best_err = np.inf
    best = current
    growths = 0
    iterations = 0
    n_corr = 0
    for iterations in range(1, max_iterations + 1):
        moved = current.apply(src)
        ok, idx = _correspondences(anchor, moved, max_dist)
        n_corr = int(ok.sum())
        if n_corr < MIN_CORRESPONDENCES:
            raise CorrespondenceStarvation("fewer than 10 correspondences")
        p = moved[ok]
        q = anchor.points[idx]
        n = anchor.normals[idx]
        r = np.einsum("ni,ni->n", p - q, n)
        err = float(np.abs(r).mean())

        if err < best_err:
            best_err = err
            best = current
        # material growth only; float wobble at a fixed point is not divergence
        if err > prev_err + 1e-9:
            growths += 1
            if growths >= 3:
                raise IcpDivergence("error grew 3 consecutive iterations", best, best_err)
        else:
            growths = 0
            if prev_err - err < 1e-6:
                break
        prev_err = err

        jac = np.empty((p.shape[0], 6))
        jac[:, :3] = np.cross(p, n)
        jac[:, 3:] = n
        a = jac.T @ jac
        b = -jac.T @ r
        try:
            x = np.linalg.solve(a, b)
        except np.linalg.LinAlgError:
            raise NotObservable("singular point-to-plane system") from None
        delta_rot = Rotation.from_rotvec(x[:3]).as_matrix()
        new_rot = delta_rot @ current.rotation
        u, _, vt = np.linalg.svd(new_rot)
        new_rot = u @ vt
        if np.linalg.det(new_rot) < 0:
            u[:, -1] *= -1.0
            new_rot = u @ vt
        current = RigidTransform(new_rot, delta_rot @ current.translation + x[3:])
        if np.linalg.norm(x) < 1e-4:
            moved = current.apply(src)
            ok, idx = _correspondences(anchor, moved, max_dist)
            if int(ok.sum()) >= MIN_CORRESPONDENCES:
                res = np.einsum(
                    "ni,ni->n",
                    moved[ok] - anchor.points[idx],
                    anchor.normals[idx],
                )
                final = float(np.abs(res).mean())
                if final < best_err:
                    best_err = final
                    best = current
            break
    return IcpResult(transform=best, error=best_err, iterations=iterations, correspondences=n_corr)
