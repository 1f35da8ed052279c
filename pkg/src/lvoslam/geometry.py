"""Camera intrinsics, Euler-angle rotations, back-projection and trajectory algebra.

Poses are plain 4x4 homogeneous ``float64`` arrays mapping camera coordinates
into world coordinates (the KITTI ground-truth convention). A trajectory is an
``(N, 4, 4)`` stack of such poses.

Euler angles are always the triple ``(e_z, e_y, e_x)`` composed as
``R = Rz(e_z) @ Ry(e_y) @ Rx(e_x)``. Every conversion in the package goes
through :func:`euler_to_rotation` / :func:`rotation_to_euler`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

_GIMBAL_EPS = 1e-9


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    skew: float = 0.0

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError(f"focal lengths must be positive, got fx={self.fx} fy={self.fy}")

    @property
    def matrix(self) -> np.ndarray:
        return np.array(
            [[self.fx, self.skew, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]]
        )

    def scaled(self, factor: float) -> "CameraIntrinsics":
        """Intrinsics for an image downsampled by ``factor``."""
        return CameraIntrinsics(
            self.fx / factor, self.fy / factor, self.cx / factor, self.cy / factor,
            self.skew / factor,
        )


@dataclass(frozen=True)
class RelativePose:
    """Frame k -> k+1 motion expressed in the camera frame of k."""

    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))
    euler: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=np.float64).reshape(3))
        object.__setattr__(self, "euler", np.asarray(self.euler, dtype=np.float64).reshape(3))

    def matrix(self) -> np.ndarray:
        return se3(euler_to_rotation(*self.euler), self.translation)

    @classmethod
    def from_matrix(cls, T: np.ndarray) -> "RelativePose":
        return cls(T[:3, 3].copy(), np.array(rotation_to_euler(T[:3, :3])))


@dataclass
class PointCloud:
    points: np.ndarray
    colors: np.ndarray | None = None

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        if self.colors is not None:
            self.colors = np.asarray(self.colors, dtype=np.uint8).reshape(-1, 3)
            if len(self.colors) != len(self.points):
                raise ValueError("colors and points differ in length")

    def __len__(self):
        return len(self.points)

    def transformed(self, T: np.ndarray) -> "PointCloud":
        return PointCloud(self.points @ T[:3, :3].T + T[:3, 3], self.colors)


def se3(R: np.ndarray, t) -> np.ndarray:
    T = np.eye(4)
    T[:3, :3] = R
    T[:3, 3] = t
    return T


def se3_inverse(T: np.ndarray) -> np.ndarray:
    """Closed-form inverse of a rigid transform (or a stack of them)."""
    R = T[..., :3, :3]
    t = T[..., :3, 3]
    Rt = np.swapaxes(R, -1, -2)
    out = np.zeros_like(T)
    out[..., :3, :3] = Rt
    out[..., :3, 3] = -np.einsum("...ij,...j->...i", Rt, t)
    out[..., 3, 3] = 1.0
    return out


def euler_to_rotation(e_z: float, e_y: float, e_x: float) -> np.ndarray:
    cz, sz = math.cos(e_z), math.sin(e_z)
    cy, sy = math.cos(e_y), math.sin(e_y)
    cx, sx = math.cos(e_x), math.sin(e_x)
    return np.array(
        [
            [cz * cy, cz * sy * sx - sz * cx, cz * sy * cx + sz * sx],
            [sz * cy, sz * sy * sx + cz * cx, sz * sy * cx - cz * sx],
            [-sy, cy * sx, cy * cx],
        ]
    )


def _wrap(a: float) -> float:
    # keep angles in (-pi, pi]
    return math.pi if a <= -math.pi else a


def rotation_to_euler(R: np.ndarray, tol: float = 1e-6) -> tuple[float, float, float]:
    """Inverse of :func:`euler_to_rotation`.

    At gimbal lock (``|e_y| = pi/2``) ``e_x`` is fixed to 0 and ``e_z`` carries
    the whole in-plane rotation.

    Raises:
        ValueError: if ``R`` is not orthonormal within ``tol``.
    """
    R = np.asarray(R, dtype=np.float64)
    if R.shape != (3, 3) or not np.all(np.isfinite(R)):
        raise ValueError("expected a finite 3x3 rotation matrix")
    if np.max(np.abs(R.T @ R - np.eye(3))) > tol or abs(np.linalg.det(R) - 1.0) > tol:
        raise ValueError("matrix is not a proper rotation")
    cos_y = math.hypot(R[0, 0], R[1, 0])
    if cos_y > _GIMBAL_EPS:
        e_z = math.atan2(R[1, 0], R[0, 0])
        e_y = math.atan2(-R[2, 0], cos_y)
        e_x = math.atan2(R[2, 1], R[2, 2])
    else:
        e_y = math.copysign(math.pi / 2, -R[2, 0])
        e_z = math.atan2(-R[0, 1], R[1, 1])
        e_x = 0.0
    return _wrap(e_z), e_y, _wrap(e_x)


def accumulate_trajectory(rels) -> np.ndarray:
    """Chain relative poses into absolute poses, starting from the identity."""
    poses = [np.eye(4)]
    for rel in rels:
        poses.append(poses[-1] @ rel.matrix())
    return np.stack(poses)


def relative_from_absolute(traj: np.ndarray) -> list[RelativePose]:
    traj = np.asarray(traj, dtype=np.float64)
    if traj.ndim != 3 or len(traj) < 2:
        raise ValueError("need a trajectory with at least 2 poses")
    deltas = se3_inverse(traj[:-1]) @ traj[1:]
    return [RelativePose.from_matrix(T) for T in deltas]


def backproject(intr: CameraIntrinsics, depth: np.ndarray, rgb: np.ndarray | None = None,
                step: int = 1) -> PointCloud:
    """Lift a depth raster to camera-frame points.

    Pixels with non-positive or non-finite depth are skipped. ``step`` keeps
    every ``step``-th pixel along both axes.
    """
    depth = np.asarray(depth)
    if rgb is not None and np.asarray(rgb).shape[:2] != depth.shape:
        raise ValueError(f"rgb shape {np.asarray(rgb).shape[:2]} does not match depth {depth.shape}")
    h, w = depth.shape
    v, u = np.mgrid[0:h:step, 0:w:step]
    d = depth[::step, ::step].astype(np.float64)
    valid = np.isfinite(d) & (d > 0)
    u = u[valid].astype(np.float64)
    v = v[valid].astype(np.float64)
    d = d[valid]
    Y = (v - intr.cy) * d / intr.fy
    X = (u - intr.skew * Y / d - intr.cx) * d / intr.fx
    colors = None
    if rgb is not None:
        colors = np.asarray(rgb)[::step, ::step][valid]
    return PointCloud(np.column_stack([X, Y, d]), colors)
