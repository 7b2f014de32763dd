"""SO(3)/SE(3) arithmetic, 6D rotations, weighted Kabsch and error metrics.

Pose convention used everywhere in the package: the relative pose of an
edge (u, v) is ``T_uv = T_u o inverse(T_v)``, hence

    R_uv = R_u R_v^T,    t_uv = t_u - R_u R_v^T t_v.

All routines work in float64.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class DegenerateSixd(ValueError):
    pass


class DegenerateConfiguration(ValueError):
    pass


@dataclass(frozen=True)
class RigidPose:
    r: np.ndarray = field(default_factory=lambda: np.eye(3))
    t: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        object.__setattr__(self, "r", np.asarray(self.r, dtype=np.float64).reshape(3, 3))
        object.__setattr__(self, "t", np.asarray(self.t, dtype=np.float64).reshape(3))

    @classmethod
    def identity(cls) -> "RigidPose":
        return cls(np.eye(3), np.zeros(3))

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Transform an (n, 3) point array."""
        return np.asarray(points, dtype=np.float64) @ self.r.T + self.t

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.r
        m[:3, 3] = self.t
        return m


def compose(a: RigidPose, b: RigidPose) -> RigidPose:
    return RigidPose(a.r @ b.r, a.r @ b.t + a.t)


def inverse(a: RigidPose) -> RigidPose:
    rt = a.r.T
    return RigidPose(rt, -rt @ a.t)


def relative(tu: RigidPose, tv: RigidPose) -> RigidPose:
    """Relative pose of edge (u, v): ``T_u o inverse(T_v)``."""
    return compose(tu, inverse(tv))


def sixd_to_rotation(s, eps: float = 1e-8) -> np.ndarray:
    """Gram-Schmidt a 6-vector (a1, a2) into the rotation [b1 b2 b3]."""
    s = np.asarray(s, dtype=np.float64).reshape(6)
    a1, a2 = s[:3], s[3:]
    n1 = np.linalg.norm(a1)
    if n1 < eps:
        raise DegenerateSixd(f"first column too short: |a1|={n1:g}")
    b1 = a1 / n1
    u2 = a2 - (b1 @ a2) * b1
    n2 = np.linalg.norm(u2)
    if n2 < eps:
        raise DegenerateSixd(f"second column parallel to first: residual {n2:g}")
    b2 = u2 / n2
    b3 = np.cross(b1, b2)
    return np.stack([b1, b2, b3], axis=1)


def rotation_to_sixd(r: np.ndarray) -> np.ndarray:
    r = np.asarray(r, dtype=np.float64)
    return np.concatenate([r[:, 0], r[:, 1]])


def rotation_error(pred: np.ndarray, gt: np.ndarray) -> float:
    """Geodesic angle between two rotations, in radians."""
    return float(rotation_angles(np.asarray(pred).T @ np.asarray(gt)))


def rotation_angles(d: np.ndarray) -> np.ndarray:
    """Rotation angle of each (..., 3, 3) matrix; atan2 keeps small angles exact."""
    cos = (np.trace(d, axis1=-2, axis2=-1) - 1.0) / 2.0
    skew = np.stack([d[..., 2, 1] - d[..., 1, 2], d[..., 0, 2] - d[..., 2, 0], d[..., 1, 0] - d[..., 0, 1]], -1)
    return np.arctan2(np.linalg.norm(skew, axis=-1) / 2.0, cos)


def translation_error(pred, gt) -> float:
    return float(np.linalg.norm(np.asarray(pred, dtype=np.float64) - np.asarray(gt, dtype=np.float64)))


def axis_angle(axis, angle: float) -> np.ndarray:
    """Rodrigues formula; the axis need not be normalised."""
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    k = np.array([[0.0, -axis[2], axis[1]], [axis[2], 0.0, -axis[0]], [-axis[1], axis[0], 0.0]])
    return np.eye(3) + np.sin(angle) * k + (1.0 - np.cos(angle)) * (k @ k)


def euler_zyx(yaw: float, pitch: float, roll: float) -> np.ndarray:
    return axis_angle([0, 0, 1], yaw) @ axis_angle([0, 1, 0], pitch) @ axis_angle([1, 0, 0], roll)


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    """Uniform rotation from a random unit quaternion."""
    q = rng.standard_normal(4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
        [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
        [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
    ])


def random_pose(rng: np.random.Generator, t_range: float = 6.0) -> RigidPose:
    return RigidPose(random_rotation(rng), rng.uniform(-t_range, t_range, 3))


def project_to_rotation(m: np.ndarray) -> np.ndarray:
    u, _, vt = np.linalg.svd(m)
    d = np.sign(np.linalg.det(u @ vt))
    return u @ np.diag([1.0, 1.0, d]) @ vt


def kabsch(src, dst, weights=None) -> RigidPose:
    """Weighted least-squares rigid transform mapping ``src`` onto ``dst``.

    Minimises sum_i w_i |R src_i + t - dst_i|^2. A reflection in the SVD
    solution is corrected by flipping the sign of the smallest singular
    direction.
    """
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    if src.shape != dst.shape or src.ndim != 2 or src.shape[1] != 3:
        raise ValueError(f"shape mismatch: {src.shape} vs {dst.shape}")
    w = np.ones(len(src)) if weights is None else np.asarray(weights, dtype=np.float64)
    if np.any(w < 0):
        raise ValueError("weights must be nonnegative")
    wsum = w.sum()
    if np.count_nonzero(w) < 3 or wsum <= 0:
        raise DegenerateConfiguration("need at least 3 weighted points")
    cs = w @ src / wsum
    cd = w @ dst / wsum
    h = (src - cs).T @ ((dst - cd) * w[:, None])
    u, sv, vt = np.linalg.svd(h)
    if sv[1] <= 1e-12 * max(sv[0], 1e-300):
        raise DegenerateConfiguration("covariance rank < 2 (collinear points)")
    d = np.sign(np.linalg.det(vt.T @ u.T))
    if d == 0:
        d = 1.0
    r = vt.T @ np.diag([1.0, 1.0, d]) @ u.T
    return RigidPose(r, cd - r @ cs)
