"""SE(3) poses, box-plus/box-minus retraction and voxel indexing.

Rotations are stored as 3x3 matrices; quaternions (x, y, z, w) are used for
serialization only. The tangent space is the product chart SO(3) x R^3 with
twists ordered (rotational, translational).
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

SMALL_ANGLE = 1e-7


def hat(v):
    return np.array([[0.0, -v[2], v[1]], [v[2], 0.0, -v[0]], [-v[1], v[0], 0.0]])


def so3_exp(phi):
    phi = np.asarray(phi, dtype=float)
    theta = np.linalg.norm(phi)
    K = hat(phi)
    if theta < SMALL_ANGLE:
        return np.eye(3) + K + 0.5 * K @ K
    return np.eye(3) + np.sin(theta) / theta * K + (1.0 - np.cos(theta)) / theta**2 * K @ K


def so3_log(R):
    """Rotation vector of ``R``. Raises ValueError at angle pi."""
    R = np.asarray(R, dtype=float)
    w = np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    theta = np.arctan2(0.5 * np.linalg.norm(w), (np.trace(R) - 1.0) / 2.0)
    if theta < SMALL_ANGLE:
        # first-order: R - R^T = 2 [phi]x
        return 0.5 * w
    if np.pi - theta < 1e-9:
        raise ValueError("rotation angle is pi, log map is degenerate")
    return theta / (2.0 * np.sin(theta)) * w


def so3_right_jacobian_inv(phi):
    phi = np.asarray(phi, dtype=float)
    theta = np.linalg.norm(phi)
    K = hat(phi)
    if theta < SMALL_ANGLE:
        return np.eye(3) + 0.5 * K + K @ K / 12.0
    coef = 1.0 / theta**2 - (1.0 + np.cos(theta)) / (2.0 * theta * np.sin(theta))
    return np.eye(3) + 0.5 * K + coef * K @ K


def quat_to_matrix(q):
    x, y, z, w = np.asarray(q, dtype=float) / np.linalg.norm(q)
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
            [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
            [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
        ]
    )


def matrix_to_quat(R):
    """Unit quaternion (x, y, z, w) with w >= 0."""
    R = np.asarray(R, dtype=float)
    tr = np.trace(R)
    if tr > 0:
        s = 2.0 * np.sqrt(tr + 1.0)
        q = np.array([(R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s, 0.25 * s])
    else:
        i = int(np.argmax(np.diag(R)))
        j, k = (i + 1) % 3, (i + 2) % 3
        s = 2.0 * np.sqrt(1.0 + R[i, i] - R[j, j] - R[k, k])
        q = np.empty(4)
        q[i] = 0.25 * s
        q[j] = (R[j, i] + R[i, j]) / s
        q[k] = (R[k, i] + R[i, k]) / s
        q[3] = (R[k, j] - R[j, k]) / s
    q /= np.linalg.norm(q)
    if q[3] < 0:
        q = -q
    return q


def orthonormalize(R):
    U, _, Vt = np.linalg.svd(R)
    D = np.diag([1.0, 1.0, np.linalg.det(U @ Vt)])
    return U @ D @ Vt


@dataclass(frozen=True, eq=False)
class Pose:
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        R = np.array(self.rotation, dtype=float).reshape(3, 3)
        t = np.array(self.translation, dtype=float).reshape(3)
        R.flags.writeable = False
        t.flags.writeable = False
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls):
        return cls()

    @classmethod
    def from_translation(cls, x, y=0.0, z=0.0):
        return cls(np.eye(3), np.array([x, y, z], dtype=float))

    @classmethod
    def from_quat(cls, t, q):
        return cls(quat_to_matrix(q), t)

    @classmethod
    def from_yaw(cls, x, y, z, yaw):
        return cls(so3_exp([0.0, 0.0, yaw]), [x, y, z])

    @classmethod
    def from_matrix(cls, T):
        T = np.asarray(T, dtype=float)
        return cls(T[:3, :3], T[:3, 3])

    def matrix(self):
        T = np.eye(4)
        T[:3, :3] = self.rotation
        T[:3, 3] = self.translation
        return T

    def quat(self):
        return matrix_to_quat(self.rotation)

    def to_list(self):
        """tx ty tz qx qy qz qw"""
        return [float(v) for v in self.translation] + [float(v) for v in self.quat()]

    @classmethod
    def from_list(cls, values):
        values = list(values)
        if len(values) != 7:
            raise ValueError(f"expected 7 numbers, got {len(values)}")
        return cls.from_quat(values[:3], values[3:])

    def __matmul__(self, other):
        if isinstance(other, Pose):
            return compose(self, other)
        return self.apply(other)

    def inverse(self):
        Rt = self.rotation.T
        return Pose(Rt, -Rt @ self.translation)

    def apply(self, points):
        """Transform a point (3,) or points (N, 3)."""
        p = np.asarray(points, dtype=float)
        return p @ self.rotation.T + self.translation

    def yaw(self):
        return float(np.arctan2(self.rotation[1, 0], self.rotation[0, 0]))

    def renormalized(self):
        return Pose(orthonormalize(self.rotation), self.translation)

    def allclose(self, other, atol=1e-9):
        return np.allclose(self.rotation, other.rotation, atol=atol) and np.allclose(
            self.translation, other.translation, atol=atol
        )

    def __repr__(self):
        t = np.round(self.translation, 4).tolist()
        return f"Pose(t={t}, rotvec={np.round(so3_log_safe(self.rotation), 4).tolist()})"


def so3_log_safe(R):
    try:
        return so3_log(R)
    except ValueError:
        return np.array([np.pi, 0.0, 0.0])


def compose(a: Pose, b: Pose) -> Pose:
    return Pose(a.rotation @ b.rotation, a.rotation @ b.translation + a.translation)


def inverse(p: Pose) -> Pose:
    return p.inverse()


def compose_chain(poses, renormalize_every=100):
    """Compose a sequence of poses, re-orthonormalizing periodically to bound drift."""
    out = Pose.identity()
    for k, p in enumerate(poses, 1):
        out = compose(out, p)
        if k % renormalize_every == 0:
            out = out.renormalized()
    return out


def boxplus(p: Pose, xi) -> Pose:
    """Retract the twist ``xi`` = (rot, trans) at ``p`` (body-frame perturbation)."""
    xi = np.asarray(xi, dtype=float)
    return Pose(p.rotation @ so3_exp(xi[:3]), p.translation + p.rotation @ xi[3:])


def boxminus(a: Pose, b: Pose) -> np.ndarray:
    """Twist taking ``b`` to ``a``: boxplus(b, boxminus(a, b)) == a."""
    rot = so3_log(b.rotation.T @ a.rotation)
    trans = b.rotation.T @ (a.translation - b.translation)
    return np.concatenate([rot, trans])


def interpolate(a: Pose, b: Pose, s: float) -> Pose:
    """Geodesic interpolation, s in [0, 1]."""
    xi = boxminus(b, a)
    return boxplus(a, s * xi)


VOXEL_OFFSET = 1 << 20
VOXEL_BITS = 21


def voxel_keys(points, resolution):
    """Integer grid indices floor(p / resolution) as an (N, 3) int64 array."""
    if resolution <= 0:
        raise ValueError("voxel resolution must be positive")
    p = np.asarray(points, dtype=float).reshape(-1, 3)
    return np.floor(p / resolution).astype(np.int64)


def voxel_key(point, resolution):
    return tuple(int(v) for v in voxel_keys(point, resolution)[0])


def pack_keys(keys):
    """Pack (N, 3) voxel indices into single int64 hashes (each axis in +-2^20)."""
    k = np.asarray(keys, dtype=np.int64) + VOXEL_OFFSET
    return (k[:, 0] << (2 * VOXEL_BITS)) | (k[:, 1] << VOXEL_BITS) | k[:, 2]


def unpack_keys(packed):
    packed = np.asarray(packed, dtype=np.int64)
    mask = (1 << VOXEL_BITS) - 1
    keys = np.stack([(packed >> (2 * VOXEL_BITS)) & mask, (packed >> VOXEL_BITS) & mask, packed & mask], axis=1)
    return keys - VOXEL_OFFSET


def packed_voxels(points, resolution):
    return pack_keys(voxel_keys(points, resolution))


def voxel_filter(points, resolution, values=None):
    """One representative point (the mean) per occupied voxel.

    Returns (points, packed keys[, reduced values]) in sorted key order. ``values``
    is reduced with max per voxel (used for timestamps).
    """
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    if len(pts) == 0:
        empty = np.zeros((0, 3))
        if values is None:
            return empty, np.zeros(0, dtype=np.int64)
        return empty, np.zeros(0, dtype=np.int64), np.zeros(0)
    packed = packed_voxels(pts, resolution)
    uniq, inv, counts = np.unique(packed, return_inverse=True, return_counts=True)
    sums = np.zeros((len(uniq), 3))
    np.add.at(sums, inv, pts)
    out = sums / counts[:, None]
    if values is None:
        return out, uniq
    red = np.full(len(uniq), -np.inf)
    np.maximum.at(red, inv, np.asarray(values, dtype=float))
    return out, uniq, red


@dataclass(frozen=True, eq=False)
class Aabb:
    min: np.ndarray
    max: np.ndarray

    def __post_init__(self):
        lo = np.asarray(self.min, dtype=float)
        hi = np.asarray(self.max, dtype=float)
        if np.any(lo > hi):
            raise ValueError("Aabb min must be <= max")
        object.__setattr__(self, "min", lo)
        object.__setattr__(self, "max", hi)

    @classmethod
    def from_points(cls, points):
        p = np.asarray(points, dtype=float).reshape(-1, 3)
        return cls(p.min(axis=0), p.max(axis=0))

    def inflated(self, margin):
        return Aabb(self.min - margin, self.max + margin)

    def overlaps(self, other):
        return bool(np.all(self.min <= other.max) and np.all(other.min <= self.max))

    @property
    def center(self):
        return 0.5 * (self.min + self.max)

    @property
    def diagonal(self):
        return float(np.linalg.norm(self.max - self.min))


def traverse_cells(start, end, cell):
    """Integer cells visited by the segment start->end (Amanatides-Woo 3D-DDA)."""
    start = np.asarray(start, dtype=float)
    end = np.asarray(end, dtype=float)
    cur = np.floor(start / cell).astype(np.int64)
    last = np.floor(end / cell).astype(np.int64)
    d = end - start
    cells = [tuple(cur)]
    step = np.sign(d).astype(np.int64)
    with np.errstate(divide="ignore", invalid="ignore"):
        next_bound = (cur + (step > 0)) * cell
        t_max = np.where(d != 0, (next_bound - start) / d, np.inf)
        t_delta = np.where(d != 0, cell / np.abs(d), np.inf)
    n_steps = int(np.abs(last - cur).sum())
    for _ in range(n_steps):
        axis = int(np.argmin(t_max))
        if t_max[axis] > 1.0:
            break
        cur[axis] += step[axis]
        t_max[axis] += t_delta[axis]
        cells.append(tuple(cur))
    return cells
