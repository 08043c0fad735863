"""Core geometric value types: point clouds, rigid transforms, boxes."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.transform import Rotation

from ._validation import check_normals, check_points
from .exceptions import ValidationError


def _frozen(a):
    a = np.array(a, dtype=np.float64, copy=True)
    a.flags.writeable = False
    return a


@dataclass(frozen=True, eq=False)
class PointCloud:
    """An (n, 3) array of points in meters with optional unit normals.

    Instances are immutable; operations return new clouds.
    """

    points: np.ndarray
    normals: np.ndarray | None = None

    def __post_init__(self):
        pts = check_points(self.points)
        nrm = check_normals(self.normals, pts.shape[0])
        object.__setattr__(self, "points", _frozen(pts))
        object.__setattr__(self, "normals", None if nrm is None else _frozen(nrm))

    def __len__(self):
        return self.points.shape[0]

    @property
    def has_normals(self):
        return self.normals is not None

    def subset(self, index):
        """Cloud restricted to ``index`` (boolean mask or integer indices)."""
        return PointCloud(
            self.points[index],
            None if self.normals is None else self.normals[index],
        )

    def with_normals(self, normals):
        return PointCloud(self.points, normals)

    def without_normals(self):
        return PointCloud(self.points)

    def transformed(self, T: RigidTransform) -> PointCloud:
        pts = T.apply(self.points)
        nrm = None if self.normals is None else T.rotate(self.normals)
        if nrm is not None:
            # re-normalize away the last-ulp drift from the rotation
            nrm = nrm / np.linalg.norm(nrm, axis=1, keepdims=True)
        return PointCloud(pts, nrm)

    @classmethod
    def concatenate(cls, clouds):
        clouds = list(clouds)
        if not clouds:
            return cls(np.empty((0, 3)))
        pts = np.vstack([c.points for c in clouds])
        if all(c.has_normals for c in clouds):
            return cls(pts, np.vstack([c.normals for c in clouds]))
        return cls(pts)

    def allclose(self, other, atol=1e-12):
        if len(self) != len(other) or self.has_normals != other.has_normals:
            return False
        ok = np.allclose(self.points, other.points, rtol=0, atol=atol)
        if self.has_normals:
            ok = ok and np.allclose(self.normals, other.normals, rtol=0, atol=atol)
        return bool(ok)


@dataclass(frozen=True, eq=False)
class RigidTransform:
    """An element of SE(3) acting as ``x -> R @ x + t``."""

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=np.float64)
        t = np.asarray(self.translation, dtype=np.float64).reshape(-1)
        if R.shape != (3, 3) or t.shape != (3,):
            raise ValidationError("rotation must be 3x3 and translation a 3-vector")
        if not (np.all(np.isfinite(R)) and np.all(np.isfinite(t))):
            raise ValidationError("transform contains non-finite values")
        if not np.allclose(R @ R.T, np.eye(3), atol=1e-9) or abs(np.linalg.det(R) - 1) > 1e-9:
            raise ValidationError("rotation must be orthonormal with determinant +1")
        object.__setattr__(self, "rotation", _frozen(R))
        object.__setattr__(self, "translation", _frozen(t))

    @classmethod
    def identity(cls):
        return cls()

    @classmethod
    def from_matrix(cls, M):
        M = np.asarray(M, dtype=np.float64)
        return cls(M[:3, :3], M[:3, 3])

    @classmethod
    def from_rotvec(cls, rotvec, translation=(0.0, 0.0, 0.0)):
        return cls(_orthonormalize(Rotation.from_rotvec(rotvec).as_matrix()), translation)

    @classmethod
    def from_quaternion(cls, quat_xyzw, translation):
        R = Rotation.from_quat(np.asarray(quat_xyzw, dtype=np.float64)).as_matrix()
        return cls(_orthonormalize(R), translation)

    @classmethod
    def from_xyz_yaw(cls, x, y, z, yaw):
        return cls.from_rotvec([0.0, 0.0, yaw], [x, y, z])

    def as_matrix(self):
        M = np.eye(4)
        M[:3, :3] = self.rotation
        M[:3, 3] = self.translation
        return M

    def as_quaternion(self):
        """Rotation as a scalar-last unit quaternion."""
        return Rotation.from_matrix(self.rotation).as_quat()

    def as_rotvec(self):
        return Rotation.from_matrix(self.rotation).as_rotvec()

    @property
    def yaw(self):
        return float(np.arctan2(self.rotation[1, 0], self.rotation[0, 0]))

    def __matmul__(self, other: RigidTransform) -> RigidTransform:
        R = _orthonormalize(self.rotation @ other.rotation)
        return RigidTransform(R, self.rotation @ other.translation + self.translation)

    def inverse(self) -> RigidTransform:
        Rt = self.rotation.T
        return RigidTransform(Rt.copy(), -Rt @ self.translation)

    def apply(self, points):
        points = np.asarray(points, dtype=np.float64)
        return points @ self.rotation.T + self.translation

    def rotate(self, vectors):
        return np.asarray(vectors, dtype=np.float64) @ self.rotation.T

    def rotation_angle(self):
        """Angle (rad) of the rotation part."""
        c = (np.trace(self.rotation) - 1.0) / 2.0
        return float(np.arccos(np.clip(c, -1.0, 1.0)))

    def distance_to(self, other: RigidTransform):
        """(translation error in m, rotation error in rad) between two poses."""
        delta = self.inverse() @ other
        return float(np.linalg.norm(self.translation - other.translation)), delta.rotation_angle()

    def allclose(self, other, atol=1e-9):
        return bool(
            np.allclose(self.rotation, other.rotation, rtol=0, atol=atol)
            and np.allclose(self.translation, other.translation, rtol=0, atol=atol)
        )


def _orthonormalize(R):
    # project onto SO(3) so that chained products keep det = +1 to 1e-15
    U, _, Vt = np.linalg.svd(R)
    Q = U @ Vt
    if np.linalg.det(Q) < 0:
        U[:, -1] *= -1
        Q = U @ Vt
    return Q


@dataclass(frozen=True, eq=False)
class BoundingBox:
    """Axis-aligned 3D box given by its min and max corners (meters)."""

    min_corner: np.ndarray
    max_corner: np.ndarray

    def __post_init__(self):
        lo = np.asarray(self.min_corner, dtype=np.float64).reshape(-1)
        hi = np.asarray(self.max_corner, dtype=np.float64).reshape(-1)
        if lo.shape != (3,) or hi.shape != (3,):
            raise ValidationError("box corners must be 3-vectors")
        if not (np.all(np.isfinite(lo)) and np.all(np.isfinite(hi))):
            raise ValidationError("box corners must be finite")
        if np.any(lo > hi):
            raise ValidationError(f"box min corner {lo} exceeds max corner {hi}")
        object.__setattr__(self, "min_corner", _frozen(lo))
        object.__setattr__(self, "max_corner", _frozen(hi))

    def __eq__(self, other):
        if not isinstance(other, BoundingBox):
            return NotImplemented
        return bool(np.array_equal(self.min_corner, other.min_corner)
                    and np.array_equal(self.max_corner, other.max_corner))

    def __hash__(self):
        return hash((self.min_corner.tobytes(), self.max_corner.tobytes()))

    @property
    def center(self):
        return (self.min_corner + self.max_corner) / 2.0

    def contains(self, points):
        points = np.asarray(points, dtype=np.float64)
        return np.all((points >= self.min_corner) & (points <= self.max_corner), axis=1)
