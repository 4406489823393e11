"""Rigid-body transform algebra.

Conventions
-----------
``T_ab`` maps coordinates expressed in frame ``b`` into frame ``a``::

    p_a = R_ab @ p_b + t_ab

so ``compose(T_ab, T_bc) == T_ac`` and the translation of ``T_ab`` is the
position of frame ``b``'s origin expressed in frame ``a``.

Euler angles use the Z-Y-X (yaw, pitch, roll) factorisation
``R = Rz(yaw) @ Ry(pitch) @ Rx(roll)`` with z up.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

ORTHO_TOL = 1e-9
_REJECT_TOL = 1e-6
GIMBAL_LOCK_TOL = 1e-6


class GimbalLockError(ValueError):
    """Raised when yaw is requested at |pitch| ~ pi/2."""


def skew(v: np.ndarray) -> np.ndarray:
    return np.array([[0.0, -v[2], v[1]], [v[2], 0.0, -v[0]], [-v[1], v[0], 0.0]])


def rot_x(a: float) -> np.ndarray:
    c, s = math.cos(a), math.sin(a)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def rot_y(a: float) -> np.ndarray:
    c, s = math.cos(a), math.sin(a)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def rot_z(a: float) -> np.ndarray:
    c, s = math.cos(a), math.sin(a)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def euler_to_matrix(yaw: float, pitch: float, roll: float) -> np.ndarray:
    return rot_z(yaw) @ rot_y(pitch) @ rot_x(roll)


def matrix_to_euler(R: np.ndarray) -> tuple[float, float, float]:
    """Return (yaw, pitch, roll) of a Z-Y-X factorisation.

    Raises GimbalLockError when the pitch is within GIMBAL_LOCK_TOL of +-pi/2.
    """
    s = -float(R[2, 0])
    s = min(1.0, max(-1.0, s))
    pitch = math.asin(s)
    if abs(abs(pitch) - math.pi / 2) < GIMBAL_LOCK_TOL:
        raise GimbalLockError(f"pitch {pitch:.9f} rad is at gimbal lock")
    yaw = math.atan2(R[1, 0], R[0, 0])
    roll = math.atan2(R[2, 1], R[2, 2])
    return wrap_angle(yaw), pitch, wrap_angle(roll)


def wrap_angle(a: float) -> float:
    """Wrap an angle into (-pi, pi]."""
    w = math.remainder(a, 2.0 * math.pi)
    if w <= -math.pi:
        w += 2.0 * math.pi
    return w


def exp_so3(w: np.ndarray) -> np.ndarray:
    """Rodrigues' formula."""
    w = np.asarray(w, dtype=float)
    theta = float(np.linalg.norm(w))
    K = skew(w)
    if theta < 1e-8:
        # second-order Taylor expansion keeps the result orthonormal to ~1e-16
        return np.eye(3) + K + 0.5 * K @ K
    return (
        np.eye(3)
        + (math.sin(theta) / theta) * K
        + ((1.0 - math.cos(theta)) / theta**2) * K @ K
    )


def log_so3(R: np.ndarray) -> np.ndarray:
    """Rotation vector of R with magnitude in [0, pi]."""
    R = np.asarray(R, dtype=float)
    axis_sin = 0.5 * np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    s = float(np.linalg.norm(axis_sin))
    c = 0.5 * (float(np.trace(R)) - 1.0)
    theta = math.atan2(s, c)
    if theta < 1e-8:
        return axis_sin
    if math.pi - theta > 1e-4:
        return axis_sin * (theta / s)
    # near pi the antisymmetric part vanishes; sym(R) - cI = (1 - c) k k^T
    B = (0.5 * (R + R.T) - c * np.eye(3)) / (1.0 - c)
    k = int(np.argmax(np.diag(B)))
    axis = B[:, k] / math.sqrt(max(B[k, k], 1e-300))
    axis /= np.linalg.norm(axis)
    if np.dot(axis, axis_sin) < 0.0:
        axis = -axis
    return axis * theta


def orthonormalize(R: np.ndarray) -> np.ndarray:
    U, _, Vt = np.linalg.svd(R)
    D = np.diag([1.0, 1.0, np.linalg.det(U @ Vt)])
    return U @ D @ Vt


def orthonormality_defect(R: np.ndarray) -> float:
    return float(np.abs(R.T @ R - np.eye(3)).max())


@dataclass(frozen=True)
class AxisAngle:
    """Rotation vector; magnitude is the rotation angle in radians."""

    vector: np.ndarray

    @classmethod
    def from_matrix(cls, R: np.ndarray) -> "AxisAngle":
        return cls(log_so3(R))

    @property
    def angle(self) -> float:
        return float(np.linalg.norm(self.vector))

    def to_matrix(self) -> np.ndarray:
        return exp_so3(self.vector)


@dataclass(frozen=True, eq=False)
class RigidTransform:
    """An element of SE(3): rotation matrix plus translation in metres."""

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self) -> None:
        R = np.array(self.rotation, dtype=float).reshape(3, 3)
        t = np.array(self.translation, dtype=float).reshape(3)
        if not (np.all(np.isfinite(R)) and np.all(np.isfinite(t))):
            raise ValueError("transform contains non-finite values")
        defect = orthonormality_defect(R)
        if defect > ORTHO_TOL:
            if defect > _REJECT_TOL or np.linalg.det(R) < 0.0:
                raise ValueError(f"rotation is not in SO(3) (defect {defect:.3g})")
            R = orthonormalize(R)
        elif np.linalg.det(R) < 0.0:
            raise ValueError("rotation has determinant -1")
        R.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls()

    @classmethod
    def from_matrix(cls, T: np.ndarray) -> "RigidTransform":
        T = np.asarray(T, dtype=float)
        return cls(T[:3, :3], T[:3, 3])

    @classmethod
    def from_translation(cls, x: float, y: float, z: float) -> "RigidTransform":
        return cls(np.eye(3), np.array([x, y, z], dtype=float))

    @classmethod
    def from_euler(cls, yaw=0.0, pitch=0.0, roll=0.0, translation=(0.0, 0.0, 0.0)):
        return cls(euler_to_matrix(yaw, pitch, roll), np.asarray(translation, dtype=float))

    @classmethod
    def from_rotvec(cls, rotvec, translation=(0.0, 0.0, 0.0)) -> "RigidTransform":
        return cls(exp_so3(np.asarray(rotvec, dtype=float)), np.asarray(translation, dtype=float))

    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.rotation
        T[:3, 3] = self.translation
        return T

    def inverse(self) -> "RigidTransform":
        Rt = self.rotation.T
        return RigidTransform(Rt, -Rt @ self.translation)

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Map a (3,) point or (N, 3) array of points."""
        p = np.asarray(points, dtype=float)
        return p @ self.rotation.T + self.translation

    def __matmul__(self, other: "RigidTransform") -> "RigidTransform":
        return compose(self, other)

    def is_close(self, other: "RigidTransform", tol: float = 1e-9) -> bool:
        return (
            float(np.linalg.norm(self.rotation - other.rotation)) <= tol
            and float(np.linalg.norm(self.translation - other.translation)) <= tol
        )

    def __repr__(self) -> str:
        yaw, pitch, roll = _safe_euler(self.rotation)
        t = self.translation
        return (
            f"RigidTransform(t=[{t[0]:.4f}, {t[1]:.4f}, {t[2]:.4f}], "
            f"ypr=[{yaw:.4f}, {pitch:.4f}, {roll:.4f}])"
        )


def _safe_euler(R):
    try:
        return matrix_to_euler(R)
    except GimbalLockError:
        return (float("nan"), math.copysign(math.pi / 2, -R[2, 0]), float("nan"))


def compose(T_ab: RigidTransform, T_bc: RigidTransform) -> RigidTransform:
    """Return T_ac. Re-orthonormalises when the product drifts beyond 1e-9."""
    R = T_ab.rotation @ T_bc.rotation
    t = T_ab.rotation @ T_bc.translation + T_ab.translation
    return RigidTransform(R, t)


def invert(T: RigidTransform) -> RigidTransform:
    return T.inverse()


def yaw_of(T: RigidTransform) -> float:
    """Yaw of the Z-Y-X factorisation of T's rotation, in (-pi, pi]."""
    return matrix_to_euler(T.rotation)[0]


def rotation_magnitude(T: RigidTransform | np.ndarray) -> float:
    """Axis-angle magnitude of the rotation part, in [0, pi]."""
    R = T.rotation if isinstance(T, RigidTransform) else np.asarray(T, dtype=float)
    s = 0.5 * math.sqrt(
        (R[2, 1] - R[1, 2]) ** 2 + (R[0, 2] - R[2, 0]) ** 2 + (R[1, 0] - R[0, 1]) ** 2
    )
    c = 0.5 * (float(np.trace(R)) - 1.0)
    return math.atan2(s, c)


def translation_distance(T: RigidTransform) -> float:
    return float(np.linalg.norm(T.translation))
