"""SE(3)/SO(3) algebra used by every pose computation in the pipeline.

Rotations are plain 3x3 float64 arrays, axis-angle vectors are 3-vectors whose
norm is the rotation angle, and ``Pose`` pairs a rotation with a translation.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

# Tolerances

ORTHO_TOL = 1e-9
_SMALL_ANGLE = 1e-12
# Below this distance from pi the axis is recovered from the symmetric part of R
_NEAR_PI = 1e-2


@dataclass(frozen=True, eq=False)
class Pose:
    """Rigid transform [R | t] mapping points from a child frame into a parent frame."""

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        r = np.array(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.array(self.translation, dtype=np.float64).reshape(3)
        r.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_translation(cls, t) -> "Pose":
        return cls(np.eye(3), np.asarray(t, dtype=np.float64))

    @classmethod
    def from_matrix(cls, m: np.ndarray) -> "Pose":
        m = np.asarray(m, dtype=np.float64)
        return cls(m[:3, :3], m[:3, 3])

    def matrix(self) -> np.ndarray:
        """Return the 4x4 homogeneous matrix."""
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def to_floats(self) -> np.ndarray:
        """Serialize as 12 floats: row-major rotation followed by translation."""
        return np.concatenate([self.rotation.reshape(9), self.translation])

    @classmethod
    def from_floats(cls, values) -> "Pose":
        v = np.asarray(values, dtype=np.float64).reshape(12)
        return cls(v[:9].reshape(3, 3), v[9:])

    def transform_points(self, points: np.ndarray) -> np.ndarray:
        """Map an (N, 3) array of child-frame points into the parent frame."""
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        return pts @ self.rotation.T + self.translation

    def is_valid(self, tol: float = ORTHO_TOL) -> bool:
        return is_rotation(self.rotation, tol)

    def __repr__(self) -> str:
        return f"Pose(rotation={self.rotation.tolist()}, translation={self.translation.tolist()})"


def is_rotation(r: np.ndarray, tol: float = ORTHO_TOL) -> bool:
    """Check RᵀR = I and det(R) = +1 within ``tol``."""
    r = np.asarray(r, dtype=np.float64)
    if r.shape != (3, 3) or not np.all(np.isfinite(r)):
        return False
    return bool(np.max(np.abs(r.T @ r - np.eye(3))) < tol and abs(np.linalg.det(r) - 1.0) < tol)


# Elementary rotations


def rot_x(angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def rot_y(angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def rot_z(angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def skew(v) -> np.ndarray:
    x, y, z = np.asarray(v, dtype=np.float64).reshape(3)
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


# Group operations


def compose(a: Pose, b: Pose) -> Pose:
    """Return a ∘ b, the homogeneous product a·b."""
    return Pose(a.rotation @ b.rotation, a.rotation @ b.translation + a.translation)


def inverse(p: Pose) -> Pose:
    rt = p.rotation.T
    return Pose(rt, -(rt @ p.translation))


def rot_update(base: np.ndarray, delta: np.ndarray) -> np.ndarray:
    """SO(3) update R ⊕ ΔR with the offset expressed in the body frame of ``base``."""
    return np.asarray(base, dtype=np.float64) @ np.asarray(delta, dtype=np.float64)


def rot_update_left(base: np.ndarray, delta: np.ndarray) -> np.ndarray:
    """SO(3) update with the offset expressed in the parent frame (ΔR · R)."""
    return np.asarray(delta, dtype=np.float64) @ np.asarray(base, dtype=np.float64)


def project_to_rotation(m: np.ndarray) -> np.ndarray:
    """Nearest rotation matrix (polar decomposition through the SVD)."""
    u, _, vt = np.linalg.svd(np.asarray(m, dtype=np.float64))
    d = np.sign(np.linalg.det(u @ vt)) or 1.0
    return u @ np.diag([1.0, 1.0, d]) @ vt


# Axis-angle


def _canonical_axis_sign(axis: np.ndarray) -> np.ndarray:
    """Flip ``axis`` so that its first nonzero component is positive."""
    for component in axis:
        if abs(component) > _SMALL_ANGLE:
            return axis if component > 0 else -axis
    return axis


def canonical_axis_angle(v) -> np.ndarray:
    """Wrap an axis-angle vector so that its magnitude lies in [0, pi]."""
    v = np.asarray(v, dtype=np.float64).reshape(3)
    angle = float(np.linalg.norm(v))
    if angle < _SMALL_ANGLE:
        return np.zeros(3)
    axis = v / angle
    angle = float(np.mod(angle, 2.0 * np.pi))
    if angle > np.pi:
        angle = 2.0 * np.pi - angle
        axis = -axis
    if angle < _SMALL_ANGLE:
        return np.zeros(3)
    if np.pi - angle < _SMALL_ANGLE:
        return _canonical_axis_sign(axis) * np.pi
    return axis * angle


def from_axis_angle(v) -> np.ndarray:
    """Rodrigues' formula."""
    v = np.asarray(v, dtype=np.float64).reshape(3)
    angle = float(np.linalg.norm(v))
    if angle < _SMALL_ANGLE:
        return np.eye(3) + skew(v)
    k = skew(v / angle)
    return np.eye(3) + np.sin(angle) * k + (1.0 - np.cos(angle)) * (k @ k)


def to_axis_angle(r: np.ndarray) -> np.ndarray:
    """Log map of SO(3); magnitude in [0, pi], canonical axis sign at pi."""
    r = np.asarray(r, dtype=np.float64)
    vee = np.array([r[2, 1] - r[1, 2], r[0, 2] - r[2, 0], r[1, 0] - r[0, 1]])
    sin_a = 0.5 * np.linalg.norm(vee)
    cos_a = 0.5 * (np.trace(r) - 1.0)
    angle = float(np.arctan2(sin_a, cos_a))
    if angle < _SMALL_ANGLE:
        return np.zeros(3)
    if np.pi - angle > _NEAR_PI:
        return vee * (angle / (2.0 * sin_a))

    # Near pi: the antisymmetric part vanishes, recover the axis from aaᵀ instead
    sym = 0.5 * (r + r.T)
    outer = (sym - cos_a * np.eye(3)) / (1.0 - cos_a)
    i = int(np.argmax(np.diag(outer)))
    axis = outer[:, i] / np.sqrt(max(outer[i, i], _SMALL_ANGLE))
    axis /= np.linalg.norm(axis)
    if np.linalg.norm(vee) > 1e-12:
        if float(axis @ vee) < 0.0:
            axis = -axis
    else:
        axis = _canonical_axis_sign(axis)
    return axis * angle


# Relative poses


def relative_pose(reference: Pose, target: Pose) -> tuple[np.ndarray, np.ndarray]:
    """Express ``target`` relative to ``reference`` with arm-base-frame deltas.

    Returns:
        (delta_p, delta_omega): translation difference and the axis-angle of
        R_target · R_referenceᵀ.
    """
    delta_p = target.translation - reference.translation
    delta_omega = to_axis_angle(target.rotation @ reference.rotation.T)
    return delta_p, delta_omega


def apply_relative(reference: Pose, delta_p, delta_omega) -> Pose:
    """Inverse of ``relative_pose``."""
    rotation = from_axis_angle(delta_omega) @ reference.rotation
    return Pose(rotation, reference.translation + np.asarray(delta_p, dtype=np.float64))


def rotation_angle(r: np.ndarray) -> float:
    return float(np.linalg.norm(to_axis_angle(r)))


def pose_error(a: Pose, b: Pose) -> tuple[float, float]:
    """Position (m) and orientation (rad) distance between two poses."""
    return (
        float(np.linalg.norm(a.translation - b.translation)),
        rotation_angle(a.rotation @ b.rotation.T),
    )


# Sampling


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    """Uniformly distributed rotation (from a normalized Gaussian quaternion)."""
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
            [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
            [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
        ]
    )


def random_unit_vector(rng: np.random.Generator) -> np.ndarray:
    v = rng.normal(size=3)
    return v / np.linalg.norm(v)


def random_pose(rng: np.random.Generator, scale: float = 1.0) -> Pose:
    return Pose(random_rotation(rng), rng.uniform(-scale, scale, size=3))
