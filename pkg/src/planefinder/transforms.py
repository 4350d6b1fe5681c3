"""Rigid-transform algebra: composition, inversion and representation conversions.

A rigid transform is stored canonically as a translation vector plus a unit
quaternion (w, x, y, z) on the w >= 0 hemisphere.  Rotation matrices, Euler
angles (three axis-order conventions) and anchor-point triplets convert to and
from that canonical form at the boundary.  Delta transforms are expressed in
the coordinate frame of the base plane, so ``compose(base, delta)`` moves the
base plane along its own local axes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

# Conventions are intrinsic rotations applied first-named-axis first.
EULER_CONVENTIONS = ("xyz", "yxz", "zxy")

_AXIS_INDEX = {"x": 0, "y": 1, "z": 2}
_CYCLIC = {(0, 1, 2), (1, 2, 0), (2, 0, 1)}

# cos(middle angle) below this counts as gimbal lock: the first/third angles
# are no longer separable and we pin the third to zero.
_GIMBAL_EPS = 1e-6


def _as_vec3(v) -> np.ndarray:
    a = np.asarray(v, dtype=float)
    if a.shape != (3,):
        raise ValueError(f"expected a 3-vector, got shape {a.shape}")
    return a


def _as_quat(q) -> np.ndarray:
    a = np.asarray(q, dtype=float)
    if a.shape != (4,):
        raise ValueError(f"expected a 4-component quaternion, got shape {a.shape}")
    return a


def quat_canonical(q: np.ndarray) -> np.ndarray:
    """Flip a unit quaternion onto the w >= 0 hemisphere.

    For w == 0 exactly, the sign of the first nonzero vector component breaks
    the tie so every rotation has one canonical representative.
    """
    q = _as_quat(q)
    if q[0] < 0.0:
        return -q
    if q[0] == 0.0:
        for c in q[1:]:
            if c != 0.0:
                return q if c > 0.0 else -q
    return q


def normalize_quat(raw) -> np.ndarray:
    """Project a raw 4-vector onto the unit quaternions (w >= 0).

    Raises ValueError on near-zero input, where no direction is defined.
    """
    q = _as_quat(raw)
    n = float(np.linalg.norm(q))
    if n <= 1e-12:
        raise ValueError("degenerate quaternion prediction: norm is (near) zero")
    return quat_canonical(q / n)


def quat_identity() -> np.ndarray:
    return np.array([1.0, 0.0, 0.0, 0.0])


def quat_multiply(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Hamilton product a * b; composes rotation b expressed in a's frame."""
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ])


def quat_conjugate(q: np.ndarray) -> np.ndarray:
    return np.array([q[0], -q[1], -q[2], -q[3]])


def quat_rotate(q: np.ndarray, v) -> np.ndarray:
    """Rotate vector v by unit quaternion q."""
    v = _as_vec3(v)
    qv = q[1:]
    t = 2.0 * np.cross(qv, v)
    return v + q[0] * t + np.cross(qv, t)


def quat_from_axis_angle(axis, angle_deg: float) -> np.ndarray:
    """Unit quaternion for a rotation of angle_deg about the given axis."""
    axis = _as_vec3(axis)
    n = float(np.linalg.norm(axis))
    if n <= 1e-12:
        raise ValueError("rotation axis must be nonzero")
    half = math.radians(angle_deg) / 2.0
    return quat_canonical(np.concatenate([[math.cos(half)], math.sin(half) / n * axis]))


def rotation_angle_deg(q: np.ndarray) -> float:
    """Rotation angle of q in degrees, in [0, 180]."""
    return math.degrees(2.0 * math.acos(min(1.0, abs(float(q[0])))))


def geodesic_angle(q1: np.ndarray, q2: np.ndarray) -> float:
    """Geodesic angle between two rotations, in degrees [0, 180].

    Equals 2*arccos(|<q1, q2>|) but is computed through the chord length so
    identical inputs give exactly zero.
    """
    q1, q2 = _as_quat(q1), _as_quat(q2)
    chord = min(float(np.linalg.norm(q1 - q2)), float(np.linalg.norm(q1 + q2)))
    return math.degrees(4.0 * math.asin(min(1.0, 0.5 * chord)))


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    """3x3 rotation matrix of a unit quaternion (w, x, y, z)."""
    w, x, y, z = _as_quat(q)
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def is_rotation_matrix(m: np.ndarray, tol: float = 1e-9) -> bool:
    m = np.asarray(m, dtype=float)
    if m.shape != (3, 3):
        return False
    if not np.all(np.abs(m.T @ m - np.eye(3)) <= tol):
        return False
    return abs(float(np.linalg.det(m)) - 1.0) <= tol


def matrix_to_quat(m: np.ndarray) -> np.ndarray:
    """Unit quaternion of a rotation matrix (Shepperd's branching method).

    Rejects input that is not a rotation to within 1e-6.
    """
    m = np.asarray(m, dtype=float)
    if not is_rotation_matrix(m, tol=1e-6):
        raise ValueError("not a rotation: input matrix fails orthonormality/determinant check")
    t = float(np.trace(m))
    if t > 0.0:
        s = math.sqrt(t + 1.0) * 2.0
        q = np.array([
            0.25 * s,
            (m[2, 1] - m[1, 2]) / s,
            (m[0, 2] - m[2, 0]) / s,
            (m[1, 0] - m[0, 1]) / s,
        ])
    elif m[0, 0] > m[1, 1] and m[0, 0] > m[2, 2]:
        s = math.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2]) * 2.0
        q = np.array([
            (m[2, 1] - m[1, 2]) / s,
            0.25 * s,
            (m[0, 1] + m[1, 0]) / s,
            (m[0, 2] + m[2, 0]) / s,
        ])
    elif m[1, 1] > m[2, 2]:
        s = math.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2]) * 2.0
        q = np.array([
            (m[0, 2] - m[2, 0]) / s,
            (m[0, 1] + m[1, 0]) / s,
            0.25 * s,
            (m[1, 2] + m[2, 1]) / s,
        ])
    else:
        s = math.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1]) * 2.0
        q = np.array([
            (m[1, 0] - m[0, 1]) / s,
            (m[0, 2] + m[2, 0]) / s,
            (m[1, 2] + m[2, 1]) / s,
            0.25 * s,
        ])
    return normalize_quat(q)


def orthogonalize_matrix(raw: np.ndarray) -> np.ndarray:
    """Project a raw 3x3 prediction onto a valid rotation.

    Ordered Gram-Schmidt on the first two rows; the third row is their cross
    product, which forces det = +1 (reflections get the last axis negated).
    Idempotent on valid rotations.  Not the Frobenius-nearest rotation, but
    deterministic and adequate at the small noise levels seen in practice.
    """
    m = np.asarray(raw, dtype=float)
    if m.shape != (3, 3):
        raise ValueError(f"expected a 3x3 matrix, got shape {m.shape}")
    r0 = m[0]
    n0 = float(np.linalg.norm(r0))
    if n0 <= 1e-9:
        raise ValueError("degenerate rotation prediction: first row is (near) zero")
    r0 = r0 / n0
    r1 = m[1] - np.dot(m[1], r0) * r0
    n1 = float(np.linalg.norm(r1))
    if n1 <= 1e-9:
        raise ValueError("degenerate rotation prediction: first two rows are (near) parallel")
    r1 = r1 / n1
    r2 = np.cross(r0, r1)
    return np.vstack([r0, r1, r2])


def _axis_rotation_matrix(axis: int, angle_rad: float) -> np.ndarray:
    c, s = math.cos(angle_rad), math.sin(angle_rad)
    m = np.eye(3)
    u, v = (axis + 1) % 3, (axis + 2) % 3
    m[u, u] = c
    m[u, v] = -s
    m[v, u] = s
    m[v, v] = c
    return m


def _angle_about_axis(m: np.ndarray, axis: int) -> float:
    """Rotation angle (rad) of a matrix known to rotate purely about axis."""
    u, v = (axis + 1) % 3, (axis + 2) % 3
    return math.atan2(m[v, u], m[u, u])


@dataclass(frozen=True)
class EulerAngles:
    """Euler angles in degrees, indexed by axis (theta_x, theta_y, theta_z).

    ``convention`` names the intrinsic application order; ``degenerate`` is
    set when the decomposition hit gimbal lock and the third angle was pinned
    to zero.
    """

    angles: np.ndarray
    convention: str
    degenerate: bool = False


def _wrap_angle_deg(a: float) -> float:
    # map to (-180, 180]
    a = math.fmod(a + 180.0, 360.0)
    if a <= 0.0:
        a += 360.0
    return a - 180.0


def quat_to_euler(q: np.ndarray, convention: str) -> EulerAngles:
    """Decompose a unit quaternion into intrinsic Euler angles.

    The returned angles are reported per axis (theta_x, theta_y, theta_z)
    irrespective of the convention's application order.  The middle angle of
    the convention lies in [-90, 90] degrees; near gimbal lock the third
    rotation is set to zero and the result flagged degenerate.
    """
    if convention not in EULER_CONVENTIONS:
        raise ValueError(f"unsupported Euler convention {convention!r}")
    i, j, k = (_AXIS_INDEX[c] for c in convention)
    sign = 1.0 if (i, j, k) in _CYCLIC else -1.0
    m = quat_to_matrix(_as_quat(q))

    sb = max(-1.0, min(1.0, sign * m[i, k]))
    b = math.asin(sb)
    cb = math.sqrt(max(0.0, 1.0 - sb * sb))
    if cb <= _GIMBAL_EPS:
        degenerate = True
        c = 0.0
        # with the third rotation pinned, R @ Rj(b)^T is a pure axis-i rotation
        a = _angle_about_axis(m @ _axis_rotation_matrix(j, b).T, i)
    else:
        degenerate = False
        a = math.atan2(-sign * m[j, k], m[k, k])
        c = math.atan2(-sign * m[i, j], m[i, i])

    angles = np.zeros(3)
    angles[i] = _wrap_angle_deg(math.degrees(a))
    angles[j] = math.degrees(b)
    angles[k] = _wrap_angle_deg(math.degrees(c))
    return EulerAngles(angles, convention, degenerate)


def euler_to_quat(angles_deg, convention: str) -> np.ndarray:
    """Unit quaternion of intrinsic Euler angles given per axis in degrees."""
    if convention not in EULER_CONVENTIONS:
        raise ValueError(f"unsupported Euler convention {convention!r}")
    angles = _as_vec3(angles_deg)
    q = quat_identity()
    for c in convention:
        axis = _AXIS_INDEX[c]
        unit = np.zeros(3)
        unit[axis] = 1.0
        q = quat_multiply(q, quat_from_axis_angle(unit, float(angles[axis])))
    return quat_canonical(q)


@dataclass(frozen=True)
class RigidTransform:
    """Translation (voxels) plus unit quaternion (w, x, y, z), w >= 0."""

    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))
    rotation: np.ndarray = field(default_factory=quat_identity)

    def __post_init__(self):
        object.__setattr__(self, "translation", _as_vec3(self.translation))
        object.__setattr__(self, "rotation", quat_canonical(_as_quat(self.rotation)))

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls()

    def apply(self, point) -> np.ndarray:
        """Map a point from this transform's local frame to the world frame."""
        return quat_rotate(self.rotation, point) + self.translation

    def matrix(self) -> np.ndarray:
        return quat_to_matrix(self.rotation)


def compose(base: RigidTransform, delta: RigidTransform) -> RigidTransform:
    """base (+) delta, with delta expressed in the base plane's local frame."""
    return RigidTransform(
        base.translation + quat_rotate(base.rotation, delta.translation),
        quat_multiply(base.rotation, delta.rotation),
    )


def inverse_compose(target: RigidTransform, base: RigidTransform) -> RigidTransform:
    """target (-) base: the delta that takes base onto target (in base's frame)."""
    q_inv = quat_conjugate(base.rotation)
    return RigidTransform(
        quat_rotate(q_inv, target.translation - base.translation),
        quat_multiply(q_inv, target.rotation),
    )


def plane_anchor_offsets(size: int) -> np.ndarray:
    """Plane-local positions of the centre, bottom-left and bottom-right corner."""
    if size <= 1:
        raise ValueError("plane size must exceed 1")
    half = (size - 1) / 2.0
    return np.array([
        [0.0, 0.0, 0.0],
        [-half, -half, 0.0],
        [half, -half, 0.0],
    ])


def transform_to_anchors(transform: RigidTransform, size: int) -> np.ndarray:
    """World coordinates of the three anchor points, rows (A1, A2, A3)."""
    local = plane_anchor_offsets(size)
    return local @ transform.matrix().T + transform.translation


def anchors_to_transform(anchors: np.ndarray, size: int) -> RigidTransform:
    """Recover a rigid transform from (possibly noisy) anchor predictions.

    The in-plane x axis comes from A3-A2, the y axis from the component of
    A1-mid(A2,A3) orthogonal to it, and the normal from their cross product;
    the assembled frame is run through orthogonalize_matrix before conversion.
    """
    a = np.asarray(anchors, dtype=float)
    if a.shape != (3, 3):
        raise ValueError(f"expected anchor array of shape (3, 3), got {a.shape}")
    if size <= 1:
        raise ValueError("plane size must exceed 1")
    a1, a2, a3 = a
    u = a3 - a2
    nu = float(np.linalg.norm(u))
    if nu <= 1e-9:
        raise ValueError("degenerate anchor prediction: corner anchors coincide")
    u = u / nu
    v = a1 - 0.5 * (a2 + a3)
    v = v - np.dot(v, u) * u
    nv = float(np.linalg.norm(v))
    if nv <= 1e-9:
        raise ValueError("degenerate anchor prediction: anchors are collinear")
    v = v / nv
    frame = np.column_stack([u, v, np.cross(u, v)])
    return RigidTransform(a1, matrix_to_quat(orthogonalize_matrix(frame)))


# --- text records --------------------------------------------------------

def transform_to_record(transform: RigidTransform) -> str:
    """One-line text record: tx ty tz qw qx qy qz at full f64 precision."""
    values = np.concatenate([transform.translation, transform.rotation])
    return " ".join(f"{v:.17g}" for v in values)


def record_to_transform(line: str) -> RigidTransform:
    parts = line.split()
    if len(parts) != 7:
        raise ValueError(f"transform record needs 7 fields, got {len(parts)}")
    values = np.array([float(p) for p in parts])
    return RigidTransform(values[:3], values[3:])


def save_transforms(path, transforms) -> None:
    with open(path, "w", encoding="ascii") as fh:
        for t in transforms:
            fh.write(transform_to_record(t) + "\n")


def load_transforms(path) -> list[RigidTransform]:
    with open(path, "r", encoding="ascii") as fh:
        return [record_to_transform(line) for line in fh if line.strip()]
