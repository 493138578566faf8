"""Rotation algebra on unit quaternions and SO(3).

Quaternions are numpy arrays ``[w, x, y, z]`` (scalar first). The
quaternion-to-matrix conversion uses the homogeneous, purely quadratic
form, so ``q`` and ``-q`` map to bitwise identical matrices and the map
has a well defined 9x4 Jacobian on all of R^4 (linear in q, odd under
negation).

The optimizer treats a rotation as a point on the unit sphere S^3:
tangent vectors live in the ambient R^4 orthogonal to the base point,
and steps are taken with the normalization retraction. The classical
SO(3) tangent projection ``xi * skew(xi^T G)`` is provided as well and
is used in tests to cross-check that both routes give identical
directional derivatives.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

UNIT_TOL = 1e-6


def _as_vec(a, n: int, name: str) -> np.ndarray:
    v = np.asarray(a, dtype=np.float64)
    if v.shape != (n,):
        raise ValueError(f"{name} must have shape ({n},), got {v.shape}")
    return v


def check_unit_quat(q) -> np.ndarray:
    """Validate shape (4,) and unit norm within UNIT_TOL; return as f64."""
    q = _as_vec(q, 4, "quaternion")
    n = float(np.linalg.norm(q))
    if abs(n - 1.0) > UNIT_TOL:
        raise ValueError(f"quaternion norm {n!r} deviates from 1 by more than {UNIT_TOL}")
    return q


def normalize_quat(q) -> np.ndarray:
    q = _as_vec(q, 4, "quaternion")
    n = float(np.linalg.norm(q))
    if n < 1e-12:
        raise ValueError("cannot normalize a near-zero quaternion")
    return q / n


def quat_mul(a, b) -> np.ndarray:
    """Hamilton product a*b, scalar-first convention."""
    aw, ax, ay, az = _as_vec(a, 4, "quaternion")
    bw, bx, by, bz = _as_vec(b, 4, "quaternion")
    return np.array(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ]
    )


def quat_conj(q) -> np.ndarray:
    q = _as_vec(q, 4, "quaternion")
    return np.array([q[0], -q[1], -q[2], -q[3]])


def z_rotation_quat(angle: float) -> np.ndarray:
    """Unit quaternion for a rotation by `angle` about the world z axis."""
    half = 0.5 * angle
    return np.array([np.cos(half), 0.0, 0.0, np.sin(half)])


def quat_rotation_angle(a, b) -> float:
    """Rotation angle in radians between the rotations of two unit quaternions.

    Insensitive to the antipodal sign ambiguity.
    """
    d = abs(float(np.dot(check_unit_quat(a), check_unit_quat(b))))
    return 2.0 * float(np.arccos(min(d, 1.0)))


def quat_to_rotmat(q) -> np.ndarray:
    """Rotation matrix of a unit quaternion, homogeneous quadratic form.

    Every entry is a sum of two-component products, so R(q) and R(-q)
    are bitwise equal.
    """
    w, x, y, z = check_unit_quat(q)
    return np.array(
        [
            [w * w + x * x - y * y - z * z, 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), w * w - x * x + y * y - z * z, 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), w * w - x * x - y * y + z * z],
        ]
    )


def quat_to_rotmat_batch(qs: np.ndarray) -> np.ndarray:
    """Vectorized quat_to_rotmat for an (N, 4) array of unit quaternions."""
    qs = np.asarray(qs, dtype=np.float64)
    if qs.ndim != 2 or qs.shape[1] != 4:
        raise ValueError(f"expected (N, 4) quaternions, got {qs.shape}")
    norms = np.linalg.norm(qs, axis=1)
    if np.any(np.abs(norms - 1.0) > UNIT_TOL):
        raise ValueError("batch contains non-unit quaternions")
    w, x, y, z = qs[:, 0], qs[:, 1], qs[:, 2], qs[:, 3]
    out = np.empty((qs.shape[0], 3, 3))
    out[:, 0, 0] = w * w + x * x - y * y - z * z
    out[:, 0, 1] = 2 * (x * y - w * z)
    out[:, 0, 2] = 2 * (x * z + w * y)
    out[:, 1, 0] = 2 * (x * y + w * z)
    out[:, 1, 1] = w * w - x * x + y * y - z * z
    out[:, 1, 2] = 2 * (y * z - w * x)
    out[:, 2, 0] = 2 * (x * z - w * y)
    out[:, 2, 1] = 2 * (y * z + w * x)
    out[:, 2, 2] = w * w - x * x - y * y + z * z
    return out


def rotmat_jacobian(q) -> np.ndarray:
    """9x4 Jacobian d vec(R) / d q of the homogeneous map, row-major vec.

    The map is quadratic, so the Jacobian is linear in q and
    J(-q) = -J(q). `q` is not required to be normalized here: the
    derivative of the unnormalized map is what chain rules need, and at
    unit q a tangent perturbation leaves the norm unchanged to first
    order.
    """
    w, x, y, z = _as_vec(q, 4, "quaternion")
    return 2.0 * np.array(
        [
            [w, x, -y, -z],
            [-z, y, x, -w],
            [y, z, w, x],
            [z, y, x, w],
            [w, -x, y, -z],
            [-x, -w, z, y],
            [-y, z, -w, x],
            [x, w, z, y],
            [w, -x, -y, z],
        ]
    )


def skew_part(a) -> np.ndarray:
    """Antisymmetric part (A - A^T) / 2 of a 3x3 matrix."""
    a = np.asarray(a, dtype=np.float64)
    if a.shape != (3, 3):
        raise ValueError(f"expected a 3x3 matrix, got {a.shape}")
    return 0.5 * (a - a.T)


def project_so3_tangent(xi, grad) -> np.ndarray:
    """Project a Euclidean 3x3 gradient onto the tangent of SO(3) at xi.

    Returns xi * skew(xi^T grad). Idempotent for xi in SO(3).
    """
    xi = np.asarray(xi, dtype=np.float64)
    grad = np.asarray(grad, dtype=np.float64)
    if xi.shape != (3, 3) or grad.shape != (3, 3):
        raise ValueError("xi and grad must be 3x3 matrices")
    return xi @ skew_part(xi.T @ grad)


def project_sphere_tangent(q, v) -> np.ndarray:
    """Project an ambient R^4 vector onto the tangent of S^3 at unit q."""
    q = check_unit_quat(q)
    v = _as_vec(v, 4, "tangent")
    return v - np.dot(q, v) * q


def retract_sphere(q, v) -> np.ndarray:
    """Normalization retraction (q + v) / ||q + v||."""
    q = _as_vec(q, 4, "quaternion")
    v = _as_vec(v, 4, "tangent")
    s = q + v
    n = float(np.linalg.norm(s))
    if n < 1e-12:
        raise ValueError("degenerate retraction step: q + v is numerically zero")
    return s / n


def hat(eta) -> np.ndarray:
    """Matrix [eta]_x with hat(eta) @ v == cross(eta, v)."""
    x, y, z = _as_vec(eta, 3, "eta")
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def so3_exp(eta) -> np.ndarray:
    """Exponential map so(3) -> SO(3) via the Rodrigues formula.

    Below ||eta|| = 1e-8 the sin/cos coefficients are replaced by their
    second-order series values to avoid 0/0.
    """
    eta = _as_vec(eta, 3, "eta")
    theta = float(np.linalg.norm(eta))
    k = hat(eta)
    if theta < 1e-8:
        a, b = 1.0, 0.5
    else:
        a = np.sin(theta) / theta
        b = (1.0 - np.cos(theta)) / (theta * theta)
    return np.eye(3) + a * k + b * (k @ k)


@dataclass
class TangentVector:
    """Tangent of the hand configuration manifold R^3 x S^3.

    `dq` is expected to be orthogonal to the base quaternion; the grasp
    type coordinate is discrete and has no tangent component.
    """

    dx: np.ndarray
    dq: np.ndarray

    def __post_init__(self) -> None:
        self.dx = _as_vec(self.dx, 3, "dx")
        self.dq = _as_vec(self.dq, 4, "dq")

    @staticmethod
    def zero() -> "TangentVector":
        return TangentVector(np.zeros(3), np.zeros(4))

    def inner(self, other: "TangentVector") -> float:
        return float(np.dot(self.dx, other.dx) + np.dot(self.dq, other.dq))

    def norm(self) -> float:
        return float(np.sqrt(self.inner(self)))

    def scaled(self, a: float) -> "TangentVector":
        return TangentVector(a * self.dx, a * self.dq)

    def plus(self, other: "TangentVector") -> "TangentVector":
        return TangentVector(self.dx + other.dx, self.dq + other.dq)

    def neg(self) -> "TangentVector":
        return TangentVector(-self.dx, -self.dq)
