"""SE(3) pose type, exponential/logarithm maps, and the distance/weight functions.

Conventions:
    - Quaternions are stored as (qx, qy, qz, qw), Hamilton product, and are
      renormalized after every operation.
    - A twist stacks as (rho, phi): translational part first (meters), then the
      rotation vector (radians).
    - ``T.apply(p) = R p + t``; composition is ``a.compose(b) = T_a T_b``.

Numerical thresholds are stability choices only: below _SMALL_ANGLE the closed
forms are replaced by their series expansions, and within _PI_MARGIN of pi the
logarithm refuses to pick a branch.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import BranchAmbiguityError, ParameterError

_SMALL_ANGLE = 1e-8
_PI_MARGIN = 1e-7


# ---------------------------------------------------------------------------
# quaternion primitives (xyzw)
# ---------------------------------------------------------------------------

def quat_normalize(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    n = np.linalg.norm(q, axis=-1, keepdims=True)
    if np.any(n < 1e-12):
        raise ParameterError("quaternion norm is zero")
    return q / n


def quat_multiply(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Hamilton product a*b; broadcasts over leading axes."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    ax, ay, az, aw = a[..., 0], a[..., 1], a[..., 2], a[..., 3]
    bx, by, bz, bw = b[..., 0], b[..., 1], b[..., 2], b[..., 3]
    return np.stack(
        [
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
            aw * bw - ax * bx - ay * by - az * bz,
        ],
        axis=-1,
    )


def quat_conjugate(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    out = q.copy()
    out[..., :3] *= -1.0
    return out


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    x, y, z, w = quat_normalize(q)
    xx, yy, zz = x * x, y * y, z * z
    xy, xz, yz = x * y, x * z, y * z
    wx, wy, wz = w * x, w * y, w * z
    return np.array(
        [
            [1.0 - 2.0 * (yy + zz), 2.0 * (xy - wz), 2.0 * (xz + wy)],
            [2.0 * (xy + wz), 1.0 - 2.0 * (xx + zz), 2.0 * (yz - wx)],
            [2.0 * (xz - wy), 2.0 * (yz + wx), 1.0 - 2.0 * (xx + yy)],
        ]
    )


def matrix_to_quat(R: np.ndarray) -> np.ndarray:
    """Rotation matrix to quaternion (Shepperd's method, branch on largest pivot)."""
    R = np.asarray(R, dtype=float)
    t = np.trace(R)
    if t > 0.0:
        s = math.sqrt(t + 1.0) * 2.0
        w = 0.25 * s
        x = (R[2, 1] - R[1, 2]) / s
        y = (R[0, 2] - R[2, 0]) / s
        z = (R[1, 0] - R[0, 1]) / s
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = math.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2]) * 2.0
        w = (R[2, 1] - R[1, 2]) / s
        x = 0.25 * s
        y = (R[0, 1] + R[1, 0]) / s
        z = (R[0, 2] + R[2, 0]) / s
    elif R[1, 1] > R[2, 2]:
        s = math.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2]) * 2.0
        w = (R[0, 2] - R[2, 0]) / s
        x = (R[0, 1] + R[1, 0]) / s
        y = 0.25 * s
        z = (R[1, 2] + R[2, 1]) / s
    else:
        s = math.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1]) * 2.0
        w = (R[1, 0] - R[0, 1]) / s
        x = (R[0, 2] + R[2, 0]) / s
        y = (R[1, 2] + R[2, 1]) / s
        z = 0.25 * s
    return quat_normalize(np.array([x, y, z, w]))


def quat_rotate(q: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Rotate vector(s) v by quaternion(s) q; broadcasts over leading axes."""
    q = np.asarray(q, dtype=float)
    v = np.asarray(v, dtype=float)
    u = q[..., :3]
    w = q[..., 3:4]
    uv = np.cross(u, v)
    return v + 2.0 * (w * uv + np.cross(u, uv))


# ---------------------------------------------------------------------------
# so(3) maps
# ---------------------------------------------------------------------------

def skew(v: np.ndarray) -> np.ndarray:
    v = np.asarray(v, dtype=float).reshape(3)
    return np.array(
        [
            [0.0, -v[2], v[1]],
            [v[2], 0.0, -v[0]],
            [-v[1], v[0], 0.0],
        ]
    )


def so3_exp(phi: np.ndarray) -> np.ndarray:
    """Rodrigues formula; Taylor fallback below _SMALL_ANGLE."""
    phi = np.asarray(phi, dtype=float).reshape(3)
    theta = np.linalg.norm(phi)
    K = skew(phi)
    if theta < _SMALL_ANGLE:
        return np.eye(3) + K + 0.5 * (K @ K)
    a = math.sin(theta) / theta
    b = (1.0 - math.cos(theta)) / (theta * theta)
    return np.eye(3) + a * K + b * (K @ K)


def so3_log(R: np.ndarray) -> np.ndarray:
    """Rotation vector of R on the principal branch.

    Raises BranchAmbiguityError within _PI_MARGIN of pi, where the axis sign
    is undefined.
    """
    R = np.asarray(R, dtype=float)
    cos_theta = min(1.0, max(-1.0, 0.5 * (np.trace(R) - 1.0)))
    theta = math.acos(cos_theta)
    if math.pi - theta < _PI_MARGIN:
        raise BranchAmbiguityError(
            f"rotation angle {theta:.9f} is at the principal-branch boundary"
        )
    axis_raw = np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    if theta < _SMALL_ANGLE:
        return 0.5 * axis_raw
    return (theta / (2.0 * math.sin(theta))) * axis_raw


def so3_left_jacobian(phi: np.ndarray) -> np.ndarray:
    phi = np.asarray(phi, dtype=float).reshape(3)
    theta = np.linalg.norm(phi)
    K = skew(phi)
    if theta < _SMALL_ANGLE:
        return np.eye(3) + 0.5 * K + (K @ K) / 6.0
    t2 = theta * theta
    a = (1.0 - math.cos(theta)) / t2
    b = (theta - math.sin(theta)) / (t2 * theta)
    return np.eye(3) + a * K + b * (K @ K)


def so3_left_jacobian_inv(phi: np.ndarray) -> np.ndarray:
    phi = np.asarray(phi, dtype=float).reshape(3)
    theta = np.linalg.norm(phi)
    K = skew(phi)
    if theta < _SMALL_ANGLE:
        return np.eye(3) - 0.5 * K + (K @ K) / 12.0
    half = 0.5 * theta
    cot_half = math.cos(half) / math.sin(half)
    c = (1.0 - half * cot_half) / (theta * theta)
    return np.eye(3) - 0.5 * K + c * (K @ K)


# ---------------------------------------------------------------------------
# domain types
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Twist:
    """Element of the tangent space: rho translational (m), phi rotational (rad)."""

    rho: np.ndarray
    phi: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "rho", np.asarray(self.rho, dtype=float).reshape(3))
        object.__setattr__(self, "phi", np.asarray(self.phi, dtype=float).reshape(3))

    @classmethod
    def zero(cls) -> "Twist":
        return cls(np.zeros(3), np.zeros(3))

    @classmethod
    def from_vector(cls, v: np.ndarray) -> "Twist":
        v = np.asarray(v, dtype=float).reshape(6)
        return cls(v[:3], v[3:])

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.rho, self.phi])

    def __neg__(self) -> "Twist":
        return Twist(-self.rho, -self.phi)


@dataclass(frozen=True)
class MetricWeights:
    """Relative weighting of translation vs rotation in the pose distance."""

    translation_weight: float = 1.0
    rotation_weight: float = 1.0

    def __post_init__(self):
        if self.translation_weight < 0.0 or self.rotation_weight < 0.0:
            raise ParameterError("metric weights must be non-negative")
        if self.translation_weight == 0.0 and self.rotation_weight == 0.0:
            raise ParameterError("metric weights must not both be zero")


@dataclass(frozen=True)
class Pose:
    """Rigid transform: unit quaternion (qx,qy,qz,qw) + translation, with a timestamp."""

    rotation: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, 0.0, 1.0]))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))
    stamp: float = 0.0

    def __post_init__(self):
        q = quat_normalize(np.asarray(self.rotation, dtype=float).reshape(4))
        t = np.asarray(self.translation, dtype=float).reshape(3)
        object.__setattr__(self, "rotation", q)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls, stamp: float = 0.0) -> "Pose":
        return cls(np.array([0.0, 0.0, 0.0, 1.0]), np.zeros(3), stamp)

    @classmethod
    def from_yaw(cls, yaw: float, translation=(0.0, 0.0, 0.0), stamp: float = 0.0) -> "Pose":
        half = 0.5 * yaw
        return cls(np.array([0.0, 0.0, math.sin(half), math.cos(half)]),
                   np.asarray(translation, dtype=float), stamp)

    def rotation_matrix(self) -> np.ndarray:
        return quat_to_matrix(self.rotation)

    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.rotation_matrix()
        T[:3, 3] = self.translation
        return T

    def compose(self, other: "Pose") -> "Pose":
        q = quat_multiply(self.rotation, other.rotation)
        t = self.translation + quat_rotate(self.rotation, other.translation)
        return Pose(q, t, other.stamp)

    def inverse(self) -> "Pose":
        q_inv = quat_conjugate(self.rotation)
        return Pose(q_inv, -quat_rotate(q_inv, self.translation), self.stamp)

    def apply(self, points: np.ndarray) -> np.ndarray:
        return quat_rotate(self.rotation, np.asarray(points, dtype=float)) + self.translation

    def with_stamp(self, stamp: float) -> "Pose":
        return Pose(self.rotation, self.translation, stamp)

    def rotation_angle(self) -> float:
        v = np.linalg.norm(self.rotation[:3])
        w = abs(self.rotation[3])
        return 2.0 * math.atan2(v, w)

    def is_close(self, other: "Pose", tol: float = 1e-9) -> bool:
        d = relative(self, other)
        return float(np.linalg.norm(d.translation)) <= tol and d.rotation_angle() <= tol


def relative(a: Pose, b: Pose) -> Pose:
    """Relative transform a^-1 b."""
    return a.inverse().compose(b)


# ---------------------------------------------------------------------------
# SE(3) exp / log
# ---------------------------------------------------------------------------

def exp_map(xi: Twist) -> Pose:
    """Closed-form exponential: R = exp(phi^), t = J_l(phi) rho."""
    R = so3_exp(xi.phi)
    t = so3_left_jacobian(xi.phi) @ xi.rho
    return Pose(matrix_to_quat(R), t)


def log_map(pose: Pose) -> Twist:
    """Principal-branch logarithm; raises BranchAmbiguityError at angle pi."""
    phi = so3_log(pose.rotation_matrix())
    rho = so3_left_jacobian_inv(phi) @ pose.translation
    return Twist(rho, phi)


# ---------------------------------------------------------------------------
# distances and edge weights
# ---------------------------------------------------------------------------

def se3_distance(a: Pose, b: Pose, weights: MetricWeights = MetricWeights()) -> float:
    """Weighted twist norm of the relative transform.

    Delta^2 = w_t ||rho||^2 + w_r ||phi||^2 for (rho, phi) = log(a^-1 b).
    Symmetric, zero iff a == b, and left-invariant (depends only on a^-1 b).
    """
    xi = log_map(relative(a, b))
    d2 = (weights.translation_weight * float(xi.rho @ xi.rho)
          + weights.rotation_weight * float(xi.phi @ xi.phi))
    return math.sqrt(d2)


def rotation_distance(a: Pose, b: Pose) -> float:
    """Trace form tr(R_b R_a^T); 3 for identical rotations, -1 at 180 degrees.

    Increases with similarity. Use rotation_geodesic for a proper dissimilarity.
    """
    return float(np.trace(b.rotation_matrix() @ a.rotation_matrix().T))


def rotation_geodesic(a: Pose, b: Pose) -> float:
    """Geodesic angle between rotations: arccos(clamp((tr - 1)/2))."""
    t = rotation_distance(a, b)
    return math.acos(min(1.0, max(-1.0, 0.5 * (t - 1.0))))


def sq_exp_weight(delta, sigma: float):
    """Squared-exponential proximity weight exp(-delta / (2 sigma^2)).

    Equals 1 at delta = 0 and decreases strictly with the distance. Accepts
    scalars or arrays of distances.
    """
    if sigma <= 0.0:
        raise ParameterError("sigma must be positive")
    delta = np.asarray(delta, dtype=float)
    if np.any(delta < 0.0):
        raise ParameterError("delta must be non-negative")
    out = np.exp(-delta / (2.0 * sigma * sigma))
    return float(out) if out.ndim == 0 else out


def sigma_for_boundary_weight(delta_at_radius: float, boundary_weight: float = 0.1) -> float:
    """Sigma such that sq_exp_weight(delta_at_radius, sigma) == boundary_weight."""
    if delta_at_radius <= 0.0:
        raise ParameterError("delta_at_radius must be positive")
    if not 0.0 < boundary_weight < 1.0:
        raise ParameterError("boundary_weight must lie in (0, 1)")
    return math.sqrt(delta_at_radius / (2.0 * math.log(1.0 / boundary_weight)))


# ---------------------------------------------------------------------------
# batched helpers (used for pairwise graph construction and signals)
# ---------------------------------------------------------------------------

def stack_poses(poses) -> tuple[np.ndarray, np.ndarray]:
    """(N,4) quaternion array and (N,3) translation array from a pose sequence."""
    q = np.array([p.rotation for p in poses], dtype=float).reshape(-1, 4)
    t = np.array([p.translation for p in poses], dtype=float).reshape(-1, 3)
    return q, t


def compose_arrays(qa, ta, qb, tb) -> tuple[np.ndarray, np.ndarray]:
    """Batched composition of (quaternion, translation) transform arrays."""
    q = quat_multiply(qa, qb)
    q = q / np.linalg.norm(q, axis=-1, keepdims=True)
    return q, ta + quat_rotate(qa, tb)


def relative_arrays(qa, ta, qb, tb) -> tuple[np.ndarray, np.ndarray]:
    """Batched relative transforms a^-1 b of (quaternion, translation) arrays."""
    qa_inv = quat_conjugate(qa)
    q = quat_multiply(qa_inv, qb)
    q = q / np.linalg.norm(q, axis=-1, keepdims=True)
    return q, quat_rotate(qa_inv, tb - ta)


def _quat_to_rotvec_batch(q: np.ndarray) -> np.ndarray:
    """Shortest rotation vectors from quaternions (N,4); raises near pi."""
    q = np.asarray(q, dtype=float)
    sign = np.where(q[:, 3:4] < 0.0, -1.0, 1.0)
    q = q * sign
    vnorm = np.linalg.norm(q[:, :3], axis=1)
    angle = 2.0 * np.arctan2(vnorm, q[:, 3])
    if np.any(math.pi - angle < _PI_MARGIN):
        raise BranchAmbiguityError("a relative rotation is at the principal-branch boundary")
    # angle/vnorm -> 2/w as angle -> 0; series keeps it finite
    with np.errstate(invalid="ignore", divide="ignore"):
        scale = np.where(vnorm > _SMALL_ANGLE, angle / np.where(vnorm == 0.0, 1.0, vnorm),
                         2.0 / np.clip(q[:, 3], 1e-12, None))
    return q[:, :3] * scale[:, None]


def skew_batch(v: np.ndarray) -> np.ndarray:
    """(N,3,3) skew matrices from (N,3) vectors."""
    v = np.asarray(v, dtype=float)
    K = np.zeros(v.shape[:-1] + (3, 3))
    K[..., 0, 1] = -v[..., 2]
    K[..., 0, 2] = v[..., 1]
    K[..., 1, 0] = v[..., 2]
    K[..., 1, 2] = -v[..., 0]
    K[..., 2, 0] = -v[..., 1]
    K[..., 2, 1] = v[..., 0]
    return K


def quat_to_matrix_batch(q: np.ndarray) -> np.ndarray:
    """(N,3,3) rotation matrices from (N,4) quaternions."""
    q = np.asarray(q, dtype=float)
    x, y, z, w = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    R = np.empty(q.shape[:-1] + (3, 3))
    R[..., 0, 0] = 1.0 - 2.0 * (y * y + z * z)
    R[..., 0, 1] = 2.0 * (x * y - w * z)
    R[..., 0, 2] = 2.0 * (x * z + w * y)
    R[..., 1, 0] = 2.0 * (x * y + w * z)
    R[..., 1, 1] = 1.0 - 2.0 * (x * x + z * z)
    R[..., 1, 2] = 2.0 * (y * z - w * x)
    R[..., 2, 0] = 2.0 * (x * z - w * y)
    R[..., 2, 1] = 2.0 * (y * z + w * x)
    R[..., 2, 2] = 1.0 - 2.0 * (x * x + y * y)
    return R


def _left_jacobian_inv_batch(phi: np.ndarray) -> np.ndarray:
    """(N,3,3) inverse left Jacobians for rotation vectors (N,3)."""
    n = phi.shape[0]
    theta = np.linalg.norm(phi, axis=1)
    K = skew_batch(phi)
    KK = np.einsum("nij,njk->nik", K, K)
    small = theta < _SMALL_ANGLE
    c = np.empty(n)
    c[small] = 1.0 / 12.0
    ts = theta[~small]
    half = 0.5 * ts
    c[~small] = (1.0 - half * np.cos(half) / np.sin(half)) / (ts * ts)
    return np.eye(3)[None, :, :] - 0.5 * K + c[:, None, None] * KK


def _left_jacobian_batch(phi: np.ndarray) -> np.ndarray:
    """(N,3,3) left Jacobians for rotation vectors (N,3)."""
    n = phi.shape[0]
    theta = np.linalg.norm(phi, axis=1)
    K = skew_batch(phi)
    KK = np.einsum("nij,njk->nik", K, K)
    small = theta < _SMALL_ANGLE
    a = np.empty(n)
    b = np.empty(n)
    a[small] = 0.5
    b[small] = 1.0 / 6.0
    ts = theta[~small]
    t2 = ts * ts
    a[~small] = (1.0 - np.cos(ts)) / t2
    b[~small] = (ts - np.sin(ts)) / (t2 * ts)
    return np.eye(3)[None, :, :] + a[:, None, None] * K + b[:, None, None] * KK


def exp_map_batch(xi: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Batched exponential: (N,6) twists -> quaternions (N,4), translations (N,3)."""
    xi = np.asarray(xi, dtype=float).reshape(-1, 6)
    rho, phi = xi[:, :3], xi[:, 3:]
    theta = np.linalg.norm(phi, axis=1)
    half = 0.5 * theta
    with np.errstate(invalid="ignore", divide="ignore"):
        s = np.where(theta > _SMALL_ANGLE, np.sin(half) / np.where(theta == 0.0, 1.0, theta),
                     0.5 - theta * theta / 48.0)
    q = np.concatenate([phi * s[:, None], np.cos(half)[:, None]], axis=1)
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    t = np.einsum("nij,nj->ni", _left_jacobian_batch(phi), rho)
    return q, t


def log_map_batch(q: np.ndarray, t: np.ndarray) -> np.ndarray:
    """Batched logarithm of (quaternion, translation) arrays to (N,6) twists."""
    phi = _quat_to_rotvec_batch(np.asarray(q, dtype=float))
    rho = np.einsum("nij,nj->ni", _left_jacobian_inv_batch(phi), np.asarray(t, dtype=float))
    return np.concatenate([rho, phi], axis=1)


def relative_twists(poses_a, poses_b) -> np.ndarray:
    """(N,6) twists log(a_i^-1 b_i) for two equal-length pose sequences."""
    qa, ta = stack_poses(poses_a)
    qb, tb = stack_poses(poses_b)
    q_rel = quat_multiply(quat_conjugate(qa), qb)
    q_rel = q_rel / np.linalg.norm(q_rel, axis=1, keepdims=True)
    phi = _quat_to_rotvec_batch(q_rel)
    t_rel = quat_rotate(quat_conjugate(qa), tb - ta)
    rho = np.einsum("nij,nj->ni", _left_jacobian_inv_batch(phi), t_rel)
    return np.concatenate([rho, phi], axis=1)


def se3_distances(poses_a, poses_b, weights: MetricWeights = MetricWeights()) -> np.ndarray:
    """Vectorized se3_distance over paired pose sequences."""
    xi = relative_twists(poses_a, poses_b)
    d2 = (weights.translation_weight * np.sum(xi[:, :3] ** 2, axis=1)
          + weights.rotation_weight * np.sum(xi[:, 3:] ** 2, axis=1))
    return np.sqrt(d2)
