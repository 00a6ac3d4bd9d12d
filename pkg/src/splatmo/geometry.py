"""Rotation and pose primitives shared by the projection and simulation code.

Quaternions use scalar-first (w, x, y, z) ordering. Rotations act on column
vectors, so ``R @ x`` rotates ``x``. Poses are stored camera-to-world; the
world-to-camera form is derived on demand.
"""

from dataclasses import dataclass

import numpy as np

# Below this rotation angle the closed-form Rodrigues coefficients are
# replaced by their series expansions to avoid 0/0.
_SMALL_ANGLE = 1e-8


def quat_to_rotmat(q):
    """Convert unit quaternion(s) (..., 4) to rotation matrix(es) (..., 3, 3).

    Inputs are normalized internally, so q and -q give the same matrix.
    """
    q = np.asarray(q, dtype=np.float64)
    norm = np.linalg.norm(q, axis=-1, keepdims=True)
    if np.any(norm == 0.0):
        raise ValueError("zero-norm quaternion")
    w, x, y, z = np.moveaxis(q / norm, -1, 0)

    R = np.empty(q.shape[:-1] + (3, 3), dtype=np.float64)
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


def rotmat_to_quat(R):
    """Convert rotation matrix (3, 3) to a unit quaternion (w >= 0 branch).

    Uses the largest-diagonal pivot for numerical stability near pi.
    """
    R = np.asarray(R, dtype=np.float64)
    t = np.trace(R)
    if t > 0.0:
        s = np.sqrt(t + 1.0) * 2.0
        q = np.array(
            [
                0.25 * s,
                (R[2, 1] - R[1, 2]) / s,
                (R[0, 2] - R[2, 0]) / s,
                (R[1, 0] - R[0, 1]) / s,
            ]
        )
    else:
        i = int(np.argmax(np.diag(R)))
        j, k = (i + 1) % 3, (i + 2) % 3
        s = np.sqrt(max(R[i, i] - R[j, j] - R[k, k] + 1.0, 0.0)) * 2.0
        q = np.empty(4)
        q[0] = (R[k, j] - R[j, k]) / s
        q[1 + i] = 0.25 * s
        q[1 + j] = (R[j, i] + R[i, j]) / s
        q[1 + k] = (R[k, i] + R[i, k]) / s
    if q[0] < 0.0:
        q = -q
    return q / np.linalg.norm(q)


def cross_matrix(w):
    """Skew-symmetric matrix [w]_x with cross_matrix(w) @ v == cross(w, v)."""
    w = np.asarray(w, dtype=np.float64)
    K = np.zeros(w.shape[:-1] + (3, 3), dtype=np.float64)
    K[..., 0, 1] = -w[..., 2]
    K[..., 0, 2] = w[..., 1]
    K[..., 1, 0] = w[..., 2]
    K[..., 1, 2] = -w[..., 0]
    K[..., 2, 0] = -w[..., 1]
    K[..., 2, 1] = w[..., 0]
    return K


def so3_exp(w):
    """Axis-angle vector (3,) to rotation matrix via the Rodrigues formula."""
    w = np.asarray(w, dtype=np.float64)
    theta2 = float(w @ w)
    K = cross_matrix(w)
    if theta2 < _SMALL_ANGLE**2:
        # sin(t)/t and (1-cos(t))/t^2 series; error below t^4.
        a = 1.0 - theta2 / 6.0
        b = 0.5 - theta2 / 24.0
    else:
        theta = np.sqrt(theta2)
        a = np.sin(theta) / theta
        b = (1.0 - np.cos(theta)) / theta2
    return np.eye(3) + a * K + b * (K @ K)


def so3_log(R):
    """Rotation matrix to axis-angle vector, inverse of so3_exp.

    Routed through the quaternion form, which is stable for all angles
    including near pi. Returns the representative with angle in [0, pi].
    """
    q = rotmat_to_quat(R)
    vec = q[1:]
    s = np.linalg.norm(vec)
    if s < _SMALL_ANGLE:
        # angle ~ 2*s/w; series for 2*atan2(s, w)/s.
        return vec * (2.0 / q[0]) * (1.0 - s * s / (3.0 * q[0] * q[0]))
    angle = 2.0 * np.arctan2(s, q[0])
    return vec * (angle / s)


@dataclass
class Pose:
    """Camera-to-world rigid transform: world_point = R @ cam_point + p."""

    R: np.ndarray  # (3, 3)
    p: np.ndarray  # (3,)

    def __post_init__(self):
        self.R = np.asarray(self.R, dtype=np.float64).reshape(3, 3)
        self.p = np.asarray(self.p, dtype=np.float64).reshape(3)

    @classmethod
    def identity(cls):
        return cls(np.eye(3), np.zeros(3))

    def w2c(self):
        """World-to-camera factors (R', p') with cam_point = R' @ x + p'."""
        Rt = self.R.T
        return Rt, -Rt @ self.p

    def to_camera(self, x):
        """Map world points (..., 3) into the camera frame."""
        x = np.asarray(x, dtype=np.float64)
        return (x - self.p) @ self.R

    def copy(self):
        return Pose(self.R.copy(), self.p.copy())
