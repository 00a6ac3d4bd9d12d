"""Gaussian splat scene container and world-space splat math.

A scene is a structure-of-arrays over N splats: position, orientation
quaternion, sigmoid-bounded log-scales, opacity logit, and degree-3 real
spherical-harmonic color coefficients (16 per channel).
"""

from dataclasses import dataclass

import numpy as np

from .geometry import quat_to_rotmat

SH_DIM = 16  # degree-3 basis size

# Real SH basis constants, degree 0..3.
SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199
SH_C2 = (
    1.0925484305920792,
    -1.0925484305920792,
    0.31539156525252005,
    -1.0925484305920792,
    0.5462742152960396,
)
SH_C3 = (
    -0.5900435899266435,
    2.890611442640554,
    -0.4570457994644658,
    0.3731763325901154,
    -0.4570457994644658,
    1.445305721320277,
    -0.5900435899266435,
)


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def logit(p):
    p = np.asarray(p, dtype=np.float64)
    return np.log(p) - np.log1p(-p)


@dataclass
class GaussianScene:
    mu: np.ndarray  # (N, 3) world positions
    quat: np.ndarray  # (N, 4) orientations, scalar first
    log_scale: np.ndarray  # (N, 3) eigenvalue logits, variance = sigmoid
    alpha_logit: np.ndarray  # (N,) opacity logits
    sh: np.ndarray  # (N, 16, 3) SH coefficients per channel

    def __post_init__(self):
        self.mu = np.ascontiguousarray(self.mu, dtype=np.float64)
        self.quat = np.ascontiguousarray(self.quat, dtype=np.float64)
        self.log_scale = np.ascontiguousarray(self.log_scale, dtype=np.float64)
        self.alpha_logit = np.ascontiguousarray(self.alpha_logit, dtype=np.float64)
        self.sh = np.ascontiguousarray(self.sh, dtype=np.float64)
        n = self.mu.shape[0]
        if (
            self.mu.shape != (n, 3)
            or self.quat.shape != (n, 4)
            or self.log_scale.shape != (n, 3)
            or self.alpha_logit.shape != (n,)
            or self.sh.shape != (n, SH_DIM, 3)
        ):
            raise ValueError("inconsistent scene array shapes")
        if not all(
            np.all(np.isfinite(a))
            for a in (self.mu, self.quat, self.log_scale, self.alpha_logit, self.sh)
        ):
            raise ValueError("non-finite scene values")
        if np.any(np.linalg.norm(self.quat, axis=1) == 0.0):
            raise ValueError("zero-norm quaternion in scene")

    def __len__(self):
        return self.mu.shape[0]

    def copy(self):
        return GaussianScene(
            self.mu.copy(),
            self.quat.copy(),
            self.log_scale.copy(),
            self.alpha_logit.copy(),
            self.sh.copy(),
        )

    def canonical_bytes(self):
        """Deterministic byte serialization used for content hashing."""
        return b"".join(
            np.ascontiguousarray(a, dtype=np.float64).tobytes()
            for a in (self.mu, self.quat, self.log_scale, self.alpha_logit, self.sh)
        )

    def extent(self):
        """Bounding-box diagonal of the splat positions (world units)."""
        if len(self) == 0:
            return 0.0
        span = self.mu.max(axis=0) - self.mu.min(axis=0)
        return float(np.linalg.norm(span))


def covariance(quat, log_scale):
    """World covariance(s) R diag(sigmoid(log_scale)) R^T, shape (..., 3, 3).

    Eigenvalues are the sigmoid-mapped scales directly, so they are bounded
    to (0, 1) and the matrix is symmetric positive definite by construction.
    """
    R = quat_to_rotmat(quat)
    var = sigmoid(log_scale)  # (..., 3)
    return np.einsum("...ij,...j,...kj->...ik", R, var, R)


def opacity(alpha_logit):
    """Splat opacity in (0, 1)."""
    return sigmoid(alpha_logit)


def sh_basis(dirs):
    """Evaluate the 16 degree-3 SH basis functions for unit directions.

    dirs: (..., 3) unit vectors. Returns (..., 16).
    """
    dirs = np.asarray(dirs, dtype=np.float64)
    x, y, z = dirs[..., 0], dirs[..., 1], dirs[..., 2]
    b = np.empty(dirs.shape[:-1] + (SH_DIM,), dtype=np.float64)
    b[..., 0] = SH_C0
    b[..., 1] = -SH_C1 * y
    b[..., 2] = SH_C1 * z
    b[..., 3] = -SH_C1 * x
    xx, yy, zz = x * x, y * y, z * z
    xy, yz, xz = x * y, y * z, x * z
    b[..., 4] = SH_C2[0] * xy
    b[..., 5] = SH_C2[1] * yz
    b[..., 6] = SH_C2[2] * (2.0 * zz - xx - yy)
    b[..., 7] = SH_C2[3] * xz
    b[..., 8] = SH_C2[4] * (xx - yy)
    b[..., 9] = SH_C3[0] * y * (3.0 * xx - yy)
    b[..., 10] = SH_C3[1] * xy * z
    b[..., 11] = SH_C3[2] * y * (4.0 * zz - xx - yy)
    b[..., 12] = SH_C3[3] * z * (2.0 * zz - 3.0 * xx - 3.0 * yy)
    b[..., 13] = SH_C3[4] * x * (4.0 * zz - xx - yy)
    b[..., 14] = SH_C3[5] * z * (xx - yy)
    b[..., 15] = SH_C3[6] * x * (xx - 3.0 * yy)
    return b


def splat_colors(sh, dirs, return_basis=False):
    """View-dependent linear-RGB splat colors.

    sh: (N, 16, 3) coefficients, dirs: (N, 3) unit view directions.
    The raw SH sum is offset by +0.5 and clamped to be non-negative.
    """
    basis = sh_basis(dirs)  # (N, 16)
    raw = np.einsum("nk,nkc->nc", basis, np.asarray(sh, dtype=np.float64)) + 0.5
    colors = np.maximum(raw, 0.0)
    if return_basis:
        return colors, basis, raw
    return colors
