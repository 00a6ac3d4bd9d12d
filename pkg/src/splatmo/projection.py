"""Perspective projection of Gaussian splats with screen-space motion.

Projection happens once per frame at the mid-exposure pose. Each kept splat
gets a pixel-space mean, covariance, color, opacity, and a screen-space
velocity; blur samples later move only the pixel mean along that velocity
while depth, covariance, and color stay frozen.
"""

from dataclasses import dataclass

import numpy as np

from .camera import FrameMotion, Intrinsics, RenderConfig
from .geometry import Pose
from .scene import GaussianScene, covariance, opacity, splat_colors

# Isotropic pixel-variance floor added to every projected covariance. Acts
# as a low-pass dilation and keeps the 2x2 matrices invertible.
COV_FLOOR_PX = 0.3


@dataclass
class ProjectedSplats:
    """Per-splat screen-space quantities for one frame, pre-sort.

    Also carries the camera-space intermediates needed by the backward
    pass (J, mu_cam, cov_cam, SH basis, pre-clamp colors).
    """

    mu_px: np.ndarray  # (M, 2)
    depth: np.ndarray  # (M,)
    cov_px: np.ndarray  # (M, 2, 2), floor already added
    vel_px: np.ndarray  # (M, 2) pixels/second
    color: np.ndarray  # (M, 3) linear RGB, clamped >= 0
    alpha: np.ndarray  # (M,) opacity in (0, 1)
    source_index: np.ndarray  # (M,) int32 indices into the scene
    mu_cam: np.ndarray  # (M, 3)
    cov_cam: np.ndarray  # (M, 3, 3)
    J: np.ndarray  # (M, 2, 3) projection Jacobian
    basis: np.ndarray  # (M, 16) SH basis at the view direction
    raw_color: np.ndarray  # (M, 3) SH sum + 0.5 before clamping

    def __len__(self):
        return self.mu_px.shape[0]


def world_to_camera(mu, cov, pose: Pose):
    """Map world-space splats into the camera frame.

    mu: (N, 3), cov: (N, 3, 3). Returns (mu_cam, cov_cam, dirs) where dirs
    are unit world-frame directions from the camera center to each splat.
    Raises for splats coinciding with the camera center.
    """
    mu = np.asarray(mu, dtype=np.float64)
    offset = mu - pose.p  # (N, 3)
    dist = np.linalg.norm(offset, axis=-1)
    if np.any(dist == 0.0):
        raise ValueError("splat at the camera center has no view direction")
    mu_cam = offset @ pose.R  # R^T (mu - p)
    cov_cam = np.einsum("ji,njk,kl->nil", pose.R, np.asarray(cov, float), pose.R)
    dirs = offset / dist[..., None]
    return mu_cam, cov_cam, dirs


def project(mu_cam, intr: Intrinsics):
    """Pinhole projection of camera-space points to pixel coordinates.

    Returns (mu_px (N, 2), depth (N,)). Callers must cull non-positive
    depths before trusting the pixel coordinates.
    """
    mu_cam = np.asarray(mu_cam, dtype=np.float64)
    t = mu_cam @ intr.matrix().T  # (N, 3)
    depth = t[..., 2]
    mu_px = t[..., :2] / depth[..., None]
    return mu_px, depth


def projection_jacobian(mu_cam, intr: Intrinsics):
    """Derivative of the pixel coordinates with respect to mu_cam, (N, 2, 3).

    Full pinhole form: rows are d(x')/d(mu_cam) and d(y')/d(mu_cam),
    including the principal-point terms in the third column.
    """
    mu_cam = np.asarray(mu_cam, dtype=np.float64)
    K = intr.matrix()
    t = mu_cam @ K.T
    d = t[..., 2]
    A = np.zeros(mu_cam.shape[:-1] + (2, 3), dtype=np.float64)
    inv_d = 1.0 / d
    A[..., 0, 0] = inv_d
    A[..., 1, 1] = inv_d
    A[..., 0, 2] = -t[..., 0] * inv_d * inv_d
    A[..., 1, 2] = -t[..., 1] * inv_d * inv_d
    return A @ K


def pixel_covariance(J, cov_cam, floor=COV_FLOOR_PX):
    """Screen-space 2x2 covariances J cov_cam J^T plus an isotropic floor."""
    cov = np.einsum("nij,njk,nlk->nil", J, cov_cam, J)
    cov[..., 0, 0] += floor
    cov[..., 1, 1] += floor
    return cov


def pixel_velocity(mu_cam, J, v, w):
    """Screen-space splat velocity -J (w x mu_cam + v), pixels/second.

    Positive camera motion moves the image of a static splat the opposite
    way, hence the leading minus sign.
    """
    mu_cam = np.asarray(mu_cam, dtype=np.float64)
    u = np.cross(np.asarray(w, float)[None, :], mu_cam) + np.asarray(v, float)
    return -np.einsum("nij,nj->ni", J, u)


def cull_mask(mu_px, depth, vel_px, intr: Intrinsics, cfg: RenderConfig,
              t_span: float):
    """Keep splats in front of the near plane and near the image rectangle.

    The rectangle is expanded per axis by cull_margin plus the largest
    screen displacement the splat can undergo during exposure and readout
    (|vel_px| * t_span with t_span = (T_e + T_ro) / 2).
    """
    mx = cfg.cull_margin + np.abs(vel_px[:, 0]) * t_span
    my = cfg.cull_margin + np.abs(vel_px[:, 1]) * t_span
    keep = depth >= cfg.d_min
    keep &= (mu_px[:, 0] >= -0.5 - mx) & (mu_px[:, 0] <= intr.width - 0.5 + mx)
    keep &= (mu_px[:, 1] >= -0.5 - my) & (mu_px[:, 1] <= intr.height - 0.5 + my)
    return keep


def project_scene(scene: GaussianScene, fm: FrameMotion, intr: Intrinsics,
                  cfg: RenderConfig) -> ProjectedSplats:
    """Project a whole scene for one frame and cull invisible splats."""
    mu_cam_all = fm.pose.to_camera(scene.mu)
    front = np.flatnonzero(mu_cam_all[:, 2] >= cfg.d_min).astype(np.int32)

    mu = scene.mu[front]
    cov_w = covariance(scene.quat[front], scene.log_scale[front])
    mu_cam, cov_cam, dirs = world_to_camera(mu, cov_w, fm.pose)
    mu_px, depth = project(mu_cam, intr)
    J = projection_jacobian(mu_cam, intr)
    cov_px = pixel_covariance(J, cov_cam)
    vel_px = pixel_velocity(mu_cam, J, fm.v, fm.w)

    t_span = (fm.T_e + fm.T_ro) / 2.0
    keep = cull_mask(mu_px, depth, vel_px, intr, cfg, t_span)
    idx = np.flatnonzero(keep)
    src = front[idx]

    color, basis, raw = splat_colors(scene.sh[src], dirs[idx], return_basis=True)
    return ProjectedSplats(
        mu_px=np.ascontiguousarray(mu_px[idx]),
        depth=np.ascontiguousarray(depth[idx]),
        cov_px=np.ascontiguousarray(cov_px[idx]),
        vel_px=np.ascontiguousarray(vel_px[idx]),
        color=np.ascontiguousarray(color),
        alpha=np.ascontiguousarray(opacity(scene.alpha_logit[src])),
        source_index=src.astype(np.int32),
        mu_cam=np.ascontiguousarray(mu_cam[idx]),
        cov_cam=np.ascontiguousarray(cov_cam[idx]),
        J=np.ascontiguousarray(J[idx]),
        basis=np.ascontiguousarray(basis),
        raw_color=np.ascontiguousarray(raw),
    )
