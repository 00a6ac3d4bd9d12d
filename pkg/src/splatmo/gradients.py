"""Backward pass from image gradients to scene, velocity, and pose gradients.

Chains the rasterizer kernel gradients (pixel means, conics, colors,
opacities, screen velocities) through projection back to world space.
Two deliberate approximations, both standard for this pipeline:

* splat colors treat the view direction as a constant, so no color
  gradient flows into positions or the camera pose;
* the pose rotation gradient tracks how camera-space means rotate but
  not the rotation of camera-space covariances (exact for isotropic
  splats).

Everything else is the exact reverse of the forward computation.
"""

from dataclasses import dataclass

import numpy as np

from . import kernels
from .camera import exposure_offsets
from .geometry import quat_to_rotmat
from .rasterizer import TILE, RenderCache, _sorted_arrays
from .scene import GaussianScene, sigmoid


@dataclass
class GradBuffers:
    """Gradients of a scalar loss, matching GaussianScene plus per-frame
    motion parameters (camera-frame velocities, pose tangent)."""

    mu: np.ndarray  # (N, 3)
    quat: np.ndarray  # (N, 4)
    log_scale: np.ndarray  # (N, 3)
    alpha_logit: np.ndarray  # (N,)
    sh: np.ndarray  # (N, 16, 3)
    v: np.ndarray  # (3,) linear velocity
    w: np.ndarray  # (3,) angular velocity
    p: np.ndarray  # (3,) pose translation
    rho: np.ndarray  # (3,) pose rotation, right tangent of R

    @classmethod
    def zeros(cls, n):
        return cls(
            mu=np.zeros((n, 3)),
            quat=np.zeros((n, 4)),
            log_scale=np.zeros((n, 3)),
            alpha_logit=np.zeros(n),
            sh=np.zeros((n, 16, 3)),
            v=np.zeros(3),
            w=np.zeros(3),
            p=np.zeros(3),
            rho=np.zeros(3),
        )

    def scene_blocks(self):
        return {
            "mu": self.mu,
            "quat": self.quat,
            "log_scale": self.log_scale,
            "alpha_logit": self.alpha_logit,
            "sh": self.sh,
        }


def _conic_to_cov_grad(conic, d_conic):
    """Map packed inverse-covariance gradients to full 2x2 covariance
    gradients via d(Sigma) = -Lambda dLambda Lambda."""
    lam = np.empty(conic.shape[:-1] + (2, 2))
    lam[..., 0, 0] = conic[..., 0]
    lam[..., 0, 1] = conic[..., 1]
    lam[..., 1, 0] = conic[..., 1]
    lam[..., 1, 1] = conic[..., 2]
    m = np.empty_like(lam)
    m[..., 0, 0] = d_conic[..., 0]
    # the packed off-diagonal is a single parameter covering both slots
    m[..., 0, 1] = 0.5 * d_conic[..., 1]
    m[..., 1, 0] = m[..., 0, 1]
    m[..., 1, 1] = d_conic[..., 2]
    return -np.einsum("nij,njk,nkl->nil", lam, m, lam)


def _quat_grad(quat, d_R):
    """Gradient through quat_to_rotmat, including the normalization."""
    norm = np.linalg.norm(quat, axis=-1, keepdims=True)
    qn = quat / norm
    w, x, y, z = qn[:, 0], qn[:, 1], qn[:, 2], qn[:, 3]
    G = d_R

    def g(i, j):
        return G[:, i, j]

    dw = 2.0 * (-z * g(0, 1) + y * g(0, 2) + z * g(1, 0) - x * g(1, 2)
                - y * g(2, 0) + x * g(2, 1))
    dx = 2.0 * (y * g(0, 1) + z * g(0, 2) + y * g(1, 0) - 2 * x * g(1, 1)
                - w * g(1, 2) + z * g(2, 0) + w * g(2, 1) - 2 * x * g(2, 2))
    dy = 2.0 * (-2 * y * g(0, 0) + x * g(0, 1) + w * g(0, 2) + x * g(1, 0)
                + z * g(1, 2) - w * g(2, 0) + z * g(2, 1) - 2 * y * g(2, 2))
    dz = 2.0 * (-2 * z * g(0, 0) - w * g(0, 1) + x * g(0, 2) + w * g(1, 0)
                - 2 * z * g(1, 1) + y * g(1, 2) + x * g(2, 0) + y * g(2, 1))
    d_unit = np.stack([dw, dx, dy, dz], axis=1)
    # normalization projects out the radial component
    radial = np.sum(d_unit * qn, axis=1, keepdims=True)
    return (d_unit - qn * radial) / norm


def backward_frame(cache: RenderCache, d_linear, scene: GaussianScene):
    """Propagate a linear-image gradient to scene and motion gradients.

    cache must come from render_projected on the same scene and frame.
    Returns GradBuffers sized like the scene; frame gradients (v, w, p,
    rho) describe the camera parameters of this frame.
    """
    pgs = cache.pgs
    n = len(scene)
    out = GradBuffers.zeros(n)
    m = len(pgs)
    if m == 0:
        return out

    fm, intr, cfg = cache.fm, cache.intr, cache.cfg
    e_off, t_ro = cache.e_offsets, cache.t_ro
    if len(e_off) == 1 and (fm.T_e != 0.0 or fm.T_ro != 0.0):
        # the forward pass collapses zero-motion frames to one sample;
        # gradients w.r.t. velocities still need the time quadrature
        e_off = exposure_offsets(cfg.n_blur, fm.T_e)
        t_ro = fm.T_ro

    order = cache.order
    mu_s, cov_s, col_s, al_s, vel_s = _sorted_arrays(pgs, order)
    g = kernels.backward(
        intr.width, intr.height, TILE, mu_s, cache.conic, col_s, al_s,
        vel_s, cache.tile_idx, cache.tile_start, e_off, t_ro,
        np.ascontiguousarray(d_linear, dtype=np.float64),
    )
    # undo the depth sort
    d_mu_px = np.empty((m, 2))
    d_conic = np.empty((m, 3))
    d_color = np.empty((m, 3))
    d_alpha = np.empty(m)
    d_vel_px = np.empty((m, 2))
    for dst, src in zip((d_mu_px, d_conic, d_color, d_alpha, d_vel_px), g):
        dst[order] = src
    conic = np.empty((m, 3))
    conic[order] = cache.conic

    R = fm.pose.R
    mu_cam, cov_cam, J = pgs.mu_cam, pgs.cov_cam, pgs.J

    # conic -> pixel covariance -> (J, camera covariance)
    G_cov_px = _conic_to_cov_grad(conic, d_conic)
    d_J = 2.0 * np.einsum("nij,njk,nkl->nil", G_cov_px, J, cov_cam)
    G_cov_cam = np.einsum("nji,njk,nkl->nil", J, G_cov_px, J)

    # screen velocity -> (J, camera velocity terms)
    u = np.cross(fm.w[None, :], mu_cam) + fm.v
    d_J -= np.einsum("ni,nj->nij", d_vel_px, u)
    g_u = -np.einsum("nij,ni->nj", J, d_vel_px)
    out.v = g_u.sum(axis=0)
    out.w = np.cross(mu_cam, g_u).sum(axis=0)

    # accumulate camera-space mean gradients from all three paths
    d_mu_cam = np.einsum("nij,ni->nj", J, d_mu_px)
    d_mu_cam += np.cross(g_u, fm.w[None, :])
    X, Y, Z = mu_cam[:, 0], mu_cam[:, 1], mu_cam[:, 2]
    inv_z2 = 1.0 / (Z * Z)
    fx, fy = intr.fx, intr.fy
    d_mu_cam[:, 0] += d_J[:, 0, 2] * (-fx * inv_z2)
    d_mu_cam[:, 1] += d_J[:, 1, 2] * (-fy * inv_z2)
    d_mu_cam[:, 2] += (d_J[:, 0, 0] * (-fx * inv_z2)
                       + d_J[:, 1, 1] * (-fy * inv_z2)
                       + d_J[:, 0, 2] * (2.0 * fx * X * inv_z2 / Z)
                       + d_J[:, 1, 2] * (2.0 * fy * Y * inv_z2 / Z))

    # camera frame -> world frame and pose tangent
    d_mu_world = d_mu_cam @ R.T
    out.p = -d_mu_world.sum(axis=0)
    out.rho = -np.cross(mu_cam, d_mu_cam).sum(axis=0)

    G_cov_world = np.einsum("ij,njk,lk->nil", R, G_cov_cam, R)

    # world covariance -> orientation and scale logits
    src = pgs.source_index
    quat = scene.quat[src]
    var = sigmoid(scene.log_scale[src])
    R_q = quat_to_rotmat(quat)
    d_Rq = 2.0 * np.einsum("nij,njk->nik", G_cov_world, R_q) * var[:, None, :]
    d_var = np.einsum("nji,njk,nki->ni", R_q, G_cov_world, R_q)

    out.mu[src] = d_mu_world
    out.quat[src] = _quat_grad(quat, d_Rq)
    out.log_scale[src] = d_var * var * (1.0 - var)
    out.alpha_logit[src] = d_alpha * pgs.alpha * (1.0 - pgs.alpha)
    active = (pgs.raw_color > 0.0).astype(np.float64)
    out.sh[src] = np.einsum("nb,nc->nbc", pgs.basis, d_color * active)
    return out


def _safe_weight_mask(cache: RenderCache, margin=1e-3):
    """Pixels whose blending state sits safely away from the skip, clip,
    and early-exit thresholds for every splat and time sample.

    The thresholds are kinks; finite differences across them measure the
    jump instead of the derivative, so fd_check only weights safe pixels.
    """
    from .kernels import numpy_backend as nb

    intr = cache.intr
    h, w = intr.height, intr.width
    safe = np.ones((h, w), dtype=bool)
    if len(cache.pgs) == 0:
        return safe
    order = cache.order
    pgs = cache.pgs
    mu, al, vel = pgs.mu_px[order], pgs.alpha[order], pgs.vel_px[order]
    conic = cache.conic
    ntx = -(-w // TILE)
    nty = -(-h // TILE)
    for t in range(ntx * nty):
        s, e = cache.tile_start[t], cache.tile_start[t + 1]
        if s == e:
            continue
        ids = cache.tile_idx[s:e]
        x0, x1, y0, y1, px, py = nb._tile_pixels(t, ntx, TILE, w, h)
        ok = np.ones(px.size, dtype=bool)
        for k in range(len(cache.e_offsets)):
            dt = cache.e_offsets[k] + ((py + 0.5) / h - 0.5) * cache.t_ro
            _, a, G, _, _, Tpre = nb._sample_weights(
                px, py, dt, mu[ids], conic[ids], al[ids], vel[ids])
            raw = al[ids][None, :] * G
            ok &= np.all(np.abs(raw - nb.ALPHA_SKIP) > margin, axis=1)
            ok &= np.all(np.abs(raw - nb.ALPHA_CLIP) > margin, axis=1)
            exit_t = nb.TRANSMITTANCE_EXIT
            ok &= np.all((Tpre > 2 * exit_t) | (Tpre < 0.5 * exit_t), axis=1)
        safe[y0:y1, x0:x1] &= ok.reshape(y1 - y0, x1 - x0)
    return safe


def fd_check(scene: GaussianScene, fm, intr, cfg, h=1e-6, seed=0):
    """Central-difference audit of backward_frame on one frame.

    Renders the scene, draws a random weight image restricted to pixels
    away from blending kinks, and compares the analytic gradient of
    sum(weights * linear) against central differences for every block.
    Returns {block: relative error}, where each block's error is its
    worst absolute deviation divided by its largest finite-difference
    magnitude. Scene and frame must be smooth points: all splats inside
    the cull region, distinct depths, colors away from the clamp.
    """
    from .geometry import so3_exp
    from .projection import project_scene
    from .rasterizer import render_projected

    linear, cache = render_projected(
        project_scene(scene, fm, intr, cfg), fm, intr, cfg)
    rng = np.random.default_rng(seed)
    weights = rng.normal(size=linear.shape)
    weights *= _safe_weight_mask(cache)[..., None]
    grads = backward_frame(cache, weights, scene)

    def loss(s, f):
        lin, _ = render_projected(project_scene(s, f, intr, cfg), f, intr, cfg)
        return float(np.sum(lin * weights))

    def rel(fd, g):
        scale = max(float(np.max(np.abs(fd))), 1e-10)
        return float(np.max(np.abs(fd - g))) / scale

    errs = {}
    work = scene.copy()
    for name, g in grads.scene_blocks().items():
        arr = getattr(work, name)
        fd = np.zeros_like(arr)
        flat, fd_flat = arr.reshape(-1), fd.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            lp = loss(work, fm)
            flat[i] = orig - h
            lm = loss(work, fm)
            flat[i] = orig
            fd_flat[i] = (lp - lm) / (2 * h)
        errs[name] = rel(fd, g)

    for name, g in (("v", grads.v), ("w", grads.w)):
        fd = np.zeros(3)
        for i in range(3):
            f2 = fm.copy()
            getattr(f2, name)[i] += h
            lp = loss(scene, f2)
            getattr(f2, name)[i] -= 2 * h
            lm = loss(scene, f2)
            fd[i] = (lp - lm) / (2 * h)
        errs[name] = rel(fd, g)

    fd = np.zeros(3)
    for i in range(3):
        f2 = fm.copy()
        f2.pose.p[i] += h
        lp = loss(scene, f2)
        f2.pose.p[i] -= 2 * h
        lm = loss(scene, f2)
        fd[i] = (lp - lm) / (2 * h)
    errs["p"] = rel(fd, grads.p)

    fd = np.zeros(3)
    for i in range(3):
        step = np.zeros(3)
        step[i] = h
        f2 = fm.copy()
        f2.pose.R = fm.pose.R @ so3_exp(step)
        lp = loss(scene, f2)
        f2.pose.R = fm.pose.R @ so3_exp(-step)
        lm = loss(scene, f2)
        fd[i] = (lp - lm) / (2 * h)
    errs["rho"] = rel(fd, grads.rho)
    return errs

