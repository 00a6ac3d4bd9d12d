"""Joint optimization of Gaussians, camera poses, and frame velocities.

Each iteration renders one uniformly sampled training frame, scores it in
display (gamma) space, and applies adaptive-moment updates per parameter
block. Poses are optimized as local corrections (delta, rho) against the
initial estimates, which doubles as the l2 anchor penalty keeping the
reconstruction gauge fixed. Eval frames never feed gradients into the
scene; their poses and velocities are refined separately with the scene
frozen.
"""

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import correlate1d

from .camera import FrameMotion, Intrinsics, RenderConfig
from .geometry import Pose, so3_exp, so3_log
from .gradients import backward_frame
from .projection import project_scene
from .rasterizer import gamma_encode, gamma_encode_backward, render_projected
from .scene import GaussianScene

log = logging.getLogger(__name__)

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
PSNR_CAP = 99.0


@dataclass
class TrainConfig:
    """Optimization hyperparameters.

    Learning rates marked per-extent are multiplied by the initial scene
    bounding-box diagonal so steps scale with the reconstruction size.
    """

    n_iters: int = 20000
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-15
    lr_mu: float = 1.6e-4  # per-extent
    lr_quat: float = 5e-3
    lr_scale: float = 5e-3
    lr_opacity: float = 5e-2
    lr_sh: float = 2.5e-3
    lr_pose_trans: float = 1e-4  # per-extent
    lr_pose_rot: float = 1e-4
    lr_velocity: float = 1e-4
    lambda_pose: float = 1e-2
    lambda_rot: float = 1e-2
    min_rgb: float = 10.0 / 255.0  # display-space floor on loss references
    optimize_scene: bool = True
    optimize_pose: bool = True
    optimize_velocity: bool = True
    eval_every: int = 500
    seed: int = 0


@dataclass
class Metrics:
    psnr: float
    ssim: float


class _Adam:
    """First/second moment accumulators for one parameter block."""

    __slots__ = ("m", "v", "t")

    def __init__(self, shape):
        self.m = np.zeros(shape)
        self.v = np.zeros(shape)
        self.t = 0

    def step(self, grad, lr, b1, b2, eps):
        self.t += 1
        self.m = b1 * self.m + (1.0 - b1) * grad
        self.v = b2 * self.v + (1.0 - b2) * grad * grad
        mh = self.m / (1.0 - b1 ** self.t)
        vh = self.v / (1.0 - b2 ** self.t)
        return -lr * mh / (np.sqrt(vh) + eps)


@dataclass
class TrainState:
    """Everything the training loop owns.

    frames holds train and eval frames together; is_eval flags the split.
    delta/rho are pose corrections against anchors: the live pose of
    frame i is (anchors[i].R @ exp(rho[i]), anchors[i].p + delta[i]).
    """

    scene: GaussianScene
    frames: list
    references: np.ndarray  # (F, H, W, 3) display space, as captured
    is_eval: np.ndarray  # (F,) bool
    intr: Intrinsics
    render_cfg: RenderConfig
    cfg: TrainConfig
    anchors: list = field(default_factory=list)
    delta: np.ndarray = None
    rho: np.ndarray = None
    loss_references: np.ndarray = None  # floored copy used by the loss
    extent: float = 0.0
    moments: dict = field(default_factory=dict)
    iteration: int = 0
    rng: np.random.Generator = None  # frame-sampling stream, set by train

    def __post_init__(self):
        f = len(self.frames)
        if self.references.shape[0] != f or len(self.is_eval) != f:
            raise ValueError("frames, references, is_eval lengths differ")
        if not self.anchors:
            self.anchors = [fm.pose.copy() for fm in self.frames]
        if self.delta is None:
            self.delta = np.zeros((f, 3))
        if self.rho is None:
            self.rho = np.zeros((f, 3))
        if self.loss_references is None:
            floor = self.cfg.min_rgb if self.render_cfg.gamma != 1.0 else 0.0
            self.loss_references = np.maximum(self.references, floor)
        if self.extent == 0.0:
            self.extent = max(self.scene.extent(), 1e-12)

    @property
    def train_indices(self):
        return np.flatnonzero(~self.is_eval)

    @property
    def eval_indices(self):
        return np.flatnonzero(self.is_eval)

    def apply_pose(self, i):
        """Refresh frame i's pose from its latent correction."""
        a = self.anchors[i]
        self.frames[i].pose = Pose(a.R @ so3_exp(self.rho[i]),
                                   a.p + self.delta[i])

    def moment(self, key, shape):
        if key not in self.moments:
            self.moments[key] = _Adam(shape)
        return self.moments[key]


def psnr(a, b):
    """Peak signal-to-noise ratio in dB for [0, 1] images, capped at 99."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError("psnr: shape mismatch")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return float(min(10.0 * np.log10(1.0 / mse), PSNR_CAP))


def _windowed(img, kernel):
    out = correlate1d(img, kernel, axis=0, mode="constant")
    return correlate1d(out, kernel, axis=1, mode="constant")


def ssim(a, b, k1=0.01, k2=0.03):
    """Structural similarity with an 11x11 Gaussian window (sigma 1.5).

    Channels are averaged; only windows fully inside the image count.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError("ssim: shape mismatch")
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    if min(a.shape[0], a.shape[1]) < SSIM_WINDOW:
        raise ValueError("ssim: image smaller than the window")
    r = np.arange(SSIM_WINDOW) - (SSIM_WINDOW - 1) / 2.0
    kernel = np.exp(-(r ** 2) / (2.0 * SSIM_SIGMA ** 2))
    kernel /= kernel.sum()
    c1 = k1 ** 2
    c2 = k2 ** 2
    mu_a = _windowed(a, kernel)
    mu_b = _windowed(b, kernel)
    var_a = _windowed(a * a, kernel) - mu_a ** 2
    var_b = _windowed(b * b, kernel) - mu_b ** 2
    cov = _windowed(a * b, kernel) - mu_a * mu_b
    s = ((2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2)
         / ((mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)))
    m = (SSIM_WINDOW - 1) // 2
    return float(np.mean(s[m:-m, m:-m]))


def photometric_loss(rendered, reference):
    """0.8 L1 + 0.2 (1 - SSIM) in display space; gradients flow through
    the L1 term only (SSIM is reported, not differentiated)."""
    rendered = np.asarray(rendered, dtype=np.float64)
    reference = np.asarray(reference, dtype=np.float64)
    if rendered.shape != reference.shape:
        raise ValueError("photometric_loss: shape mismatch")
    l1 = float(np.mean(np.abs(rendered - reference)))
    return 0.8 * l1 + 0.2 * (1.0 - ssim(rendered, reference))


def pose_penalty(frames, anchors, lambda_pose=1e-2, lambda_rot=1e-2):
    """l2 anchoring of poses to their initial estimates."""
    total = 0.0
    for fm, anchor in zip(frames, anchors):
        d = fm.pose.p - anchor.p
        total += lambda_pose * float(d @ d)
        rot = so3_log(anchor.R.T @ fm.pose.R)
        total += lambda_rot * float(rot @ rot)
    return total


def frame_metrics(state: TrainState, i) -> Metrics:
    """Render frame i at its current pose and score it against the
    as-captured reference."""
    fm = state.frames[i]
    pgs = project_scene(state.scene, fm, state.intr, state.render_cfg)
    linear, _ = render_projected(pgs, fm, state.intr, state.render_cfg)
    pred = gamma_encode(linear, state.render_cfg.gamma)
    ref = state.references[i]
    return Metrics(psnr=psnr(pred, ref), ssim=ssim(pred, ref))


def _loss_and_grads(state: TrainState, i):
    """Photometric loss of frame i plus gradients of everything."""
    cfg, rc = state.cfg, state.render_cfg
    fm = state.frames[i]
    pgs = project_scene(state.scene, fm, state.intr, rc)
    linear, cache = render_projected(pgs, fm, state.intr, rc)
    lin_floor = cfg.min_rgb ** rc.gamma if rc.gamma != 1.0 else 0.0
    pred = gamma_encode(linear, rc.gamma, floor=lin_floor)
    ref = state.loss_references[i]
    diff = pred - ref
    l1 = float(np.mean(np.abs(diff)))
    ssim_val = ssim(pred, ref)
    loss = 0.8 * l1 + 0.2 * (1.0 - ssim_val)
    d_pred = 0.8 * np.sign(diff) / diff.size
    d_linear = gamma_encode_backward(linear, rc.gamma, d_pred, floor=lin_floor)
    grads = backward_frame(cache, d_linear, state.scene)
    return loss, grads


def _update_scene(state: TrainState, grads):
    cfg = state.cfg
    sc = state.scene
    plan = (
        ("mu", sc.mu, grads.mu, cfg.lr_mu * state.extent),
        ("quat", sc.quat, grads.quat, cfg.lr_quat),
        ("log_scale", sc.log_scale, grads.log_scale, cfg.lr_scale),
        ("alpha_logit", sc.alpha_logit, grads.alpha_logit, cfg.lr_opacity),
        ("sh", sc.sh, grads.sh, cfg.lr_sh),
    )
    for name, param, grad, lr in plan:
        adam = state.moment(name, param.shape)
        step = adam.step(grad, lr, cfg.beta1, cfg.beta2, cfg.eps)
        param += step
        if name == "quat":
            # renormalize only the rows this step moved; renormalization of
            # an already-unit quaternion is not exactly idempotent, and
            # re-dividing untouched rows would drift bits every iteration
            moved = np.any(step != 0.0, axis=1)
            if np.any(moved):
                sc.quat[moved] /= np.linalg.norm(sc.quat[moved], axis=1,
                                                 keepdims=True)


def _update_frame(state: TrainState, i, grads, pose=True, velocity=True):
    cfg = state.cfg
    if pose:
        g_delta = grads.p + 2.0 * cfg.lambda_pose * state.delta[i]
        g_rho = grads.rho + 2.0 * cfg.lambda_rot * state.rho[i]
        adam = state.moment(("delta", i), (3,))
        state.delta[i] += adam.step(g_delta, cfg.lr_pose_trans * state.extent,
                                    cfg.beta1, cfg.beta2, cfg.eps)
        adam = state.moment(("rho", i), (3,))
        state.rho[i] += adam.step(g_rho, cfg.lr_pose_rot,
                                  cfg.beta1, cfg.beta2, cfg.eps)
        state.apply_pose(i)
    if velocity:
        fm = state.frames[i]
        adam = state.moment(("v", i), (3,))
        fm.v += adam.step(grads.v, cfg.lr_velocity,
                          cfg.beta1, cfg.beta2, cfg.eps)
        adam = state.moment(("w", i), (3,))
        fm.w += adam.step(grads.w, cfg.lr_velocity,
                          cfg.beta1, cfg.beta2, cfg.eps)


def _check_finite(state: TrainState, i, loss, grads):
    finite = np.isfinite(loss)
    for arr in (grads.mu, grads.quat, grads.log_scale, grads.alpha_logit,
                grads.sh, grads.v, grads.w, grads.p, grads.rho):
        finite = finite and np.all(np.isfinite(arr))
    if not finite:
        sc = state.scene
        norms = {
            "mu": float(np.linalg.norm(sc.mu)),
            "quat": float(np.linalg.norm(sc.quat)),
            "log_scale": float(np.linalg.norm(sc.log_scale)),
            "alpha_logit": float(np.linalg.norm(sc.alpha_logit)),
            "sh": float(np.linalg.norm(sc.sh)),
        }
        raise RuntimeError(
            f"non-finite loss or gradient at iteration {state.iteration} "
            f"on frame {i}; parameter norms: {norms}"
        )


def train(state: TrainState, n_iters=None):
    """Run the training loop; returns (state, history).

    history rows are dicts with iteration, frame, loss (photometric +
    pose penalty), and, on evaluation iterations, per-eval-frame psnr
    and ssim under the current eval poses.
    """
    cfg = state.cfg
    if n_iters is None:
        n_iters = cfg.n_iters
    # the stream lives on the state so a checkpointed run resumes exactly
    # where the sampling sequence left off
    if state.rng is None:
        state.rng = np.random.default_rng(
            np.random.SeedSequence(entropy=cfg.seed, spawn_key=(1,)))
    rng = state.rng
    train_idx = state.train_indices
    if len(train_idx) == 0:
        raise ValueError("no training frames")
    history = []
    for it in range(n_iters):
        i = int(train_idx[rng.integers(len(train_idx))])
        loss, grads = _loss_and_grads(state, i)
        tf = [state.frames[j] for j in train_idx]
        ta = [state.anchors[j] for j in train_idx]
        loss += pose_penalty(tf, ta, cfg.lambda_pose, cfg.lambda_rot)
        _check_finite(state, i, loss, grads)
        if cfg.optimize_scene:
            _update_scene(state, grads)
        _update_frame(state, i, grads,
                      pose=cfg.optimize_pose,
                      velocity=cfg.optimize_velocity)
        state.iteration += 1
        row = {"iteration": state.iteration, "frame": i, "loss": loss}
        last = it == n_iters - 1
        if cfg.eval_every and (state.iteration % cfg.eval_every == 0 or last):
            for k, j in enumerate(state.eval_indices):
                m = frame_metrics(state, int(j))
                row[f"psnr_{k}"] = m.psnr
                row[f"ssim_{k}"] = m.ssim
        history.append(row)
    return state, history


def eval_optimize(state: TrainState, n_iters=500):
    """Refine eval-frame poses and velocities with the scene frozen.

    Cycles deterministically over the eval frames; scene parameters are
    untouched (the caller can hash them to verify). Returns the state.
    """
    eval_idx = state.eval_indices
    if len(eval_idx) == 0:
        return state
    for it in range(n_iters):
        i = int(eval_idx[it % len(eval_idx)])
        loss, grads = _loss_and_grads(state, i)
        _check_finite(state, i, loss, grads)
        _update_frame(state, i, grads, pose=True, velocity=True)
        state.iteration += 1
    return state
