"""Synthetic data generation and brute-force oracles.

The oracle renderer integrates camera motion by full re-projection at many
poses inside the exposure window (and per image row for rolling shutter),
so it is strictly finer than the screen-space renderer it validates. Scene
and trajectory recipes are deterministic per seed; datasets carry true
poses/velocities separately from the (optionally corrupted) initial
estimates handed to the optimizer.
"""

import hashlib
import logging
from dataclasses import asdict, dataclass

import numpy as np

from .camera import (
    FrameMotion,
    Intrinsics,
    RenderConfig,
    pose_at,
    readout_offset,
)
from .geometry import Pose, so3_exp
from .projection import project_scene, projection_jacobian
from .rasterizer import Image, gamma_encode, render_projected
from .scene import GaussianScene

log = logging.getLogger(__name__)

SCENE_RECIPES = ("grid-wall", "textured-box", "random-cloud")
TRAJECTORY_RECIPES = ("arc", "line", "jitter")
VARIANTS = ("clean", "mb", "rs", "mbrs", "posenoise")

BOX_HALF = 4.0  # splats live inside the [-4, 4]^3 box (10-unit box with slack)
ORBIT_RADIUS = 9.0


@dataclass
class SimSpec:
    """Recipe for one synthetic dataset.

    sigma_trans == 0 means the default 0.01 x scene extent at noise time.
    n_eval == 0 selects eval frames by blur score in blocks of eight;
    n_eval > 0 places that many eval frames at evenly spaced positions.
    """

    scene_recipe: str = "random-cloud"
    n_splats: int = 500
    trajectory: str = "arc"
    speed: float = 1.0  # scene units/s along the path
    T_e: float = 0.0
    T_ro: float = 0.0
    n_frames: int = 24
    frame_dt: float = 0.1
    width: int = 64
    height: int = 64
    focal: float = 70.0
    n_pose_samples: int = 32
    rows_per_band: int = 1
    sigma_trans: float = 0.0
    sigma_rot: float = float(np.deg2rad(0.5))
    n_eval: int = 0
    gamma: float = 2.2
    seed: int = 0

    def __post_init__(self):
        if self.scene_recipe not in SCENE_RECIPES:
            raise ValueError(f"unknown scene recipe {self.scene_recipe!r}")
        if self.trajectory not in TRAJECTORY_RECIPES:
            raise ValueError(f"unknown trajectory recipe {self.trajectory!r}")
        if self.n_frames < 1 or self.n_pose_samples < 1:
            raise ValueError("n_frames and n_pose_samples must be >= 1")
        if self.rows_per_band < 1:
            raise ValueError("rows_per_band must be >= 1")

    def intrinsics(self):
        return Intrinsics(self.focal, self.focal,
                          self.width / 2.0 - 0.5, self.height / 2.0 - 0.5,
                          self.width, self.height)

    def check_against(self, cfg: RenderConfig):
        # the oracle must sample the exposure strictly finer than the method
        if self.n_pose_samples < 2 * cfg.n_blur:
            raise ValueError(
                f"n_pose_samples={self.n_pose_samples} must be >= "
                f"2 * n_blur={cfg.n_blur}"
            )


@dataclass
class SimDataset:
    """Rendered sequence plus everything the optimizer and metrics need."""

    scene: GaussianScene
    intr: Intrinsics
    frames_true: list  # FrameMotion per frame, truth
    frames_init: list  # optimizer starting estimates
    is_eval: np.ndarray
    images: np.ndarray  # (F, H, W, 3) display space
    spec: SimSpec
    variant: str
    meta: dict

    @property
    def train_indices(self):
        return np.flatnonzero(~self.is_eval)

    @property
    def eval_indices(self):
        return np.flatnonzero(self.is_eval)


def _substream(seed, key):
    return np.random.default_rng(np.random.SeedSequence(entropy=seed,
                                                        spawn_key=(key,)))


def _variance_logit(std):
    var = np.square(std)
    return np.log(var / (1.0 - var))


def _random_quats(rng, n):
    q = rng.normal(size=(n, 4))
    return q / np.linalg.norm(q, axis=1, keepdims=True)


def _dc_sh(n, dc):
    sh = np.zeros((n, 16, 3))
    sh[:, 0] = dc
    return sh


def make_scene(recipe, seed, n=500) -> GaussianScene:
    """Build a deterministic toy scene of n splats inside a 10-unit box.

    Recipes: "grid-wall" (textured plane facing +z viewers),
    "textured-box" (splats on the faces of a box), "random-cloud"
    (uniform volume fill). Splat standard deviations stay below 0.5 so
    the bounded-variance parameterization can represent them.
    """
    if recipe not in SCENE_RECIPES:
        raise ValueError(f"unknown scene recipe {recipe!r}")
    if not 200 <= n <= 2000:
        raise ValueError("recipes are calibrated for 200..2000 splats")
    rng = _substream(seed, 0)

    if recipe == "grid-wall":
        k = int(np.ceil(np.sqrt(n)))
        lin = np.linspace(-BOX_HALF, BOX_HALF, k)
        gx, gy = np.meshgrid(lin, lin, indexing="xy")
        mu = np.zeros((n, 3))
        mu[:, 0] = gx.ravel()[:n]
        mu[:, 1] = gy.ravel()[:n]
        mu[:, 2] = rng.normal(scale=0.05, size=n)
        spacing = 2.0 * BOX_HALF / (k - 1)
        # keep the largest jittered stdev under the representable 0.5 bound
        std = np.full((n, 3), min(0.42, 0.8 * spacing))
        std += rng.uniform(-0.15, 0.15, size=(n, 3)) * std
        ix = (gx.ravel()[:n] + BOX_HALF) / spacing
        iy = (gy.ravel()[:n] + BOX_HALF) / spacing
        checker = (np.round(ix) + np.round(iy)) % 2
        palette = np.array([[1.2, -0.6, -0.6], [-0.6, 0.4, 1.2]])
        dc = palette[checker.astype(int)] + rng.normal(scale=0.25, size=(n, 3))
    elif recipe == "textured-box":
        half = 3.0
        face = rng.integers(6, size=n)
        uv = rng.uniform(-half, half, size=(n, 2))
        axis = face // 2
        sign = np.where(face % 2 == 0, 1.0, -1.0)
        mu = np.zeros((n, 3))
        others = [(1, 2), (0, 2), (0, 1)]
        for a in range(3):
            sel = axis == a
            mu[sel, a] = sign[sel] * half
            mu[sel, others[a][0]] = uv[sel, 0]
            mu[sel, others[a][1]] = uv[sel, 1]
        std = rng.uniform(0.12, 0.35, size=(n, 3))
        base = np.array([[1.2, 0.0, -0.8], [-0.8, 1.0, 0.0], [0.0, -0.8, 1.2],
                         [1.0, 1.0, -1.0], [-1.0, 0.6, 0.6], [0.6, -0.4, -1.0]])
        checker = ((np.floor(uv[:, 0]) + np.floor(uv[:, 1])) % 2) - 0.5
        dc = base[face] + 0.8 * checker[:, None]
        dc += rng.normal(scale=0.2, size=(n, 3))
    else:  # random-cloud
        mu = rng.uniform(-BOX_HALF, BOX_HALF, size=(n, 3))
        std = rng.uniform(0.10, 0.35, size=(n, 3))
        dc = rng.uniform(-1.2, 1.5, size=(n, 3))

    sh = _dc_sh(n, np.clip(dc, -1.6, 1.6))
    sh[:, 1:] = rng.normal(scale=0.02, size=(n, 15, 3))
    return GaussianScene(mu, _random_quats(rng, n), _variance_logit(std),
                         rng.uniform(0.5, 2.5, size=n), sh)


def _look_at(p, target, up=(0.0, 1.0, 0.0)):
    """Camera-to-world rotation looking from p toward target, image y down."""
    p = np.asarray(p, dtype=np.float64)
    z = np.asarray(target, dtype=np.float64) - p
    z = z / np.linalg.norm(z)
    x = np.cross(-np.asarray(up, dtype=np.float64), z)
    nx = np.linalg.norm(x)
    if nx < 1e-12:
        raise ValueError("view direction parallel to the up vector")
    x = x / nx
    y = np.cross(z, x)
    return Pose(np.stack([x, y, z], axis=1), p)


def make_trajectory(spec: SimSpec, t_e=0.0, t_ro=0.0) -> list:
    """Per-frame poses with analytic camera-frame velocities.

    "arc": orbit of ORBIT_RADIUS around the origin, always facing it
    (velocities are the exact path derivatives). "line": lateral dolly at
    constant speed, orientation fixed at the path midpoint's view. "jitter":
    arc poses, but velocities replaced by random per-frame draws scaled by
    speed (handheld shake; each frame is its own rigid screw).
    """
    n = spec.n_frames
    times = (np.arange(n) - (n - 1) / 2.0) * spec.frame_dt
    frames = []
    if spec.trajectory in ("arc", "jitter"):
        rate = spec.speed / ORBIT_RADIUS
        for t in times:
            th = rate * t
            s, c = np.sin(th), np.cos(th)
            p = ORBIT_RADIUS * np.array([s, 0.0, c])
            pose = _look_at(p, (0.0, 0.0, 0.0))
            v = pose.R.T @ (ORBIT_RADIUS * rate * np.array([c, 0.0, -s]))
            w = rate * (pose.R.T @ np.array([0.0, 1.0, 0.0]))
            frames.append(FrameMotion(pose, v, w, t_e, t_ro, t=float(t)))
        if spec.trajectory == "jitter":
            rng = _substream(spec.seed, 1)
            scale = spec.speed / np.sqrt(3.0)
            for fm in frames:
                fm.v = rng.normal(scale=scale, size=3)
                fm.w = rng.normal(scale=0.3 * scale, size=3)
    else:  # line
        pose0 = _look_at((0.0, 0.0, ORBIT_RADIUS), (0.0, 0.0, 0.0))
        v = pose0.R.T @ np.array([spec.speed, 0.0, 0.0])
        for t in times:
            p = np.array([spec.speed * t, 0.0, ORBIT_RADIUS])
            frames.append(FrameMotion(Pose(pose0.R.copy(), p), v.copy(),
                                      np.zeros(3), t_e, t_ro, t=float(t)))
    return frames


def _static_linear(scene, pose, intr, cfg):
    still = FrameMotion(pose, np.zeros(3), np.zeros(3), 0.0, 0.0)
    pgs = project_scene(scene, still, intr, cfg)
    linear, _ = render_projected(pgs, still, intr, cfg)
    return linear


def _band_intrinsics(intr, y0, rows):
    return Intrinsics(intr.fx, intr.fy, intr.cx, intr.cy - y0,
                      intr.width, rows)


def _midpoint_offsets(n, t_e):
    if t_e == 0.0:
        return np.zeros(1)
    return ((np.arange(n) + 0.5) / n - 0.5) * t_e


def _quadrature_linear(scene, fm, intr, cfg, n_samples, rows_per_band):
    h = intr.height
    offsets = _midpoint_offsets(n_samples, fm.T_e)
    if fm.T_ro == 0.0:
        bands = [(0, h)]
    else:
        bands = [(y0, min(y0 + rows_per_band, h))
                 for y0 in range(0, h, rows_per_band)]
    out = np.empty((h, intr.width, 3))
    for y0, y1 in bands:
        r = float(np.mean(readout_offset(np.arange(y0, y1), h, fm.T_ro)))
        b_intr = _band_intrinsics(intr, y0, y1 - y0) if len(bands) > 1 else intr
        acc = np.zeros((y1 - y0, intr.width, 3))
        for e in offsets:
            acc += _static_linear(scene, pose_at(fm, float(e) + r), b_intr, cfg)
        out[y0:y1] = acc / len(offsets)
    return out


def oracle_render(scene, fm: FrameMotion, intr: Intrinsics,
                  n_pose_samples=64, rows_per_band=1, cfg=None,
                  output="gamma", tol=1e-3):
    """Brute-force reference render: full re-projection per time sample.

    Integrates the exposure with n_pose_samples midpoint samples and the
    readout row by row (bands of rows_per_band rows share one readout
    offset; 1 is exact). The result is recomputed at twice the sample
    count as a convergence gate; a max-abs residual >= tol logs a warning.
    Zero motion or a closed shutter collapses to the static render.
    """
    cfg = cfg if cfg is not None else RenderConfig()
    static = ((not np.any(fm.v) and not np.any(fm.w))
              or (fm.T_e == 0.0 and fm.T_ro == 0.0))
    if static:
        linear = _static_linear(scene, fm.pose, intr, cfg)
    elif fm.T_e == 0.0:
        # pure rolling shutter: one pose per row band, already exact
        linear = _quadrature_linear(scene, fm, intr, cfg, 1, rows_per_band)
    else:
        coarse = _quadrature_linear(scene, fm, intr, cfg,
                                    n_pose_samples, rows_per_band)
        linear = _quadrature_linear(scene, fm, intr, cfg,
                                    2 * n_pose_samples, rows_per_band)
        resid = float(np.max(np.abs(linear - coarse)))
        if resid >= tol:
            log.warning(
                "oracle not converged: residual %.3g after doubling to %d "
                "pose samples", resid, 2 * n_pose_samples,
            )
    if output == "linear":
        return Image(linear, "linear")
    if output == "gamma":
        return Image(gamma_encode(linear, cfg.gamma), "gamma")
    raise ValueError(f"unknown output {output!r}")


def blur_score(fm: FrameMotion, landmarks, intr: Intrinsics) -> float:
    """Mean pixel speed of landmark points in px/s.

    Landmarks are world-space 3-vectors; only those in front of the camera
    count. The score is the mean norm of the projection Jacobian applied
    to each landmark's camera-space velocity w x (R^T (l - p)) + v, which
    equals the mean pixel_velocity magnitude.
    """
    lm = np.atleast_2d(np.asarray(landmarks, dtype=np.float64))
    mu_cam = fm.pose.to_camera(lm)
    vis = mu_cam[:, 2] > 0.0
    if not np.any(vis):
        raise ValueError("no landmarks in front of the camera")
    mu_cam = mu_cam[vis]
    J = projection_jacobian(mu_cam, intr)
    u = np.cross(fm.w[None, :], mu_cam) + fm.v
    speeds = np.linalg.norm(np.einsum("nij,nj->ni", J, u), axis=1)
    return float(np.mean(speeds))


def keyframe_filter(scores) -> np.ndarray:
    """Indices kept after dropping locally-blurriest candidates.

    Candidate i is dropped iff its score is the strict maximum over the
    existing neighbours in the window [i-2, i+1]; ties keep the frame.
    """
    s = np.asarray(scores, dtype=np.float64)
    kept = []
    for i in range(len(s)):
        window = np.concatenate([s[max(0, i - 2):i], s[i + 1:i + 2]])
        if window.size and s[i] > window.max():
            continue
        kept.append(i)
    return np.array(kept, dtype=np.int64)


def eval_split(scores, block=8):
    """Split ordered keyframes into train and eval index arrays.

    Every block of `block` consecutive frames (the last may be partial)
    contributes its lowest-score frame to eval; ties take the lowest index.
    """
    s = np.asarray(scores, dtype=np.float64)
    if len(s) == 0:
        raise ValueError("eval_split needs at least one keyframe")
    eval_idx = [b + int(np.argmin(s[b:b + block]))
                for b in range(0, len(s), block)]
    eval_idx = np.array(eval_idx, dtype=np.int64)
    mask = np.ones(len(s), dtype=bool)
    mask[eval_idx] = False
    return np.flatnonzero(mask), eval_idx


def transfer_velocities(v_src, positions_src, positions_dst) -> np.ndarray:
    """Rescale per-frame linear velocities between two pose sets.

    The scale ratio is s(dst)/s(src) with s^2(p) the sum of squared
    deviations from the position centroid, which is invariant to rigid
    motion of either set. Angular velocities need no transfer.
    """
    ps = np.asarray(positions_src, dtype=np.float64)
    pd = np.asarray(positions_dst, dtype=np.float64)
    if ps.shape != pd.shape or ps.shape[0] < 2:
        raise ValueError("need two equal-length position sets of >= 2 poses")
    s2_src = np.sum((ps - ps.mean(axis=0)) ** 2)
    s2_dst = np.sum((pd - pd.mean(axis=0)) ** 2)
    if s2_src == 0.0:
        raise ValueError("source positions are all identical; scale undefined")
    return np.asarray(v_src, dtype=np.float64) * np.sqrt(s2_dst / s2_src)


def add_pose_noise(poses, sigma_trans, sigma_rot, seed) -> list:
    """Independent Gaussian noise on each pose; deterministic per seed.

    Translation noise is per-axis in world units; rotation noise composes
    exp of a per-axis Gaussian axis-angle on the right.
    """
    rng = np.random.default_rng(seed)
    out = []
    for pose in poses:
        dp = rng.normal(scale=sigma_trans, size=3)
        dr = rng.normal(scale=sigma_rot, size=3)
        out.append(Pose(pose.R @ so3_exp(dr), pose.p + dp))
    return out


def fd_scene(n=50, seed=0) -> GaussianScene:
    """Random scene at a smooth parameter point for derivative checks.

    Splats sit well inside the frustum with distinct depths, opacities far
    from the clip thresholds, and view-independent colors (no SH bands above
    DC), so the analytic backward pass is exact rather than approximate.
    """
    rng = np.random.default_rng(np.random.SeedSequence(entropy=seed,
                                                       spawn_key=(5,)))
    mu = np.empty((n, 3))
    mu[:, 0] = rng.uniform(-1.4, 1.4, n)
    mu[:, 1] = rng.uniform(-1.4, 1.4, n)
    mu[:, 2] = np.linspace(3.0, 8.0, n) + rng.uniform(-0.2, 0.2, n)
    quat = rng.normal(size=(n, 4))
    quat /= np.linalg.norm(quat, axis=1, keepdims=True)
    log_scale = rng.uniform(-5.5, -3.5, size=(n, 3))
    sh = np.zeros((n, 16, 3))
    sh[:, 0] = rng.uniform(0.3, 0.9, size=(n, 3))
    return GaussianScene(mu, quat, log_scale, rng.uniform(-1.0, 1.0, n), sh)


def fd_frame(t_e=0.12, t_ro=0.06, seed=0) -> FrameMotion:
    """Moving frame to pair with fd_scene: both exposure effects active."""
    rng = np.random.default_rng(np.random.SeedSequence(entropy=seed,
                                                       spawn_key=(6,)))
    return FrameMotion(Pose.identity(), rng.normal(size=3) * 0.3,
                       rng.normal(size=3) * 0.05, T_e=t_e, T_ro=t_ro)


def perturb_scene(scene: GaussianScene, seed, pos=0.05, color=0.1,
                  logit=0.3) -> GaussianScene:
    """Noisy copy of a scene, used as the optimizer's starting point."""
    rng = np.random.default_rng(seed)
    out = scene.copy()
    out.mu += rng.normal(scale=pos, size=out.mu.shape)
    out.sh[:, 0] += rng.normal(scale=color, size=(len(out), 3))
    out.alpha_logit += rng.normal(scale=logit, size=len(out))
    return out


def default_landmarks(scene: GaussianScene, seed, count=64):
    """Deterministic landmark subset (splat means stand in for SLAM points)."""
    rng = _substream(seed, 4)
    count = min(count, len(scene))
    return scene.mu[np.sort(rng.choice(len(scene), size=count,
                                       replace=False))]


def _select_eval(spec: SimSpec, frames, scene, intr):
    n = spec.n_frames
    if spec.n_eval > 0:
        if spec.n_eval >= n:
            raise ValueError("n_eval must leave at least one training frame")
        idx = (np.arange(spec.n_eval) + 0.5) * n / spec.n_eval
        eval_idx = np.unique(idx.astype(np.int64))
    else:
        lm = default_landmarks(scene, spec.seed)
        scores = [blur_score(fm, lm, intr) for fm in frames]
        _, eval_idx = eval_split(scores)
    is_eval = np.zeros(n, dtype=bool)
    is_eval[eval_idx] = True
    return is_eval


def simulate_sequence(spec: SimSpec, variant="mb") -> SimDataset:
    """Render one corrupted training sequence with ground truth attached.

    Variants select the corruption: "mb" exposes for spec.T_e, "rs" reads
    out over spec.T_ro, "mbrs" both, "posenoise" renders sharp images from
    true poses but hands the optimizer noised initial poses, "clean" does
    nothing. Eval frames are always rendered sharp (T_e = T_ro = 0) at
    their true poses.
    """
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}")
    t_e = spec.T_e if variant in ("mb", "mbrs") else 0.0
    t_ro = spec.T_ro if variant in ("rs", "mbrs") else 0.0

    scene = make_scene(spec.scene_recipe, spec.seed, spec.n_splats)
    intr = spec.intrinsics()
    cfg = RenderConfig(gamma=spec.gamma)
    frames = make_trajectory(spec, t_e, t_ro)
    is_eval = _select_eval(spec, frames, scene, intr)
    for i in np.flatnonzero(is_eval):
        frames[i].T_e = 0.0
        frames[i].T_ro = 0.0

    images = np.empty((spec.n_frames, spec.height, spec.width, 3))
    for i, fm in enumerate(frames):
        images[i] = oracle_render(scene, fm, intr, spec.n_pose_samples,
                                  spec.rows_per_band, cfg).data

    frames_init = [fm.copy() for fm in frames]
    if variant == "posenoise":
        sigma_trans = spec.sigma_trans
        if sigma_trans == 0.0:
            sigma_trans = 0.01 * scene.extent()
        train_idx = np.flatnonzero(~is_eval)
        noised = add_pose_noise([frames[i].pose for i in train_idx],
                                sigma_trans, spec.sigma_rot,
                                np.random.SeedSequence(entropy=spec.seed,
                                                       spawn_key=(2,)))
        for i, pose in zip(train_idx, noised):
            frames_init[i].pose = pose

    meta = {
        "variant": variant,
        "spec": asdict(spec),
        "intrinsics": asdict(intr),
        "scene_sha256": hashlib.sha256(scene.canonical_bytes()).hexdigest(),
        "images_sha256": hashlib.sha256(
            np.ascontiguousarray(images).tobytes()).hexdigest(),
    }
    return SimDataset(scene=scene, intr=intr, frames_true=frames,
                      frames_init=frames_init, is_eval=is_eval,
                      images=images, spec=spec, variant=variant, meta=meta)
