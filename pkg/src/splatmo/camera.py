"""Camera model: intrinsics, per-frame motion state, and exposure timing.

Each frame carries a mid-exposure pose plus constant linear and angular
velocities expressed in the camera frame. Motion blur and rolling shutter
are both sampled as small time offsets from the mid-exposure pose: an
exposure term (symmetric grid over the shutter-open interval) plus a
per-row readout term (top row earliest).
"""

from dataclasses import dataclass

import numpy as np

from .geometry import Pose, so3_exp


@dataclass
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0.0 or self.fy <= 0.0:
            raise ValueError("focal lengths must be positive")
        if self.width < 1 or self.height < 1:
            raise ValueError("image size must be at least 1x1")

    def matrix(self):
        return np.array(
            [
                [self.fx, 0.0, self.cx],
                [0.0, self.fy, self.cy],
                [0.0, 0.0, 1.0],
            ]
        )


@dataclass
class RenderConfig:
    n_blur: int = 5  # exposure samples per frame
    gamma: float = 2.2  # display encoding exponent
    d_min: float = 0.2  # near-plane depth, world units
    cull_margin: float = 30.0  # pixels outside the image kept before culling

    def __post_init__(self):
        if self.n_blur < 1:
            raise ValueError("n_blur must be >= 1")
        if self.gamma <= 0.0:
            raise ValueError("gamma must be positive")
        if self.d_min <= 0.0:
            raise ValueError("d_min must be positive")
        if self.cull_margin < 0.0:
            raise ValueError("cull_margin must be non-negative")


@dataclass
class FrameMotion:
    """Mid-exposure pose and intra-frame motion of one frame."""

    pose: Pose  # camera-to-world at the frame timestamp
    v: np.ndarray  # (3,) linear velocity, camera frame, units/s
    w: np.ndarray  # (3,) angular velocity, camera frame, rad/s
    T_e: float = 0.0  # exposure time, seconds
    T_ro: float = 0.0  # readout time, seconds
    t: float = 0.0  # frame timestamp, seconds

    def __post_init__(self):
        self.v = np.asarray(self.v, dtype=np.float64).reshape(3)
        self.w = np.asarray(self.w, dtype=np.float64).reshape(3)
        if self.T_e < 0.0 or self.T_ro < 0.0:
            raise ValueError("exposure and readout times must be non-negative")

    def copy(self):
        return FrameMotion(
            self.pose.copy(), self.v.copy(), self.w.copy(),
            self.T_e, self.T_ro, self.t,
        )


def pose_at(fm: FrameMotion, dt: float) -> Pose:
    """Pose a small time offset away from the frame's mid-exposure pose.

    Constant-velocity model in the camera frame: the orientation composes
    a local rotation exp(dt * w) on the right, the center translates by
    dt * R v. dt == 0 returns the stored pose unchanged.
    """
    if dt == 0.0:
        return fm.pose.copy()
    R = fm.pose.R
    return Pose(R @ so3_exp(dt * fm.w), fm.pose.p + dt * (R @ fm.v))


def exposure_offsets(n_blur: int, T_e: float) -> np.ndarray:
    """Symmetric time-offset grid spanning the exposure interval.

    n_blur points over [-T_e/2, +T_e/2], endpoints included; a single
    sample sits exactly at 0. Built by mirroring so the grid sums to zero
    exactly in floating point.
    """
    if n_blur < 1:
        raise ValueError("n_blur must be >= 1")
    out = np.zeros(n_blur, dtype=np.float64)
    if n_blur == 1 or T_e == 0.0:
        return out
    for k in range((n_blur + 1) // 2):
        off = (k / (n_blur - 1) - 0.5) * T_e
        out[k] = off
        out[n_blur - 1 - k] = -off
    return out


def readout_offset(y, height: int, T_ro: float):
    """Row-dependent shutter readout delay for pixel row(s) y.

    Rows are read top to bottom; the vertical image center maps to offset
    zero, the top row to about -T_ro/2. Uses the pixel-center convention
    (y + 0.5) / height - 0.5.
    """
    return ((np.asarray(y, dtype=np.float64) + 0.5) / height - 0.5) * T_ro


def sample_offset(k: int, y, cfg: RenderConfig, fm: FrameMotion, height: int):
    """Total time offset of blur sample k when rendering pixel row y."""
    if not 0 <= k < cfg.n_blur:
        raise ValueError("blur sample index out of range")
    return exposure_offsets(cfg.n_blur, fm.T_e)[k] + readout_offset(
        y, height, fm.T_ro
    )
