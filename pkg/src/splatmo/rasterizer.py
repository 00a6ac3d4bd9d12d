"""Tiled alpha-blending rasterizer over projected splats.

One projection and one depth sort per frame are shared by every blur
sample; each sample only translates the pixel-space means along the
per-splat screen velocity before blending front to back. The exposure
average is formed in linear RGB and display-encoded at the end.

``blend_pixel`` is the scalar reference implementation of the blending
contract; the tiled kernels must match it (the tile bounding boxes are
sized so that everything they exclude falls below the contribution
threshold anyway).
"""

import logging
import math
from dataclasses import dataclass

import numpy as np

from . import kernels
from .camera import FrameMotion, Intrinsics, RenderConfig, exposure_offsets
from .projection import ProjectedSplats, project_scene
from .scene import GaussianScene

TILE = 16
# Half-extent of splat bounding boxes in standard deviations. Chosen so the
# excluded tail satisfies ALPHA_CLIP * exp(-R^2/2) < ALPHA_SKIP, keeping
# tile culling exactly consistent with the per-pixel skip rule.
R_SIGMA = 3.5


@dataclass
class Image:
    data: np.ndarray  # (H, W, 3) float64
    colorspace: str  # "linear" or "gamma"


def gamma_encode(linear, gamma, floor=0.0):
    """Display encoding x^(1/gamma) of linear values clipped to [floor, 1]."""
    clipped = np.clip(linear, floor, 1.0)
    if gamma == 1.0:
        return clipped
    return clipped ** (1.0 / gamma)


def gamma_encode_backward(linear, gamma, d_encoded, floor=0.0):
    """Gradient of gamma_encode: maps d(encoded) back to d(linear).

    Zero outside the clip interval (floor, 1); the floor bounds the
    otherwise unbounded slope of x^(1/gamma) at x -> 0.
    """
    inside = (linear > floor) & (linear < 1.0)
    if gamma == 1.0:
        return np.where(inside, d_encoded, 0.0)
    clipped = np.clip(linear, floor, 1.0)
    slope = clipped ** (1.0 / gamma - 1.0) / gamma
    return np.where(inside, d_encoded * slope, 0.0)


def depth_sort(depth):
    """Stable ascending depth order (ties keep source order)."""
    return np.argsort(depth, kind="stable")


def conic_from_cov(cov_px):
    """Pack inverse 2x2 covariances as (a, b, c) for exp(-(a dx^2 + 2 b
    dx dy + c dy^2) / 2). The pixel-variance floor guarantees det > 0."""
    a = cov_px[:, 0, 0]
    b = cov_px[:, 0, 1]
    c = cov_px[:, 1, 1]
    det = a * c - b * b
    return np.stack([c / det, -b / det, a / det], axis=1)


def build_tile_lists(mu_px, cov_px, vel_px, t_span, intr: Intrinsics,
                     tile=TILE):
    """Per-tile splat index lists, preserving the given splat order.

    Boxes cover R_SIGMA standard deviations per axis plus the largest
    screen displacement during exposure/readout. Returns (tile_idx,
    tile_start) flattened over the row-major tile grid.
    """
    ntx = -(-intr.width // tile)
    nty = -(-intr.height // tile)
    n_tiles = ntx * nty
    m = mu_px.shape[0]
    if m == 0:
        return (np.zeros(0, dtype=np.int32),
                np.zeros(n_tiles + 1, dtype=np.int32))

    hx = R_SIGMA * np.sqrt(cov_px[:, 0, 0]) + np.abs(vel_px[:, 0]) * t_span
    hy = R_SIGMA * np.sqrt(cov_px[:, 1, 1]) + np.abs(vel_px[:, 1]) * t_span
    tx0 = np.clip(np.floor(mu_px[:, 0] - hx), 0, intr.width - 1).astype(np.int64) // tile
    tx1 = np.clip(np.ceil(mu_px[:, 0] + hx), 0, intr.width - 1).astype(np.int64) // tile
    ty0 = np.clip(np.floor(mu_px[:, 1] - hy), 0, intr.height - 1).astype(np.int64) // tile
    ty1 = np.clip(np.ceil(mu_px[:, 1] + hy), 0, intr.height - 1).astype(np.int64) // tile
    # drop splats whose box misses the image entirely
    off = ((mu_px[:, 0] + hx < -0.5) | (mu_px[:, 0] - hx > intr.width - 0.5)
           | (mu_px[:, 1] + hy < -0.5) | (mu_px[:, 1] - hy > intr.height - 0.5))

    nx = tx1 - tx0 + 1
    ny = ty1 - ty0 + 1
    counts = np.where(off, 0, nx * ny)
    total = int(counts.sum())
    splat_of_pair = np.repeat(np.arange(m), counts)
    # enumerate each splat's tile rectangle in row-major order
    local = np.arange(total) - np.repeat(np.cumsum(counts) - counts, counts)
    w_of_pair = np.repeat(nx, counts)
    dx = local % w_of_pair
    dy = local // w_of_pair
    tiles = ((np.repeat(ty0, counts) + dy) * ntx
             + np.repeat(tx0, counts) + dx)

    order = np.argsort(tiles, kind="stable")  # keeps depth order per tile
    tile_idx = splat_of_pair[order].astype(np.int32)
    counts_per_tile = np.bincount(tiles, minlength=n_tiles)
    tile_start = np.concatenate(
        [[0], np.cumsum(counts_per_tile)]
    ).astype(np.int32)
    return tile_idx, tile_start


def blend_pixel(x, y, mu_px, conic, color, alpha, vel_px, dt):
    """Reference front-to-back blend of one pixel at one time offset.

    Splat arrays must already be depth-sorted. Returns the linear RGB
    contribution of this sample (black background).
    """
    out = [0.0, 0.0, 0.0]
    T = 1.0
    for j in range(mu_px.shape[0]):
        dx = x - (mu_px[j, 0] + dt * vel_px[j, 0])
        dy = y - (mu_px[j, 1] + dt * vel_px[j, 1])
        E = -0.5 * (conic[j, 0] * dx * dx + conic[j, 2] * dy * dy) \
            - conic[j, 1] * dx * dy
        a = alpha[j] * math.exp(E)
        if a > kernels.ALPHA_CLIP:
            a = kernels.ALPHA_CLIP
        if a < kernels.ALPHA_SKIP:
            continue
        for c in range(3):
            out[c] += T * a * color[j, c]
        T *= 1.0 - a
        if T < kernels.TRANSMITTANCE_EXIT:
            break
    return np.array(out)


@dataclass
class RenderCache:
    """Everything the backward pass needs from one forward render."""

    pgs: ProjectedSplats
    order: np.ndarray  # depth sort permutation
    conic: np.ndarray  # (M, 3) sorted
    tile_idx: np.ndarray
    tile_start: np.ndarray
    e_offsets: np.ndarray
    t_ro: float
    linear: np.ndarray  # (H, W, 3)
    intr: Intrinsics
    cfg: RenderConfig
    fm: FrameMotion


def _sorted_arrays(pgs: ProjectedSplats, order):
    return (
        np.ascontiguousarray(pgs.mu_px[order]),
        np.ascontiguousarray(pgs.cov_px[order]),
        np.ascontiguousarray(pgs.color[order]),
        np.ascontiguousarray(pgs.alpha[order]),
        np.ascontiguousarray(pgs.vel_px[order]),
    )


def render_projected(pgs: ProjectedSplats, fm: FrameMotion, intr: Intrinsics,
                     cfg: RenderConfig):
    """Rasterize projected splats; returns (linear image, RenderCache)."""
    order = depth_sort(pgs.depth)
    mu, cov, color, alpha, vel = _sorted_arrays(pgs, order)
    conic = conic_from_cov(cov) if len(pgs) else np.zeros((0, 3))

    e_offsets = exposure_offsets(cfg.n_blur, fm.T_e)
    t_ro = fm.T_ro
    if not np.any(vel) or (fm.T_e == 0.0 and fm.T_ro == 0.0):
        # Splat positions are then identical at every time offset, so a
        # single sample equals the exposure average exactly.
        e_offsets = np.zeros(1)
        t_ro = 0.0

    t_span = (fm.T_e + fm.T_ro) / 2.0
    tile_idx, tile_start = build_tile_lists(mu, cov, vel, t_span, intr)
    linear = kernels.forward(
        intr.width, intr.height, TILE, mu, conic, color, alpha, vel,
        tile_idx, tile_start, e_offsets, t_ro,
    )
    cache = RenderCache(pgs, order, conic, tile_idx, tile_start,
                        e_offsets, t_ro, linear, intr, cfg, fm)
    return linear, cache


def render_frame(scene: GaussianScene, fm: FrameMotion, intr: Intrinsics,
                 cfg: RenderConfig, output="gamma"):
    """Render one frame with motion blur and rolling shutter.

    output selects "gamma" (display-encoded, default) or "linear".
    """
    pgs = project_scene(scene, fm, intr, cfg)
    if len(pgs) == 0:
        logging.getLogger(__name__).warning(
            "no visible splats; rendering background only"
        )
    linear, _ = render_projected(pgs, fm, intr, cfg)
    if output == "linear":
        return Image(linear, "linear")
    if output == "gamma":
        return Image(gamma_encode(linear, cfg.gamma), "gamma")
    raise ValueError(f"unknown output colorspace {output!r}")
