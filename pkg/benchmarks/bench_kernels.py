"""Compare the compiled rasterization core against the numpy fallback.

Runs the forward and backward kernels on one realistic projected frame
and reports per-call times plus the numerical gap between backends.
The backends agree to rounding (numpy reassociates a few reductions the
C loops do sequentially); this script asserts that ulp-scale agreement.

Usage: python benchmarks/bench_kernels.py [--splats 800] [--size 128]
       [--n-blur 5] [--repeats 20]
"""

import argparse
import importlib
import time

import numpy as np

from splatmo.camera import FrameMotion, Intrinsics, RenderConfig, \
    exposure_offsets
from splatmo.geometry import Pose
from splatmo.kernels import numpy_backend
from splatmo.projection import project_scene
from splatmo.rasterizer import TILE, build_tile_lists, conic_from_cov, \
    depth_sort
from splatmo.simkit import fd_scene


def make_inputs(n_splats, size, n_blur, seed=0):
    scene = fd_scene(n=n_splats, seed=seed)
    intr = Intrinsics(1.25 * size, 1.25 * size, (size - 1) / 2.0,
                      (size - 1) / 2.0, size, size)
    rng = np.random.default_rng(seed)
    fm = FrameMotion(Pose.identity(), 0.4 * rng.standard_normal(3),
                     0.06 * rng.standard_normal(3), T_e=0.15, T_ro=0.08)
    cfg = RenderConfig(n_blur=n_blur)
    pgs = project_scene(scene, fm, intr, cfg)
    order = depth_sort(pgs.depth)
    mu = np.ascontiguousarray(pgs.mu_px[order])
    cov = np.ascontiguousarray(pgs.cov_px[order])
    color = np.ascontiguousarray(pgs.color[order])
    alpha = np.ascontiguousarray(pgs.alpha[order])
    vel = np.ascontiguousarray(pgs.vel_px[order])
    conic = conic_from_cov(cov)
    t_span = (fm.T_e + fm.T_ro) / 2.0
    tile_idx, tile_start = build_tile_lists(mu, cov, vel, t_span, intr)
    e_offsets = exposure_offsets(cfg.n_blur, fm.T_e)
    args = (intr.width, intr.height, TILE, mu, conic, color, alpha, vel,
            tile_idx, tile_start, e_offsets, fm.T_ro)
    d_image = rng.standard_normal((intr.height, intr.width, 3))
    return args, d_image, len(mu)


def timeit(fn, repeats):
    fn()  # warm up (also JIT-free, just touches caches)
    t0 = time.perf_counter()
    for _ in range(repeats):
        out = fn()
    return (time.perf_counter() - t0) / repeats, out


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--splats", type=int, default=800)
    ap.add_argument("--size", type=int, default=128)
    ap.add_argument("--n-blur", type=int, default=5)
    ap.add_argument("--repeats", type=int, default=20)
    opts = ap.parse_args()

    try:
        core = importlib.import_module("splatmo.kernels._core")
    except ImportError:
        core = None

    args, d_image, n_vis = make_inputs(opts.splats, opts.size, opts.n_blur)
    print(f"{n_vis} visible splats, {opts.size}x{opts.size} px, "
          f"n_blur={opts.n_blur}, rolling shutter on, "
          f"{opts.repeats} repeats")

    t_fwd_py, img_py = timeit(lambda: numpy_backend.forward(*args),
                              opts.repeats)
    t_bwd_py, grads_py = timeit(
        lambda: numpy_backend.backward(*args, d_image), opts.repeats)
    print(f"python  forward {1e3 * t_fwd_py:8.2f} ms   "
          f"backward {1e3 * t_bwd_py:8.2f} ms")

    if core is None:
        print("compiled core not built; nothing to compare "
              "(pip install -e . builds it)")
        return

    t_fwd_c, img_c = timeit(lambda: core.forward(*args), opts.repeats)
    t_bwd_c, grads_c = timeit(lambda: core.backward(*args, d_image),
                              opts.repeats)
    print(f"cython  forward {1e3 * t_fwd_c:8.2f} ms   "
          f"backward {1e3 * t_bwd_c:8.2f} ms")
    print(f"speedup forward {t_fwd_py / t_fwd_c:8.1f} x   "
          f"backward {t_bwd_py / t_bwd_c:8.1f} x")

    gap = float(np.max(np.abs(img_py - img_c)))
    gaps = [float(np.max(np.abs(a - b)) / max(1.0, np.max(np.abs(a))))
            for a, b in zip(grads_py, grads_c)]
    print(f"max forward gap {gap:.3g}, max rel gradient gap {max(gaps):.3g}")
    assert gap < 1e-12, "forward mismatch between backends"
    assert max(gaps) < 1e-11, "gradient mismatch between backends"


if __name__ == "__main__":
    main()
