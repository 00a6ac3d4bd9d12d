"""Command-line entry points.

Subcommands: simulate, train, render, eval, blur-score, fd-check.
Exit codes: 0 success, 1 validation or usage error, 2 numerical failure.
All randomness in a run derives from one seed through named substreams
(scene = 0, trajectory jitter = 1, pose noise = 2, scene init = 3,
landmarks = 4); SPLATMO_THREADS caps the worker count.
"""

import argparse
import hashlib
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .camera import Intrinsics, RenderConfig
from .gradients import fd_check
from .io import (
    DatasetError,
    load_checkpoint,
    load_dataset,
    save_checkpoint,
    save_dataset,
    save_image,
    write_metrics_csv,
    _read_json,
)
from .optimizer import (
    TrainConfig,
    TrainState,
    eval_optimize,
    frame_metrics,
    train,
)
from .rasterizer import render_frame
from .simkit import (
    SCENE_RECIPES,
    TRAJECTORY_RECIPES,
    VARIANTS,
    SimSpec,
    blur_score,
    default_landmarks,
    fd_frame,
    fd_scene,
    perturb_scene,
    simulate_sequence,
)

log = logging.getLogger(__name__)

FD_EXACT_BLOCKS = ("mu", "quat", "log_scale", "alpha_logit", "sh", "v", "w")
FD_POSE_BLOCKS = ("p", "rho")


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with code 2 on bad flags; the contract here is 1
    def error(self, message):
        raise _UsageError(f"{message}\n{self.format_usage()}")


@dataclass
class RunConfig:
    """One training run: data, output, model and optimizer settings.

    gamma = 0 inherits the dataset's encoding. train/render hold field
    overrides for TrainConfig and RenderConfig. The five ablation flags
    disable individual method components without touching the data.
    """

    dataset: str = ""
    out: str = ""
    n_iters: int = 2000
    eval_every: int = 500
    eval_iters: int = 500
    seed: int = 0
    n_blur: int = 5
    gamma: float = 0.0
    motion_blur: bool = True
    rolling_shutter: bool = True
    pose_opt: bool = True
    velocity_opt: bool = True
    vio_init: bool = True
    train: dict = field(default_factory=dict)
    render: dict = field(default_factory=dict)


def load_run_config(path) -> dict:
    obj = _read_json(path)
    if not isinstance(obj, dict):
        raise DatasetError(f"run config {path} must be a JSON object")
    known = {f.name for f in fields(RunConfig)}
    unknown = sorted(set(obj) - known)
    if unknown:
        raise DatasetError(f"unknown run-config keys in {path}: {unknown}")
    return obj


def thread_count() -> int:
    raw = os.environ.get("SPLATMO_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise ValueError(f"SPLATMO_THREADS must be an integer, got {raw!r}")
    if n < 1:
        raise ValueError(f"SPLATMO_THREADS must be >= 1, got {n}")
    return n


def build_train_state(ds, rc: RunConfig) -> TrainState:
    """Assemble the optimizer state for a dataset under a run config.

    The starting scene is a perturbed copy of the dataset's (substream 3
    of the run seed), never the ground truth itself. Ablations: motion
    blur off forces T_e = 0 and a single exposure sample, rolling shutter
    off forces T_ro = 0, vio off zeroes the initial velocities.
    """
    gamma = rc.gamma if rc.gamma > 0.0 else ds.spec.gamma
    try:
        render_cfg = RenderConfig(
            n_blur=rc.n_blur if rc.motion_blur else 1, gamma=gamma,
            **rc.render)
        cfg = TrainConfig(n_iters=rc.n_iters, eval_every=rc.eval_every,
                          seed=rc.seed, optimize_pose=rc.pose_opt,
                          optimize_velocity=rc.velocity_opt, **rc.train)
    except TypeError as e:
        raise DatasetError(f"bad run-config override: {e}") from e
    frames = [fm.copy() for fm in ds.frames_init]
    for fm in frames:
        if not rc.motion_blur:
            fm.T_e = 0.0
        if not rc.rolling_shutter:
            fm.T_ro = 0.0
        if not rc.vio_init:
            fm.v[:] = 0.0
            fm.w[:] = 0.0
    scene0 = perturb_scene(
        ds.scene, np.random.SeedSequence(entropy=rc.seed, spawn_key=(3,)))
    return TrainState(scene=scene0, frames=frames, references=ds.images,
                      is_eval=ds.is_eval.copy(), intr=ds.intr,
                      render_cfg=render_cfg, cfg=cfg)


def _scene_hash(scene) -> str:
    return hashlib.sha256(scene.canonical_bytes()).hexdigest()


# -- subcommands ---------------------------------------------------------

def cmd_simulate(args, threads):
    spec = SimSpec(scene_recipe=args.recipe, n_splats=args.splats,
                   trajectory=args.trajectory, speed=args.speed,
                   T_e=args.te, T_ro=args.tro, n_frames=args.frames,
                   frame_dt=args.frame_dt, width=args.size,
                   height=args.size, focal=args.focal,
                   n_pose_samples=args.pose_samples, n_eval=args.eval,
                   seed=args.seed)
    ds = simulate_sequence(spec, args.variant)
    save_dataset(ds, args.out, write_linear=args.write_linear)
    ev = ", ".join(str(i) for i in ds.eval_indices)
    print(f"wrote {spec.n_frames} frames ({spec.width}x{spec.height}, "
          f"variant {args.variant}) to {args.out}; eval frames: {ev}")
    return 0


def _merged_run_config(args) -> RunConfig:
    rc = RunConfig(**(load_run_config(args.config) if args.config else {}))
    if args.dataset:
        rc.dataset = args.dataset
    if args.out:
        rc.out = args.out
    for name in ("n_iters", "eval_every", "seed", "n_blur", "gamma"):
        val = getattr(args, name)
        if val is not None:
            setattr(rc, name, val)
    for name in ("motion_blur", "rolling_shutter", "pose_opt",
                 "velocity_opt", "vio_init"):
        if getattr(args, f"no_{name}"):
            setattr(rc, name, False)
    if not rc.dataset or not rc.out:
        raise DatasetError("train needs a dataset (-i) and an output "
                           "directory (-o), from flags or the config file")
    return rc


def cmd_train(args, threads):
    rc = _merged_run_config(args)
    ds = load_dataset(rc.dataset)
    state = build_train_state(ds, rc)
    log.info("training %d iterations on %d frames with %d threads",
             rc.n_iters, len(state.train_indices), threads)

    os.makedirs(rc.out, exist_ok=True)
    with open(os.path.join(rc.out, "runconfig.json"), "w") as f:
        json.dump({**asdict(rc), "threads": threads}, f, indent=1)
        f.write("\n")

    state, history = train(state)
    write_metrics_csv(os.path.join(rc.out, "metrics.csv"), history,
                      n_eval=len(state.eval_indices))
    save_checkpoint(os.path.join(rc.out, "checkpoint"), state)

    renders = os.path.join(rc.out, "renders")
    os.makedirs(renders, exist_ok=True)
    lines = []
    for j in state.eval_indices:
        img = render_frame(state.scene, state.frames[j], state.intr,
                           state.render_cfg)
        save_image(os.path.join(renders, f"eval_{j:04d}.png"), img.data)
        m = frame_metrics(state, j)
        lines.append((j, m.psnr, m.ssim))
    for j, p, s in lines:
        print(f"eval frame {j}: psnr {p:.3f} dB, ssim {s:.5f}")
    if lines:
        print(f"mean psnr {np.mean([p for _, p, _ in lines]):.3f} dB")
    return 0


def cmd_render(args, threads):
    ds = load_dataset(args.dataset)
    frames = ds.frames_init if args.init else ds.frames_true
    if not 0 <= args.frame < len(frames):
        raise ValueError(f"frame {args.frame} out of range "
                         f"(dataset has {len(frames)})")
    cfg = RenderConfig(n_blur=args.n_blur, gamma=ds.spec.gamma)
    img = render_frame(ds.scene, frames[args.frame], ds.intr, cfg)
    save_image(args.out, img.data)
    if args.linear:
        lin = render_frame(ds.scene, frames[args.frame], ds.intr, cfg,
                           output="linear")
        np.save(args.linear, lin.data.astype(np.float32))
    print(f"rendered frame {args.frame} to {args.out}")
    return 0


def cmd_eval(args, threads):
    ds = load_dataset(args.dataset)
    state = load_checkpoint(args.checkpoint, ds.images)
    before = _scene_hash(state.scene)
    if args.fixed_gaussians:
        eval_optimize(state, n_iters=args.iters)
        after = _scene_hash(state.scene)
        if after != before:
            raise RuntimeError(
                "scene hash changed during fixed-gaussian evaluation: "
                f"{before} -> {after}")
    rows = [(int(j), frame_metrics(state, j)) for j in state.eval_indices]
    if args.out:
        with open(args.out, "w", newline="") as f:
            f.write("frame,psnr,ssim\n")
            for j, m in rows:
                f.write(f"{j},{m.psnr!r},{m.ssim!r}\n")
    for j, m in rows:
        print(f"eval frame {j}: psnr {m.psnr:.3f} dB, ssim {m.ssim:.5f}")
    if rows:
        print(f"mean psnr {np.mean([m.psnr for _, m in rows]):.3f} dB")
    return 0


def cmd_blur_score(args, threads):
    ds = load_dataset(args.dataset)
    lm = default_landmarks(ds.scene, ds.spec.seed)
    print("frame,score,split")
    for i, fm in enumerate(ds.frames_true):
        split = "eval" if ds.is_eval[i] else "train"
        print(f"{i},{blur_score(fm, lm, ds.intr)!r},{split}")
    return 0


def cmd_fd_check(args, threads):
    scene = fd_scene(args.splats, args.seed)
    fm = fd_frame(args.te, args.tro, args.seed)
    f = 1.25 * args.size
    intr = Intrinsics(f, f, (args.size - 1) / 2.0, (args.size - 1) / 2.0,
                      args.size, args.size)
    cfg = RenderConfig(n_blur=args.n_blur)
    errs = fd_check(scene, fm, intr, cfg, seed=args.seed)
    failed = []
    for name in FD_EXACT_BLOCKS + FD_POSE_BLOCKS:
        tol = args.tol_exact if name in FD_EXACT_BLOCKS else args.tol_pose
        ok = errs[name] < tol
        print(f"{name:12s} rel err {errs[name]:.3e}  "
              f"(tol {tol:.0e}) {'ok' if ok else 'FAIL'}")
        if not ok:
            failed.append(name)
    if failed:
        print(f"gradient check failed for: {', '.join(failed)}",
              file=sys.stderr)
        return 2
    return 0


# -- parser --------------------------------------------------------------

def build_parser() -> _Parser:
    parser = _Parser(prog="splatmo", description=__doc__)
    sub = parser.add_subparsers(dest="cmd", parser_class=_Parser)

    p = sub.add_parser("simulate", help="generate a synthetic dataset")
    p.add_argument("-o", "--out", required=True)
    p.add_argument("--recipe", choices=SCENE_RECIPES, default="random-cloud")
    p.add_argument("--variant", choices=VARIANTS, default="mb")
    p.add_argument("--trajectory", choices=TRAJECTORY_RECIPES, default="arc")
    p.add_argument("--splats", type=int, default=500)
    p.add_argument("--frames", type=int, default=24)
    p.add_argument("--eval", type=int, default=0,
                   help="evenly spaced eval frames; 0 = blur-score split")
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--focal", type=float, default=70.0)
    p.add_argument("--te", type=float, default=0.0, help="exposure time")
    p.add_argument("--tro", type=float, default=0.0, help="readout time")
    p.add_argument("--speed", type=float, default=1.0)
    p.add_argument("--frame-dt", type=float, default=0.1)
    p.add_argument("--pose-samples", type=int, default=32)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--write-linear", action="store_true")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("train", help="optimize a scene against a dataset")
    p.add_argument("-i", "--dataset", default="")
    p.add_argument("-o", "--out", default="")
    p.add_argument("-c", "--config", default="",
                   help="run-config JSON; flags override it")
    p.add_argument("--n-iters", type=int, default=None)
    p.add_argument("--eval-every", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--n-blur", type=int, default=None)
    p.add_argument("--gamma", type=float, default=None)
    for name in ("motion-blur", "rolling-shutter", "pose-opt",
                 "velocity-opt", "vio-init"):
        p.add_argument(f"--no-{name}", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("render", help="render one dataset frame")
    p.add_argument("-i", "--dataset", required=True)
    p.add_argument("-o", "--out", required=True)
    p.add_argument("--frame", type=int, default=0)
    p.add_argument("--init", action="store_true",
                   help="use the initial trajectory instead of the truth")
    p.add_argument("--n-blur", type=int, default=5)
    p.add_argument("--linear", default="",
                   help="also dump the linear image to this .npy path")
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("eval", help="score eval frames from a checkpoint")
    p.add_argument("-i", "--dataset", required=True)
    p.add_argument("-c", "--checkpoint", required=True)
    p.add_argument("-o", "--out", default="", help="metrics CSV path")
    p.add_argument("--fixed-gaussians", action="store_true",
                   help="refine eval poses with the scene frozen first")
    p.add_argument("--iters", type=int, default=500)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("blur-score", help="print per-frame motion scores")
    p.add_argument("-i", "--dataset", required=True)
    p.set_defaults(func=cmd_blur_score)

    p = sub.add_parser("fd-check", help="finite-difference gradient audit")
    p.add_argument("--splats", type=int, default=50)
    p.add_argument("--size", type=int, default=32)
    p.add_argument("--n-blur", type=int, default=3)
    p.add_argument("--te", type=float, default=0.1)
    p.add_argument("--tro", type=float, default=0.08)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tol-exact", type=float, default=1e-4)
    p.add_argument("--tol-pose", type=float, default=5e-2)
    p.set_defaults(func=cmd_fd_check)
    return parser


def run_command(argv) -> int:
    """Parse argv (without the program name) and run one subcommand."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except SystemExit as e:  # --help
        return 0 if not e.code else 1
    if getattr(args, "func", None) is None:
        print(parser.format_usage(), file=sys.stderr)
        return 1
    try:
        threads = thread_count()
        return args.func(args, threads)
    except (DatasetError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except (RuntimeError, ArithmeticError, np.linalg.LinAlgError) as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return 2


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    return run_command(sys.argv[1:] if argv is None else argv)


if __name__ == "__main__":
    sys.exit(main())
