"""On-disk formats: scenes, trajectories, images, datasets, checkpoints.

Structured data is JSON (human-diffable, floats round-trip exactly through
repr); the only binary artifacts are images and the optimizer-moment
sidecar. Every loader raises DatasetError with the offending file name.
"""

import hashlib
import json
import logging
import os
import struct
from dataclasses import asdict

import numpy as np

from .camera import FrameMotion, Intrinsics, RenderConfig
from .geometry import Pose
from .optimizer import TrainConfig, TrainState, _Adam
from .scene import GaussianScene
from .simkit import SimDataset, SimSpec

log = logging.getLogger(__name__)

MOMENTS_MAGIC = b"SPLATMO1"

try:
    from PIL import Image as _PILImage

    _HAVE_PIL = True
except ImportError:  # pragma: no cover - exercised via the ppm path
    _HAVE_PIL = False


class DatasetError(Exception):
    """A file is missing, corrupt, or inconsistent with its manifest."""


# -- images -------------------------------------------------------------

def save_image(path, image):
    """Write a display-space [0, 1] float image as 8-bit PNG or PPM."""
    arr = np.asarray(image, dtype=np.float64)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ValueError("expected an (H, W, 3) image")
    u8 = np.round(np.clip(arr, 0.0, 1.0) * 255.0).astype(np.uint8)
    path = os.fspath(path)
    if path.endswith(".ppm"):
        with open(path, "wb") as f:
            f.write(b"P6\n%d %d\n255\n" % (u8.shape[1], u8.shape[0]))
            f.write(u8.tobytes())
    elif _HAVE_PIL:
        _PILImage.fromarray(u8, mode="RGB").save(path, format="PNG")
    else:
        raise DatasetError(
            f"cannot write {path}: Pillow unavailable, use a .ppm path")


def load_image(path):
    """Read an 8-bit RGB image back to display-space float64 in [0, 1]."""
    path = os.fspath(path)
    if not os.path.exists(path):
        raise DatasetError(f"missing image file {path}")
    try:
        if path.endswith(".ppm"):
            u8 = _load_ppm(path)
        else:
            with _PILImage.open(path) as im:
                u8 = np.asarray(im.convert("RGB"), dtype=np.uint8)
    except DatasetError:
        raise
    except Exception as e:
        raise DatasetError(f"cannot decode image file {path}: {e}") from e
    return u8.astype(np.float64) / 255.0


def _load_ppm(path):
    with open(path, "rb") as f:
        data = f.read()
    # header = magic, width, height, maxval separated by whitespace
    fields, pos = [], 0
    while len(fields) < 4:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise DatasetError(f"truncated PPM header in {path}")
        fields.append(data[start:pos])
    pos += 1  # single whitespace byte after maxval
    if fields[0] != b"P6" or fields[3] != b"255":
        raise DatasetError(f"unsupported PPM format in {path}")
    w, h = int(fields[1]), int(fields[2])
    raw = data[pos : pos + w * h * 3]
    if len(raw) != w * h * 3:
        raise DatasetError(f"truncated pixel data in {path}")
    return np.frombuffer(raw, dtype=np.uint8).reshape(h, w, 3)


# -- scenes and trajectories --------------------------------------------

def scene_to_obj(scene: GaussianScene):
    return [
        {
            "mu": scene.mu[i].tolist(),
            "q": scene.quat[i].tolist(),
            "s": scene.log_scale[i].tolist(),
            "alpha_logit": float(scene.alpha_logit[i]),
            "sh": scene.sh[i].tolist(),
        }
        for i in range(len(scene))
    ]


def scene_from_obj(obj) -> GaussianScene:
    if not isinstance(obj, list):
        raise DatasetError("scene JSON must be an array of splats")
    n = len(obj)
    mu = np.empty((n, 3))
    quat = np.empty((n, 4))
    log_scale = np.empty((n, 3))
    alpha_logit = np.empty(n)
    sh = np.empty((n, 16, 3))
    try:
        for i, d in enumerate(obj):
            mu[i] = d["mu"]
            quat[i] = d["q"]
            log_scale[i] = d["s"]
            alpha_logit[i] = d["alpha_logit"]
            sh[i] = d["sh"]
    except (KeyError, TypeError, ValueError) as e:
        raise DatasetError(f"malformed splat record {i}: {e}") from e
    return GaussianScene(mu, quat, log_scale, alpha_logit, sh)


def save_scene(path, scene: GaussianScene):
    with open(path, "w") as f:
        json.dump(scene_to_obj(scene), f)
        f.write("\n")


def load_scene(path) -> GaussianScene:
    return scene_from_obj(_read_json(path))


def frame_to_obj(fm: FrameMotion):
    return {
        "pose": {"R": fm.pose.R.reshape(-1).tolist(),
                 "p": fm.pose.p.tolist()},
        "v": fm.v.tolist(),
        "w": fm.w.tolist(),
        "T_e": float(fm.T_e),
        "T_ro": float(fm.T_ro),
        "t": float(fm.t),
    }


def frame_from_obj(d) -> FrameMotion:
    pose = Pose(np.asarray(d["pose"]["R"], dtype=np.float64).reshape(3, 3),
                np.asarray(d["pose"]["p"], dtype=np.float64))
    return FrameMotion(pose, np.asarray(d["v"], dtype=np.float64),
                       np.asarray(d["w"], dtype=np.float64),
                       T_e=float(d["T_e"]), T_ro=float(d["T_ro"]),
                       t=float(d["t"]))


def save_trajectory(path, frames):
    with open(path, "w") as f:
        json.dump([frame_to_obj(fm) for fm in frames], f, indent=1)
        f.write("\n")


def load_trajectory(path):
    obj = _read_json(path)
    if not isinstance(obj, list):
        raise DatasetError(f"trajectory JSON in {path} must be an array")
    try:
        return [frame_from_obj(d) for d in obj]
    except (KeyError, TypeError, ValueError) as e:
        raise DatasetError(f"malformed trajectory record in {path}: {e}") from e


def _read_json(path):
    path = os.fspath(path)
    if not os.path.exists(path):
        raise DatasetError(f"missing file {path}")
    with open(path, "r") as f:
        try:
            return json.load(f)
        except json.JSONDecodeError as e:
            raise DatasetError(f"malformed JSON in {path}: {e}") from e


def _sha256_file(path):
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


# -- dataset directories ------------------------------------------------

def save_dataset(ds: SimDataset, path, write_linear=False):
    """Write a dataset directory.

    Layout: scene.json, trajectory_true.json, trajectory_init.json,
    train/####.png, eval/####.png, meta.json. meta.json carries a sha256
    manifest of every other file so loads can detect corruption. With
    write_linear, each image also gets a float32 .npy of the image decoded
    back to linear radiance for quadrature comparisons.
    """
    path = os.fspath(path)
    ext = "png" if _HAVE_PIL else "ppm"
    os.makedirs(os.path.join(path, "train"), exist_ok=True)
    os.makedirs(os.path.join(path, "eval"), exist_ok=True)

    save_scene(os.path.join(path, "scene.json"), ds.scene)
    save_trajectory(os.path.join(path, "trajectory_true.json"),
                    ds.frames_true)
    save_trajectory(os.path.join(path, "trajectory_init.json"),
                    ds.frames_init)

    rel_images = []
    counters = {"train": 0, "eval": 0}
    for i in range(len(ds.frames_true)):
        sub = "eval" if ds.is_eval[i] else "train"
        rel = f"{sub}/{counters[sub]:04d}.{ext}"
        counters[sub] += 1
        save_image(os.path.join(path, rel), ds.images[i])
        rel_images.append(rel)
        if write_linear:
            linear = np.clip(ds.images[i], 0.0, 1.0) ** ds.spec.gamma
            np.save(os.path.join(path, rel[:-4] + ".npy"),
                    linear.astype(np.float32))

    manifest_files = ["scene.json", "trajectory_true.json",
                      "trajectory_init.json"] + rel_images
    if write_linear:
        manifest_files += [r[:-4] + ".npy" for r in rel_images]
    meta = {
        "format": "splatmo-dataset-v1",
        "variant": ds.variant,
        "spec": asdict(ds.spec),
        "intrinsics": asdict(ds.intr),
        "is_eval": [bool(b) for b in ds.is_eval],
        "images": rel_images,
        "source": {k: v for k, v in ds.meta.items()
                   if k.endswith("sha256")},
        "files": {rel: _sha256_file(os.path.join(path, rel))
                  for rel in manifest_files},
    }
    with open(os.path.join(path, "meta.json"), "w") as f:
        json.dump(meta, f, indent=1, sort_keys=True)
        f.write("\n")


def load_dataset(path) -> SimDataset:
    """Read a dataset directory back, verifying the meta.json manifest.

    A missing trajectory_init.json that is also absent from the manifest
    falls back to the true trajectory with a warning (hand-built datasets
    may omit it); any manifest entry that is missing or fails its hash
    check raises DatasetError naming the file.
    """
    path = os.fspath(path)
    meta = _read_json(os.path.join(path, "meta.json"))
    try:
        files = meta["files"]
        is_eval = np.asarray(meta["is_eval"], dtype=bool)
        rel_images = meta["images"]
        spec = SimSpec(**meta["spec"])
        intr = Intrinsics(**meta["intrinsics"])
        variant = meta["variant"]
    except (KeyError, TypeError, ValueError) as e:
        raise DatasetError(f"malformed meta.json in {path}: {e}") from e

    for rel in sorted(files):
        full = os.path.join(path, rel)
        if not os.path.exists(full):
            raise DatasetError(f"missing file {full}")
        if _sha256_file(full) != files[rel]:
            raise DatasetError(f"hash mismatch for {full}")

    scene = load_scene(os.path.join(path, "scene.json"))
    frames_true = load_trajectory(os.path.join(path, "trajectory_true.json"))

    init_path = os.path.join(path, "trajectory_init.json")
    if os.path.exists(init_path):
        frames_init = load_trajectory(init_path)
    else:
        log.warning("trajectory_init.json missing in %s; "
                    "falling back to trajectory_true.json", path)
        frames_init = [fm.copy() for fm in frames_true]

    n = len(frames_true)
    if len(is_eval) != n or len(rel_images) != n or len(frames_init) != n:
        raise DatasetError(
            f"inconsistent frame counts in {path}: {n} trajectory entries, "
            f"{len(frames_init)} init poses, {len(is_eval)} split flags, "
            f"{len(rel_images)} images")
    images = np.stack([load_image(os.path.join(path, rel))
                       for rel in rel_images])
    return SimDataset(scene=scene, intr=intr, frames_true=frames_true,
                      frames_init=frames_init, is_eval=is_eval,
                      images=images, spec=spec, variant=variant, meta=meta)


# -- metrics ------------------------------------------------------------

def write_metrics_csv(path, history, n_eval=None):
    """Write training history as CSV with deterministic formatting.

    Columns: iteration, frame, loss, then psnr_k/ssim_k per eval frame.
    Floats are written with repr so equal runs produce byte-identical
    files; rows without evaluation metrics leave those cells empty.
    """
    if n_eval is None:
        n_eval = 0
        for row in history:
            while f"psnr_{n_eval}" in row:
                n_eval += 1
    cols = ["iteration", "frame", "loss"]
    for k in range(n_eval):
        cols += [f"psnr_{k}", f"ssim_{k}"]
    with open(path, "w", newline="") as f:
        f.write(",".join(cols) + "\n")
        for row in history:
            cells = [str(int(row["iteration"])), str(int(row["frame"])),
                     repr(float(row["loss"]))]
            for k in range(n_eval):
                key = f"psnr_{k}"
                cells.append(repr(float(row[key])) if key in row else "")
                key = f"ssim_{k}"
                cells.append(repr(float(row[key])) if key in row else "")
            f.write(",".join(cells) + "\n")


# -- optimizer checkpoints ----------------------------------------------

def _moment_key_obj(key):
    return list(key) if isinstance(key, tuple) else key


def _moment_key_from_obj(obj):
    return tuple(obj) if isinstance(obj, list) else obj


def save_moments(path, moments):
    """Binary sidecar for Adam accumulators (header SPLATMO1)."""
    with open(path, "wb") as f:
        f.write(MOMENTS_MAGIC)
        f.write(struct.pack("<I", len(moments)))
        for key, adam in moments.items():
            kb = json.dumps(_moment_key_obj(key)).encode()
            f.write(struct.pack("<I", len(kb)))
            f.write(kb)
            f.write(struct.pack("<q", adam.t))
            m = np.ascontiguousarray(adam.m, dtype=np.float64)
            f.write(struct.pack("<B", m.ndim))
            f.write(struct.pack(f"<{m.ndim}q", *m.shape))
            f.write(m.tobytes())
            f.write(np.ascontiguousarray(adam.v, dtype=np.float64).tobytes())


def load_moments(path):
    path = os.fspath(path)
    if not os.path.exists(path):
        raise DatasetError(f"missing file {path}")
    with open(path, "rb") as f:
        data = f.read()
    if data[:8] != MOMENTS_MAGIC:
        raise DatasetError(f"{path} is not a moments sidecar "
                           f"(bad magic {data[:8]!r})")
    try:
        pos = 8
        (count,) = struct.unpack_from("<I", data, pos)
        pos += 4
        moments = {}
        for _ in range(count):
            (klen,) = struct.unpack_from("<I", data, pos)
            pos += 4
            key = _moment_key_from_obj(
                json.loads(data[pos : pos + klen].decode()))
            pos += klen
            (t,) = struct.unpack_from("<q", data, pos)
            pos += 8
            (ndim,) = struct.unpack_from("<B", data, pos)
            pos += 1
            shape = struct.unpack_from(f"<{ndim}q", data, pos)
            pos += 8 * ndim
            size = 8 * int(np.prod(shape, dtype=np.int64))
            adam = _Adam(shape)
            adam.m = np.frombuffer(data[pos : pos + size]).reshape(shape).copy()
            pos += size
            adam.v = np.frombuffer(data[pos : pos + size]).reshape(shape).copy()
            pos += size
            adam.t = t
            moments[key] = adam
        if pos != len(data):
            raise ValueError(f"{len(data) - pos} trailing bytes")
        return moments
    except (struct.error, ValueError, json.JSONDecodeError) as e:
        raise DatasetError(f"corrupt moments sidecar {path}: {e}") from e


def save_checkpoint(path, state: TrainState):
    """Write a checkpoint directory a later train() call resumes from.

    Contents: scene.json, trajectory.json (current refined frames),
    state.json (iteration, latents, anchors, configs, sampling-rng state),
    moments.bin. Resuming reproduces the uninterrupted run bit for bit.
    """
    path = os.fspath(path)
    os.makedirs(path, exist_ok=True)
    save_scene(os.path.join(path, "scene.json"), state.scene)
    save_trajectory(os.path.join(path, "trajectory.json"), state.frames)
    save_moments(os.path.join(path, "moments.bin"), state.moments)
    obj = {
        "format": "splatmo-checkpoint-v1",
        "iteration": int(state.iteration),
        "extent": float(state.extent),
        "is_eval": [bool(b) for b in state.is_eval],
        "delta": state.delta.tolist(),
        "rho": state.rho.tolist(),
        "anchors": [{"R": a.R.reshape(-1).tolist(), "p": a.p.tolist()}
                    for a in state.anchors],
        "cfg": asdict(state.cfg),
        "render_cfg": asdict(state.render_cfg),
        "intrinsics": asdict(state.intr),
        "rng": None if state.rng is None else state.rng.bit_generator.state,
    }
    with open(os.path.join(path, "state.json"), "w") as f:
        json.dump(obj, f, indent=1)
        f.write("\n")


def load_checkpoint(path, references) -> TrainState:
    """Rebuild a TrainState from a checkpoint directory.

    references must be the same image stack the original run trained on
    (reload the dataset); checkpoints do not duplicate it.
    """
    path = os.fspath(path)
    obj = _read_json(os.path.join(path, "state.json"))
    if obj.get("format") != "splatmo-checkpoint-v1":
        raise DatasetError(f"unrecognized checkpoint format in {path}: "
                           f"{obj.get('format')!r}")
    try:
        anchors = [Pose(np.asarray(a["R"], dtype=np.float64).reshape(3, 3),
                        np.asarray(a["p"], dtype=np.float64))
                   for a in obj["anchors"]]
        state = TrainState(
            scene=load_scene(os.path.join(path, "scene.json")),
            frames=load_trajectory(os.path.join(path, "trajectory.json")),
            references=np.asarray(references, dtype=np.float64),
            is_eval=np.asarray(obj["is_eval"], dtype=bool),
            intr=Intrinsics(**obj["intrinsics"]),
            render_cfg=RenderConfig(**obj["render_cfg"]),
            cfg=TrainConfig(**obj["cfg"]),
            anchors=anchors,
            delta=np.asarray(obj["delta"], dtype=np.float64),
            rho=np.asarray(obj["rho"], dtype=np.float64),
            extent=float(obj["extent"]),
            moments=load_moments(os.path.join(path, "moments.bin")),
            iteration=int(obj["iteration"]),
        )
    except (KeyError, TypeError, ValueError) as e:
        raise DatasetError(f"malformed checkpoint state in {path}: {e}") from e
    if obj["rng"] is not None:
        rng = np.random.default_rng()
        rng.bit_generator.state = obj["rng"]
        state.rng = rng
    return state
