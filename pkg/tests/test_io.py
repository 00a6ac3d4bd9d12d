import json
import os

import numpy as np
import pytest

from splatmo.camera import FrameMotion, Intrinsics, RenderConfig
from splatmo.geometry import Pose, so3_exp
from splatmo.io import (
    DatasetError,
    load_checkpoint,
    load_dataset,
    load_image,
    load_moments,
    load_scene,
    load_trajectory,
    save_checkpoint,
    save_dataset,
    save_image,
    save_moments,
    save_scene,
    save_trajectory,
    write_metrics_csv,
)
from splatmo.optimizer import TrainConfig, TrainState, _Adam, train
from splatmo.rasterizer import render_frame
from splatmo.scene import GaussianScene
from splatmo.simkit import SimSpec, fd_scene, simulate_sequence

INTR = Intrinsics(30.0, 30.0, 11.5, 11.5, 24, 24)


def small_dataset(variant="mb", n_eval=1):
    spec = SimSpec(scene_recipe="random-cloud", n_splats=200,
                   trajectory="line", speed=2.0, T_e=0.1, n_frames=5,
                   width=24, height=24, focal=30.0, n_pose_samples=4,
                   n_eval=n_eval, seed=5)
    return simulate_sequence(spec, variant)


def orbit_frames(k, t_e=0.0, speed=0.0):
    frames = []
    for i in range(k):
        ang = 0.06 * (i - (k - 1) / 2)
        pose = Pose(so3_exp(np.array([0.0, ang, 0.0])),
                    np.array([2.0 * np.sin(ang), 0.0, 0.0]))
        frames.append(FrameMotion(pose, np.array([speed, 0.0, 0.0]),
                                  np.array([0.0, 0.01, 0.0]), T_e=t_e,
                                  t=0.1 * i))
    return frames


def assert_scene_equal(a: GaussianScene, b: GaussianScene):
    assert np.array_equal(a.mu, b.mu)
    assert np.array_equal(a.quat, b.quat)
    assert np.array_equal(a.log_scale, b.log_scale)
    assert np.array_equal(a.alpha_logit, b.alpha_logit)
    assert np.array_equal(a.sh, b.sh)


def assert_frames_equal(fa, fb):
    assert len(fa) == len(fb)
    for x, y in zip(fa, fb):
        assert np.array_equal(x.pose.R, y.pose.R)
        assert np.array_equal(x.pose.p, y.pose.p)
        assert np.array_equal(x.v, y.v)
        assert np.array_equal(x.w, y.w)
        assert (x.T_e, x.T_ro, x.t) == (y.T_e, y.T_ro, y.t)


def test_scene_json_roundtrip_is_bitwise(tmp_path):
    scene = fd_scene(n=30, seed=1)
    path = tmp_path / "scene.json"
    save_scene(path, scene)
    assert_scene_equal(scene, load_scene(path))


def test_scene_json_schema(tmp_path):
    scene = fd_scene(n=3, seed=2)
    path = tmp_path / "scene.json"
    save_scene(path, scene)
    with open(path) as f:
        obj = json.load(f)
    assert isinstance(obj, list) and len(obj) == 3
    rec = obj[0]
    assert set(rec) == {"mu", "q", "s", "alpha_logit", "sh"}
    assert len(rec["mu"]) == 3 and len(rec["q"]) == 4 and len(rec["s"]) == 3
    assert isinstance(rec["alpha_logit"], float)
    assert len(rec["sh"]) == 16 and all(len(c) == 3 for c in rec["sh"])


def test_trajectory_json_roundtrip_and_schema(tmp_path):
    frames = orbit_frames(4, t_e=0.12, speed=1.5)
    frames[2].T_ro = 0.3
    path = tmp_path / "traj.json"
    save_trajectory(path, frames)
    assert_frames_equal(frames, load_trajectory(path))
    with open(path) as f:
        obj = json.load(f)
    rec = obj[2]
    assert set(rec) == {"pose", "v", "w", "T_e", "T_ro", "t"}
    assert set(rec["pose"]) == {"R", "p"}
    assert len(rec["pose"]["R"]) == 9
    # row-major flattening
    assert rec["pose"]["R"][1] == frames[2].pose.R[0, 1]
    assert rec["T_ro"] == 0.3


def test_malformed_json_errors_name_the_file(tmp_path):
    path = tmp_path / "scene.json"
    path.write_text("[{not json")
    with pytest.raises(DatasetError, match="scene.json"):
        load_scene(path)
    missing = tmp_path / "gone.json"
    with pytest.raises(DatasetError, match="gone.json"):
        load_trajectory(missing)


@pytest.mark.parametrize("ext", ["png", "ppm"])
def test_image_roundtrip_quantizes_once(tmp_path, ext):
    rng = np.random.default_rng(3)
    img = rng.uniform(0.0, 1.0, (12, 16, 3))
    path = tmp_path / f"img.{ext}"
    save_image(path, img)
    back = load_image(path)
    assert np.array_equal(back, np.round(img * 255.0) / 255.0)
    # second trip is exact: already on the 8-bit lattice
    save_image(path, back)
    assert np.array_equal(load_image(path), back)


def test_image_shape_validation(tmp_path):
    with pytest.raises(ValueError):
        save_image(tmp_path / "x.png", np.zeros((8, 8)))


def test_truncated_image_error_names_file(tmp_path):
    path = tmp_path / "img.png"
    save_image(path, np.zeros((16, 16, 3)))
    raw = path.read_bytes()
    path.write_bytes(raw[: len(raw) // 2])
    with pytest.raises(DatasetError, match="img.png"):
        load_image(path)
    ppm = tmp_path / "img.ppm"
    save_image(ppm, np.zeros((16, 16, 3)))
    ppm.write_bytes(ppm.read_bytes()[:-7])
    with pytest.raises(DatasetError, match="img.ppm"):
        load_image(ppm)


def test_dataset_roundtrip(tmp_path):
    ds = small_dataset()
    root = tmp_path / "data"
    save_dataset(ds, root)
    back = load_dataset(root)
    assert_scene_equal(ds.scene, back.scene)
    assert_frames_equal(ds.frames_true, back.frames_true)
    assert_frames_equal(ds.frames_init, back.frames_init)
    assert np.array_equal(ds.is_eval, back.is_eval)
    assert back.spec == ds.spec
    assert back.variant == ds.variant
    assert back.intr == ds.intr
    # images survive modulo one 8-bit quantization
    assert np.array_equal(back.images, np.round(ds.images * 255.0) / 255.0)
    assert back.images.shape == ds.images.shape


def test_dataset_writes_expected_layout(tmp_path):
    ds = small_dataset(n_eval=2)
    root = tmp_path / "data"
    save_dataset(ds, root, write_linear=True)
    names = {"scene.json", "trajectory_true.json", "trajectory_init.json",
             "meta.json", "train", "eval"}
    assert set(os.listdir(root)) == names
    assert sorted(os.listdir(root / "train"))[:2] == ["0000.npy", "0000.png"]
    assert len(os.listdir(root / "eval")) == 4  # 2 png + 2 npy
    lin = np.load(root / "train" / "0000.npy")
    assert lin.dtype == np.float32
    first_train = int(np.flatnonzero(~ds.is_eval)[0])
    expect = np.clip(ds.images[first_train], 0, 1) ** ds.spec.gamma
    assert np.allclose(lin, expect, atol=1e-7)


def test_dataset_hash_mismatch_names_file(tmp_path):
    ds = small_dataset()
    root = tmp_path / "data"
    save_dataset(ds, root)
    with open(root / "scene.json", "a") as f:
        f.write(" ")
    with pytest.raises(DatasetError, match="hash mismatch.*scene.json"):
        load_dataset(root)


def test_dataset_missing_file_names_file(tmp_path):
    ds = small_dataset()
    root = tmp_path / "data"
    save_dataset(ds, root)
    os.remove(root / "train" / "0001.png")
    with pytest.raises(DatasetError, match="missing file.*0001.png"):
        load_dataset(root)


def test_dataset_truncated_image_names_file(tmp_path):
    ds = small_dataset()
    root = tmp_path / "data"
    save_dataset(ds, root)
    img = root / "train" / "0000.png"
    img.write_bytes(img.read_bytes()[:40])
    # keep the manifest consistent so decoding is what fails
    meta = json.loads((root / "meta.json").read_text())
    import hashlib

    meta["files"]["train/0000.png"] = hashlib.sha256(
        img.read_bytes()).hexdigest()
    (root / "meta.json").write_text(json.dumps(meta))
    with pytest.raises(DatasetError, match="decode.*0000.png"):
        load_dataset(root)


def test_dataset_init_fallback_warns(tmp_path, caplog):
    ds = small_dataset()
    root = tmp_path / "data"
    save_dataset(ds, root)
    os.remove(root / "trajectory_init.json")
    meta = json.loads((root / "meta.json").read_text())
    del meta["files"]["trajectory_init.json"]
    (root / "meta.json").write_text(json.dumps(meta))
    with caplog.at_level("WARNING", logger="splatmo.io"):
        back = load_dataset(root)
    assert any("trajectory_init.json" in r.message for r in caplog.records)
    assert_frames_equal(back.frames_init, back.frames_true)


def test_metrics_csv_bytes_deterministic(tmp_path):
    history = [
        {"iteration": 0, "frame": 2, "loss": np.float64(0.125)},
        {"iteration": 1, "frame": 0, "loss": 0.1 + 0.2,
         "psnr_0": 21.123456789012345, "ssim_0": 0.875,
         "psnr_1": np.float64(30.5), "ssim_1": 1.0},
    ]
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    write_metrics_csv(a, history)
    write_metrics_csv(b, history)
    assert a.read_bytes() == b.read_bytes()
    lines = a.read_text().splitlines()
    assert lines[0] == "iteration,frame,loss,psnr_0,ssim_0,psnr_1,ssim_1"
    assert lines[1] == "0,2,0.125,,,,"
    cells = lines[2].split(",")
    # repr round-trips floats exactly
    assert float(cells[2]) == 0.1 + 0.2
    assert float(cells[3]) == 21.123456789012345
    assert cells[6] == "1.0"


def test_metrics_csv_explicit_eval_count(tmp_path):
    path = tmp_path / "m.csv"
    write_metrics_csv(path, [{"iteration": 0, "frame": 1, "loss": 0.5}],
                      n_eval=2)
    lines = path.read_text().splitlines()
    assert lines[0].count("psnr") == 2
    assert lines[1] == "0,1,0.5,,,,"


def test_moments_sidecar_roundtrip(tmp_path):
    rng = np.random.default_rng(7)
    moments = {}
    a = _Adam((4, 3))
    a.m = rng.normal(size=(4, 3))
    a.v = rng.uniform(0, 1, (4, 3))
    a.t = 17
    moments["mu"] = a
    b = _Adam((3,))
    b.m = rng.normal(size=3)
    b.v = rng.uniform(0, 1, 3)
    b.t = 2
    moments[("delta", 3)] = b
    path = tmp_path / "moments.bin"
    save_moments(path, moments)
    back = load_moments(path)
    assert set(back) == {"mu", ("delta", 3)}
    for key in moments:
        assert np.array_equal(back[key].m, moments[key].m)
        assert np.array_equal(back[key].v, moments[key].v)
        assert back[key].t == moments[key].t


def test_moments_sidecar_rejects_corruption(tmp_path):
    path = tmp_path / "moments.bin"
    save_moments(path, {"mu": _Adam((2, 3))})
    raw = path.read_bytes()
    path.write_bytes(b"NOTMAGIC" + raw[8:])
    with pytest.raises(DatasetError, match="magic"):
        load_moments(path)
    path.write_bytes(raw[:-8])
    with pytest.raises(DatasetError, match="corrupt"):
        load_moments(path)
    path.write_bytes(raw + b"\x00" * 8)
    with pytest.raises(DatasetError, match="corrupt"):
        load_moments(path)


def checkpoint_setup():
    rng = np.random.default_rng(11)
    truth = fd_scene(n=25, seed=11)
    start = GaussianScene(truth.mu + rng.normal(size=truth.mu.shape) * 0.03,
                          truth.quat, truth.log_scale,
                          truth.alpha_logit, truth.sh)
    frames = orbit_frames(4, t_e=0.06, speed=0.8)
    rc = RenderConfig(n_blur=2)
    refs = np.stack([render_frame(truth, fm, INTR, rc).data
                     for fm in frames])
    cfg = TrainConfig(seed=4, eval_every=2)
    is_eval = np.array([False, False, True, False])
    return start, frames, refs, is_eval, rc, cfg


def test_checkpoint_resume_is_bitwise_identical(tmp_path):
    start, frames, refs, is_eval, rc, cfg = checkpoint_setup()

    state_a = TrainState(scene=start.copy(),
                         frames=[fm.copy() for fm in frames],
                         references=refs, is_eval=is_eval, intr=INTR,
                         render_cfg=rc, cfg=cfg)
    _, hist_a = train(state_a, n_iters=6)

    state_b = TrainState(scene=start.copy(),
                         frames=[fm.copy() for fm in frames],
                         references=refs, is_eval=is_eval, intr=INTR,
                         render_cfg=rc, cfg=cfg)
    _, hist_b1 = train(state_b, n_iters=3)
    ckpt = tmp_path / "ckpt"
    save_checkpoint(ckpt, state_b)

    resumed = load_checkpoint(ckpt, refs)
    assert resumed.iteration == 3
    _, hist_b2 = train(resumed, n_iters=3)

    losses_a = [(r["iteration"], r["frame"], r["loss"]) for r in hist_a]
    losses_b = [(r["iteration"], r["frame"], r["loss"])
                for r in hist_b1 + hist_b2]
    assert losses_a == losses_b
    assert state_a.scene.canonical_bytes() == resumed.scene.canonical_bytes()
    for fa, fb in zip(state_a.frames, resumed.frames):
        assert np.array_equal(fa.pose.p, fb.pose.p)
        assert np.array_equal(fa.pose.R, fb.pose.R)
        assert np.array_equal(fa.v, fb.v)
    assert np.array_equal(state_a.delta, resumed.delta)
    assert np.array_equal(state_a.rho, resumed.rho)


def test_checkpoint_preserves_moments_and_config(tmp_path):
    start, frames, refs, is_eval, rc, cfg = checkpoint_setup()
    state = TrainState(scene=start, frames=frames, references=refs,
                       is_eval=is_eval, intr=INTR, render_cfg=rc, cfg=cfg)
    train(state, n_iters=2)
    ckpt = tmp_path / "ckpt"
    save_checkpoint(ckpt, state)
    back = load_checkpoint(ckpt, refs)
    assert back.cfg == cfg
    assert back.render_cfg == rc
    assert back.intr == INTR
    assert back.extent == state.extent
    assert set(back.moments) == set(state.moments)
    for key, adam in state.moments.items():
        assert np.array_equal(back.moments[key].m, adam.m)
        assert np.array_equal(back.moments[key].v, adam.v)
        assert back.moments[key].t == adam.t
    for pa, pb in zip(state.anchors, back.anchors):
        assert np.array_equal(pa.R, pb.R)
        assert np.array_equal(pa.p, pb.p)


def test_checkpoint_rejects_unknown_format(tmp_path):
    ckpt = tmp_path / "ckpt"
    ckpt.mkdir()
    (ckpt / "state.json").write_text('{"format": "other"}')
    with pytest.raises(DatasetError, match="format"):
        load_checkpoint(ckpt, np.zeros((1, 4, 4, 3)))
