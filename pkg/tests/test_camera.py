import math

import numpy as np
import pytest

from splatmo.camera import (
    FrameMotion,
    Intrinsics,
    RenderConfig,
    exposure_offsets,
    pose_at,
    readout_offset,
    sample_offset,
)
from splatmo.geometry import Pose, quat_to_rotmat, so3_exp


def static_frame(**kw):
    return FrameMotion(Pose.identity(), np.zeros(3), np.zeros(3), **kw)


def test_intrinsics_matrix():
    K = Intrinsics(100.0, 120.0, 32.0, 24.0, 64, 48).matrix()
    assert np.array_equal(K[0], [100.0, 0.0, 32.0])
    assert np.array_equal(K[1], [0.0, 120.0, 24.0])
    assert np.array_equal(K[2], [0.0, 0.0, 1.0])


def test_intrinsics_validation():
    with pytest.raises(ValueError):
        Intrinsics(0.0, 1.0, 0.0, 0.0, 8, 8)
    with pytest.raises(ValueError):
        Intrinsics(1.0, 1.0, 0.0, 0.0, 0, 8)


def test_render_config_validation():
    with pytest.raises(ValueError):
        RenderConfig(n_blur=0)
    with pytest.raises(ValueError):
        RenderConfig(gamma=0.0)
    with pytest.raises(ValueError):
        RenderConfig(d_min=0.0)


def test_pose_at_zero_offset_is_identity_map():
    rng = np.random.default_rng(0)
    q = rng.normal(size=4)
    fm = FrameMotion(
        Pose(quat_to_rotmat(q), rng.normal(size=3)),
        rng.normal(size=3),
        rng.normal(size=3),
        T_e=0.1,
    )
    moved = pose_at(fm, 0.0)
    assert np.array_equal(moved.R, fm.pose.R)
    assert np.array_equal(moved.p, fm.pose.p)


def test_pose_at_pure_rotation():
    # quarter turn about camera z after one second
    fm = static_frame()
    fm.w = np.array([0.0, 0.0, np.pi / 2])
    moved = pose_at(fm, 1.0)
    assert np.allclose(moved.R @ [1, 0, 0], [0, 1, 0], atol=1e-12)
    assert np.allclose(moved.p, 0.0, atol=1e-15)


def test_pose_at_pure_translation():
    fm = static_frame()
    fm.v = np.array([1.0, 0.0, 0.0])
    moved = pose_at(fm, 0.5)
    assert np.allclose(moved.p, [0.5, 0.0, 0.0], atol=1e-15)
    assert np.allclose(moved.R, np.eye(3), atol=1e-15)


def test_pose_at_velocity_is_camera_local():
    # with a rotated base pose, the translation follows the camera axes
    rng = np.random.default_rng(1)
    R = quat_to_rotmat(rng.normal(size=4))
    fm = FrameMotion(Pose(R, np.zeros(3)), np.array([1.0, 0, 0]), np.zeros(3))
    moved = pose_at(fm, 0.25)
    assert np.allclose(moved.p, 0.25 * R[:, 0], atol=1e-14)


def test_pose_at_rotation_composes_locally():
    rng = np.random.default_rng(2)
    R = quat_to_rotmat(rng.normal(size=4))
    w = rng.normal(size=3)
    fm = FrameMotion(Pose(R, np.zeros(3)), np.zeros(3), w)
    moved = pose_at(fm, 0.3)
    assert np.allclose(moved.R, R @ so3_exp(0.3 * w), atol=1e-14)


def test_exposure_offsets_single_sample():
    assert np.array_equal(exposure_offsets(1, 0.1), [0.0])
    assert np.array_equal(exposure_offsets(3, 0.0), np.zeros(3))


def test_exposure_offsets_five_samples():
    off = exposure_offsets(5, 0.1)
    assert np.allclose(off, [-0.05, -0.025, 0.0, 0.025, 0.05], atol=1e-15)
    assert off[2] == 0.0


@pytest.mark.parametrize("n", [2, 3, 4, 5, 7, 8])
def test_exposure_offsets_symmetric_zero_sum(n):
    off = exposure_offsets(n, 0.137)
    assert np.array_equal(off, -off[::-1])  # exact mirror construction
    assert math.fsum(off) == 0.0
    assert np.all(np.diff(off) > 0.0)
    assert off[0] == -0.137 / 2
    assert off[-1] == 0.137 / 2


def test_readout_offset_center_row_exact_zero():
    for H in [4, 5, 48, 65]:
        assert readout_offset((H - 1) / 2.0, H, 0.25) == 0.0


def test_readout_offset_top_to_bottom():
    H = 32
    rows = readout_offset(np.arange(H), H, 0.1)
    assert np.all(np.diff(rows) > 0.0)  # top row reads earliest
    # pixel centers keep the extremes within half a row of +-T_ro/2
    bound = 1.001 * 0.1 / (2 * H)
    assert rows[0] == pytest.approx(-0.05, abs=bound)
    assert rows[-1] == pytest.approx(0.05, abs=bound)
    assert rows[0] == (0.5 / H - 0.5) * 0.1


def test_sample_offset_examples():
    H = 32
    cfg = RenderConfig(n_blur=5)
    fm = static_frame(T_e=0.1, T_ro=0.0)
    # middle sample at the center row has zero offset
    assert sample_offset(2, (H - 1) / 2.0, cfg, fm, H) == 0.0
    # first sample is half an exposure early
    assert sample_offset(0, (H - 1) / 2.0, cfg, fm, H) == -0.05

    cfg1 = RenderConfig(n_blur=1)
    fm1 = static_frame(T_e=0.1, T_ro=0.03)
    # single-sample exposure contributes nothing; top row is ~half a
    # readout early (pixel-center convention shifts it by T_ro/(2H))
    assert sample_offset(0, 0, cfg1, fm1, H) == pytest.approx(
        -0.015, abs=1.001 * 0.03 / (2 * H)
    )


def test_sample_offset_mean_over_samples_is_readout():
    H = 16
    cfg = RenderConfig(n_blur=5)
    fm = static_frame(T_e=0.2, T_ro=0.08)
    y = 3
    offs = [sample_offset(k, y, cfg, fm, H) for k in range(cfg.n_blur)]
    assert np.mean(offs) == pytest.approx(readout_offset(y, H, fm.T_ro), abs=1e-16)


def test_sample_offset_index_range():
    cfg = RenderConfig(n_blur=3)
    with pytest.raises(ValueError):
        sample_offset(3, 0, cfg, static_frame(), 8)


def test_frame_motion_validation():
    with pytest.raises(ValueError):
        static_frame(T_e=-0.1)
