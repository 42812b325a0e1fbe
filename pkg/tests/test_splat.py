import numpy as np
import pytest
from hypothesis import given, strategies as st

from camid import _accel
from camid.camera import CameraPose, TrajectoryConfig, intrinsics_for, pose_from_center, rotation_angle, \
    sample_trajectory, spherical_offset
from camid.scenegen import IdentityDescriptor, STUDIO, make_scene, make_subject
from camid.splat.pose import estimate_pose, perturb, photometric_loss, render_gradients, se3_exp
from camid.splat.render import (read_frames, read_masks, render_frame, render_frame_with_masks, render_video,
                                render_with_jacobian, write_frames, write_masks)
from camid.splat.scene import Gaussian4D, LightingParams, Scene

W = H = 64


def _origin_pose(z=4.0):
    fx, fy, cx, cy = intrinsics_for(W, H, 45.0)
    return CameraPose(np.eye(3), np.array([0.0, 0.0, z]), fx, fy, cx, cy, W, H)


def _blob(center, scale, color, opacity, sid=0):
    return Gaussian4D(np.asarray(center, float), np.full(3, scale), np.array([1.0, 0, 0, 0]), np.asarray(color, float),
                      opacity, sid)


@pytest.fixture(scope="module")
def subject_scene():
    gs = make_subject(IdentityDescriptor(5), 2, 1, subject_id=1)
    return make_scene([gs], 9, setting=STUDIO, frames=1)


def test_empty_scene_is_background():
    scene = Scene([], background_color=(0.2, 0.4, 0.6))
    img = render_frame(scene, _origin_pose())
    assert np.array_equal(img, np.broadcast_to([0.2, 0.4, 0.6], img.shape))


def test_zero_opacity_is_background():
    rng = np.random.default_rng(1)
    gs = [_blob(rng.normal(size=3) * 0.5, 0.2, rng.uniform(size=3), 0.0) for _ in range(20)]
    bg = (0.1, 0.3, 0.5)
    a = render_frame(Scene(gs, background_color=bg), _origin_pose())
    b = render_frame(Scene([], background_color=bg), _origin_pose())
    assert np.array_equal(a, b)


def test_single_gaussian_center_color():
    # isotropic world sigma s at depth z -> screen sigma f*s/z, plus the 0.3 px^2 dilation
    z, s, o, col, bg = 4.0, 0.3, 0.8, np.array([0.9, 0.5, 0.2]), np.array([0.1, 0.1, 0.1])
    pose = _origin_pose(z)
    img = render_frame(Scene([_blob([0, 0, 0], s, col, o)], background_color=tuple(bg)), pose)
    var = (pose.fx * s / z) ** 2 + 0.3
    d2 = 2 * 0.5 ** 2 / var  # pixel (31, 31) center sits half a pixel off in x and y
    edge = np.exp(-4.5)
    alpha = o * (np.exp(-0.5 * d2) - edge) / (1 - edge)
    want = alpha * col + (1 - alpha) * bg
    np.testing.assert_allclose(img[31, 31], want, atol=0.02)
    # far corner stays background
    np.testing.assert_allclose(img[0, 0], bg, atol=1e-12)


def test_occlusion_order():
    pose = _origin_pose()
    near = _blob([0, 0, -1.0], 0.4, [1, 0, 0], 0.99)
    far = _blob([0, 0, 1.0], 0.4, [0, 0, 1], 0.99)
    for gs in ([near, far], [far, near]):
        c = render_frame(Scene(gs), pose)[32, 32]
        assert c[0] > 0.9 and c[2] < 0.1


def test_behind_camera_is_culled():
    img = render_frame(Scene([_blob([0, 0, -5.0], 0.3, [1, 1, 1], 1.0)]), _origin_pose())
    assert not img.any()


def test_composite_masks_partition_unity(subject_scene):
    pose = pose_from_center(spherical_offset(4.0, 20, 10) + np.array([0, -1, 0]), np.array([0, -1.0, 0]),
                            *intrinsics_for(W, H, 45.0), W, H)
    img, masks, labels = render_frame_with_masks(subject_scene, pose)
    assert labels == [0, 1]
    np.testing.assert_allclose(masks.sum(0), 1.0, atol=1e-9)
    assert masks[1].max() > 0.9


def test_numba_matches_numpy(subject_scene, monkeypatch):
    pose = sample_trajectory(4, TrajectoryConfig(frames=1, look_at=(0, -1, 0), r_max=5.0))[0]
    a, ja = render_with_jacobian(subject_scene, pose)
    monkeypatch.setattr(_accel, "NUMBA_ENABLED", False)
    b, jb = render_with_jacobian(subject_scene, pose)
    np.testing.assert_allclose(a, b, atol=1e-12)
    np.testing.assert_allclose(ja, jb, atol=1e-10)


def _fd_grad(scene, pose, target, h=1e-5):
    g = np.zeros(6)
    for k in range(6):
        e = np.zeros(6)
        e[k] = h
        g[k] = (photometric_loss(scene, perturb(pose, e), 0, target)
                - photometric_loss(scene, perturb(pose, -e), 0, target)) / (2 * h)
    return g


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_render_gradients_match_finite_differences(subject_scene, seed):
    rng = np.random.default_rng(seed)
    pose = sample_trajectory(seed, TrajectoryConfig(frames=1, look_at=(0, -1, 0), r_max=5.0))[0]
    gt = perturb(pose, np.concatenate([rng.normal(0, 0.03, 3), rng.normal(0, 0.02, 3)]))
    target = render_frame(subject_scene, gt)
    g = render_gradients(subject_scene, pose, 0, target)
    fd = _fd_grad(subject_scene, pose, target)
    assert np.linalg.norm(g - fd) / np.linalg.norm(fd) <= 0.02


@given(st.lists(st.floats(-0.5, 0.5), min_size=6, max_size=6))
def test_se3_exp_is_rigid(xi):
    R, t = se3_exp(np.array(xi))
    np.testing.assert_allclose(R @ R.T, np.eye(3), atol=1e-10)
    assert abs(np.linalg.det(R) - 1) < 1e-10


def test_estimate_pose_recovers_small_perturbation(subject_scene):
    pose = pose_from_center(spherical_offset(4.0, 30, 15) + np.array([0, -1, 0]), np.array([0, -1.0, 0]),
                            *intrinsics_for(W, H, 45.0), W, H)
    target = render_frame(subject_scene, pose)
    axis = np.array([1.0, 2.0, -1.0]) / np.sqrt(6)
    shift = np.array([1.0, -1.0, 1.0]) / np.sqrt(3)
    init = perturb(pose, np.concatenate([0.05 * shift, np.deg2rad(2.0) * axis]))
    est = estimate_pose(target, subject_scene, 0, init, max_iters=60, tol=1e-6)
    assert est.losses == sorted(est.losses, reverse=True)
    assert rotation_angle(est.pose.R, pose.R) < 0.01
    assert np.linalg.norm(est.pose.center - pose.center) < 0.01


def test_estimate_pose_empty_scene_reports_nonconvergence():
    target = np.full((H, W, 3), 0.5)
    est = estimate_pose(target, Scene([]), 0, _origin_pose())
    assert not est.converged


def test_scene_roundtrip_and_lighting(tmp_path, subject_scene):
    subject_scene.save(tmp_path / "s.json")
    back = Scene.load(tmp_path / "s.json")
    pose = _origin_pose(6.0)
    assert np.array_equal(render_frame(back, pose), render_frame(subject_scene, pose))
    with pytest.raises(ValueError):
        LightingParams(gain=0.0)
    with pytest.raises(ValueError):
        Scene([], subject_registry={3: {}})


def test_video_io_roundtrip(tmp_path, subject_scene):
    traj = sample_trajectory(0, TrajectoryConfig(frames=3, look_at=(0, -1, 0)))
    frames, masks = render_video(subject_scene, traj)
    assert frames.shape == (3, H, W, 3) and masks.weights.shape == (2, 3, H, W)
    write_frames(frames, tmp_path / "v")
    write_masks(masks, tmp_path / "m")
    np.testing.assert_allclose(read_frames(tmp_path / "v"), frames, atol=0.5 / 255 + 1e-9)
    assert read_masks(tmp_path / "m").subject_ids == [0, 1]
