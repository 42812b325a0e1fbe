import math

import pytest
import torch

from camid.camctrl import (GATE_FRACTION, ControlBranch, DivergenceMonitor, active_steps, apply_schedule,
                           load_branch, make_control, pretrain_camera, sample_open_gate, save_branch)
from camid.camera import TrajectoryConfig, sample_trajectory
from camid.config_io import ModelConfig
from camid.data import VideoData
from camid.dit import ShapeError, TrainingDiverged, VideoDiT, checksum, sample, tokenize
from camid.pipeline import camera_tokens, generate


def _traj(cfg):
    return sample_trajectory(3, TrajectoryConfig(frames=cfg.frames, width=cfg.width_px, height=cfg.height))


def _ids(cfg):
    return torch.tensor([tokenize(["a", "person", "in", "studio"], cfg.max_prompt)])


@pytest.mark.parametrize("n", [5, 50])
def test_gate_steps(n):
    assert active_steps(n) == list(range(math.ceil(0.4 * n)))


def test_gate_boundaries():
    assert apply_schedule(1.0) and not apply_schedule(0.6) and apply_schedule(0.6000001)
    with pytest.raises(ValueError):
        apply_schedule(0.5, 0.0)


def test_open_gate_draws_stay_open():
    g = torch.Generator().manual_seed(0)
    assert all(apply_schedule(sample_open_gate(g)) for _ in range(1000))


def test_fresh_branch_is_identity(tiny_model):
    cfg = tiny_model.cfg
    branch = ControlBranch(tiny_model)
    traj = _traj(cfg)
    a = generate(tiny_model, None, ["a", "person", "in", "studio"], None, 6, 4)
    b = generate(tiny_model, branch, ["a", "person", "in", "studio"], traj, 6, 4)
    assert torch.equal(a, b)


@pytest.mark.parametrize("blocks", [1, 4, 5, 8])
def test_residuals_only_for_first_quarter(blocks):
    cfg = ModelConfig(blocks=blocks, width=16, heads=2, frames=4, height=8, width_px=8, max_prompt=6)
    m = VideoDiT(cfg)
    branch = ControlBranch(m)
    n = math.ceil(0.25 * blocks)
    assert branch.n_blocks == m.n_control == n
    res = [torch.randn(1, cfg.n_video_tokens, cfg.width) for _ in range(n)]
    seen_in, seen_out = [], []
    hooks = [blk.register_forward_pre_hook(lambda mod, args: seen_in.append(args[0].clone())) for blk in m.blocks]
    hooks += [blk.register_forward_hook(lambda mod, args, out: seen_out.append(out.clone())) for blk in m.blocks]
    z = torch.randn(1, 4, 8, 8, 3)
    with torch.no_grad():
        m(z, torch.tensor([0.9]), _ids(cfg), res)
    for h in hooks:
        h.remove()
    P = cfg.max_prompt
    for k in range(1, blocks):
        delta = seen_in[k][:, P:] - seen_out[k - 1][:, P:]
        if k < n:
            torch.testing.assert_close(delta, res[k])
        else:
            assert torch.count_nonzero(delta) == 0
        assert torch.equal(seen_in[k][:, :P], seen_out[k - 1][:, :P])


def test_control_provider_respects_gate(tiny_model):
    branch = ControlBranch(tiny_model)
    provider = make_control(branch, camera_tokens(tiny_model, branch, _traj(tiny_model.cfg)))
    assert provider(0.9) is not None and provider(0.5) is None
    assert make_control(None, None) is None
    with pytest.raises(ValueError):
        make_control(branch, None)


def test_plucker_shape_checked(tiny_model):
    branch = ControlBranch(tiny_model)
    with pytest.raises(ShapeError):
        branch.encode_plucker(torch.zeros(1, 4, 8, 8, 6))


def test_pretrain_camera_freezes_main(tiny_model, tiny_data):
    general, _ = tiny_data
    data = VideoData(general, tiny_model.cfg.max_prompt)
    branch = ControlBranch(tiny_model)
    main_before, branch_before = checksum(tiny_model), checksum(branch)
    log = pretrain_camera(tiny_model, branch, data, 6, 1e-3, 0, log_every=2)
    assert checksum(tiny_model) == main_before
    assert checksum(branch) != branch_before
    assert len(log.losses) == 6
    assert all(not p.requires_grad for p in tiny_model.parameters())


def test_trained_branch_changes_early_steps_only(tiny_model, tiny_data):
    general, _ = tiny_data
    branch = ControlBranch(tiny_model)
    pretrain_camera(tiny_model, branch, VideoData(general, tiny_model.cfg.max_prompt), 4, 3e-3, 1)
    cfg = tiny_model.cfg
    ids, traj = _ids(cfg), _traj(cfg)
    provider = make_control(branch, camera_tokens(tiny_model, branch, traj))
    with torch.no_grad():
        z = torch.randn(1, 4, 16, 16, 3)
        late = tiny_model(z, torch.tensor([0.3]), ids, provider(0.3))
        plain = tiny_model(z, torch.tensor([0.3]), ids)
        early = tiny_model(z, torch.tensor([0.9]), ids, provider(0.9))
        plain_early = tiny_model(z, torch.tensor([0.9]), ids)
    assert torch.equal(late, plain)
    assert not torch.equal(early, plain_early)


def test_branch_checkpoint_roundtrip(tmp_path, tiny_model):
    branch = ControlBranch(tiny_model)
    with torch.no_grad():
        branch.out_proj[0].weight.normal_()
    save_branch(branch, tmp_path / "b", checksum(tiny_model), {"seed": 1})
    back = load_branch(tmp_path / "b", tiny_model)
    assert checksum(back) == checksum(branch)
    other = VideoDiT(tiny_model.cfg)
    with pytest.raises(ValueError):
        load_branch(tmp_path / "b", other)


def test_divergence_monitor():
    mon = DivergenceMonitor(factor=10.0, patience=3)
    mon.update(1.0)
    for _ in range(2):
        mon.update(20.0)
    mon.update(1.0)  # resets the run
    with pytest.raises(TrainingDiverged):
        for _ in range(3):
            mon.update(20.0)
    with pytest.raises(TrainingDiverged):
        DivergenceMonitor().update(float("nan"))
