import numpy as np
import pytest
import torch
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from camid.blend import (BlendPlan, SegmentationError, blended_sample, complete_masks, iou, masks_to_tokens,
                         segment_subjects, subject_prompts, tokens_to_pixels)
from camid.camera import TrajectoryConfig, sample_trajectory
from camid.customize import AdapterSet
from camid.pipeline import sample_with_warmup
from camid.scenegen import IdentityDescriptor, STUDIO, make_scene, make_subject
from camid.splat.render import render_video

GENERIC = ["a", "person", "and", "a", "person", "in", "studio"]


def _adapters(model, token, seed):
    a = AdapterSet(model, [token])
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in a.parameters():
            p.copy_(torch.randn(p.shape, generator=g) * 0.1)
    return a


def _plan(n=2, steps=5, warm=0.1):
    tokens = [f"SUBJ_{k + 1}" for k in range(n)]
    return BlendPlan(GENERIC, subject_prompts(GENERIC, tokens), seed=3, steps=steps, warmup_fraction=warm)


def test_complete_masks_nearest_region():
    raw = np.zeros((2, 1, 1, 7), dtype=bool)
    raw[0, 0, 0, 0] = True
    raw[1, 0, 0, 5] = True
    out = complete_masks(raw)
    # columns 0-2 are closer to region 0, 4-6 to region 1, column 3 is 3 vs 2 away
    np.testing.assert_array_equal(out[0, 0, 0], [1, 1, 1, 0, 0, 0, 0])
    np.testing.assert_array_equal(out[1, 0, 0], [0, 0, 0, 1, 1, 1, 1])


def test_complete_masks_tie_goes_to_lowest_index():
    raw = np.zeros((3, 1, 1, 5), dtype=bool)
    raw[2, 0, 0, 0] = True
    raw[1, 0, 0, 4] = True
    out = complete_masks(raw)
    assert out[1, 0, 0, 2] == 1.0 and out[2, 0, 0, 2] == 0.0  # equidistant column
    assert not out[0].any()


def test_complete_masks_uses_time_axis():
    raw = np.zeros((2, 3, 1, 1), dtype=bool)
    raw[0, 0] = True
    raw[1, 2] = True
    out = complete_masks(raw)
    np.testing.assert_array_equal(out[0, :, 0, 0], [1, 1, 0])  # t=1 tie goes to region 0


def test_complete_masks_keeps_raw_pixels_and_rejects_empty():
    raw = np.random.default_rng(0).random((2, 2, 6, 6)) > 0.8
    raw[1] &= ~raw[0]
    out = complete_masks(raw)
    assert np.all(out[0][raw[0]] == 1) and np.all(out[1][raw[1]] == 1)
    np.testing.assert_array_equal(out.sum(0), 1.0)
    with pytest.raises(SegmentationError):
        complete_masks(np.zeros((2, 1, 2, 2), dtype=bool))


@given(arrays(np.float64, (3, 4, 8, 8), elements=st.floats(0.0, 1.0)))
def test_token_masks_partition_unity(w):
    w = w + 1e-3
    w /= w.sum(0, keepdims=True)
    tok = masks_to_tokens(w, 2, 4)
    assert tok.shape == (3, 2, 2, 2)
    assert np.max(np.abs(tok.sum(0) - 1.0)) <= 1e-5
    pix = tokens_to_pixels(tok, 2, 4)
    assert pix.shape == w.shape and np.max(np.abs(pix.sum(0) - 1.0)) <= 1e-5


def test_hard_masks_partition_after_downsampling():
    raw = np.random.default_rng(1).random((2, 4, 16, 16)) > 0.7
    tok = masks_to_tokens(complete_masks(raw), 2, 4)
    assert np.max(np.abs(tok.sum(0) - 1.0)) <= 1e-5


def test_subject_prompts():
    assert subject_prompts(GENERIC, ["SUBJ_1", "SUBJ_2"]) == [
        ["a", "SUBJ_1", "and", "a", "person", "in", "studio"],
        ["a", "person", "and", "a", "SUBJ_2", "in", "studio"]]
    with pytest.raises(ValueError):
        subject_prompts(["a", "person"], ["SUBJ_1", "SUBJ_2"])


def test_plan_roundtrip_and_validation(tmp_path):
    plan = _plan()
    plan.save(tmp_path / "p.json")
    assert BlendPlan.load(tmp_path / "p.json") == plan
    with pytest.raises(ValueError):
        BlendPlan(["a", "SUBJ_1"], [["a", "SUBJ_1"]], 0).validate()
    with pytest.raises(ValueError):
        BlendPlan(GENERIC, [GENERIC], 0, warmup_fraction=1.0).validate()


@pytest.mark.parametrize("steps,warm", [(5, 0.1), (10, 0.0), (10, 0.3)])
def test_single_subject_full_mask_is_customized_sampling(tiny_model, steps, warm):
    cfg = tiny_model.cfg
    a = _adapters(tiny_model, "SUBJ_1", 0)
    plan = BlendPlan(["a", "person", "in", "studio"], [["a", "SUBJ_1", "in", "studio"]], seed=7, steps=steps,
                     warmup_fraction=warm)
    masks = np.ones((1, cfg.frames, cfg.height, cfg.width_px))
    blended = blended_sample(tiny_model, None, plan, [a], masks, None)
    plain = sample_with_warmup(tiny_model, None, a, plan.prompts[0], plan.generic_prompt, None, steps, 7, warm)
    assert torch.equal(blended, plain)


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_identical_adapters_any_partition(tiny_model, seed):
    cfg = tiny_model.cfg
    a = _adapters(tiny_model, "SUBJ_1", 5)
    words = ["a", "SUBJ_1", "in", "studio"]
    plan = BlendPlan(["a", "person", "in", "studio"], [words, words], seed=1, steps=5)
    rng = np.random.default_rng(seed)
    raw = rng.random((2, cfg.frames, cfg.height, cfg.width_px)) > 0.5
    raw[1] = ~raw[0]
    soft = rng.random((2, cfg.frames, cfg.height, cfg.width_px))
    soft /= soft.sum(0, keepdims=True)
    plain = sample_with_warmup(tiny_model, None, a, words, plan.generic_prompt, None, 5, 1, 0.1)
    for masks in (raw.astype(np.float64), soft):
        assert torch.equal(blended_sample(tiny_model, None, plan, [a, a], masks, None), plain)


def test_blend_rejects_mismatched_inputs(tiny_model):
    cfg = tiny_model.cfg
    a = _adapters(tiny_model, "SUBJ_1", 0)
    masks = np.ones((2, cfg.frames, cfg.height, cfg.width_px)) / 2
    with pytest.raises(ValueError):
        blended_sample(tiny_model, None, _plan(), [a], masks, None)


def test_segmentation_oracle_on_ground_truth():
    frames = 4
    gs = [make_subject(IdentityDescriptor(11), 1, frames, subject_id=1),
          make_subject(IdentityDescriptor(22), 2, frames, subject_id=2)]
    scene = make_scene(gs, 5, setting=STUDIO, frames=frames)
    traj = sample_trajectory(2, TrajectoryConfig(frames=frames, look_at=(0, -1, 0), r_min=4.0, r_max=5.0,
                                                 azimuth_range=(-20, 20)))
    video, masks = render_video(scene, traj)
    seg = segment_subjects(video, 2)
    # left/right order in the image is the camera's, so match slots to ids by overlap
    gt = [masks.of(1) > 0.5, masks.of(2) > 0.5]
    best = max(iou(seg[0], gt[0]) + iou(seg[1], gt[1]), iou(seg[0], gt[1]) + iou(seg[1], gt[0])) / 2
    assert best > 0.6
